import json

import numpy as np
import pytest

from ktm import tensor as T
from ktm.data import SampleRecord
from ktm.encoder import KGramCache, MergeEncoder, encoder_forward
from ktm.errors import CapacityError, ContractError
from ktm.infer import (CompressedSlot, GenerationConfig, MixedSequence, classify, dump_trace, generate,
                       prefill, restricted_argmax)
from ktm.model import embed_tokens, forward_lm
from ktm.tensor import Tensor
from ktm.train import Trainer


def _randomize_lora(adapters, seed=0):
    rng = np.random.default_rng(seed)
    for ad in adapters.values():
        ad.B.assign_(rng.normal(0, 0.3, size=ad.B.shape).astype(ad.B.dtype))


def test_eight_tokens_k2_gives_four_slots(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(2, params.config.embed_dim, np.random.default_rng(0))
    seq = prefill(enc, params, tok.encode("abcdefgh"), tok.pad_id)
    assert seq.n_compressed == 4 == len(seq)
    assert [s.source_block for s in seq.slots][0] == tuple(tok.encode("ab"))


def test_slot_embedding_is_encoder_output(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(3, params.config.embed_dim, np.random.default_rng(0))
    ids = tok.encode("abcdefg")
    seq = prefill(enc, params, ids, tok.pad_id)
    assert len(seq) == 3
    with T.no_grad():
        last = encoder_forward(enc, embed_tokens(params, ids[6:] + [tok.pad_id] * 2)).data
    assert seq.slots[-1].embedding.tobytes() == last.tobytes()


def test_k1_keeps_length(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(1, params.config.embed_dim, np.random.default_rng(0))
    ids = tok.encode("hello")
    seq = prefill(enc, params, ids, tok.pad_id)
    assert seq.n_compressed == len(ids)
    np.testing.assert_allclose(seq.embeddings(), embed_tokens(params, ids).data, atol=1e-5)


def test_prefill_deterministic_and_cache_neutral(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(4, params.config.embed_dim, np.random.default_rng(0))
    ids = tok.encode("n0\n  n1\n  n2\n\nparent: n0 child: n2?")
    a = prefill(enc, params, ids, tok.pad_id).embeddings()
    b = prefill(enc, params, ids, tok.pad_id, cache=KGramCache()).embeddings()
    assert a.tobytes() == b.tobytes()


def test_prefill_errors(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(2, params.config.embed_dim, np.random.default_rng(0))
    with pytest.raises(ContractError):
        prefill(enc, params, [], tok.pad_id)
    with pytest.raises(CapacityError):
        prefill(enc, params, [5] * (2 * params.config.max_seq_len + 1), tok.pad_id)
    with pytest.raises(CapacityError):
        prefill(None, params, [5] * (params.config.max_seq_len + 1), tok.pad_id)


def test_keep_last_suffix_stays_original(tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(4, params.config.embed_dim, np.random.default_rng(0))
    seq = prefill(enc, params, tok.encode("abcdefgh?"), tok.pad_id, keep_last=1)
    assert seq.n_compressed == 2 and seq.original_tokens == tok.encode("?")


def test_compressed_after_original_rejected(tiny_model):
    seq = MixedSequence()
    seq.append_original(5, np.zeros(4))
    with pytest.raises(ContractError):
        seq.append_compressed(CompressedSlot(np.zeros(4), (1, 2)))


def test_generation_config_validation():
    with pytest.raises(ContractError):
        GenerationConfig(max_new_tokens=0)
    with pytest.raises(ContractError):
        GenerationConfig(mode="sample", temperature=0.0)
    with pytest.raises(ContractError):
        GenerationConfig(mode="beam")


def test_greedy_is_argmax_and_cache_matches_recompute(tiny_model, tok):
    params, adapters = tiny_model
    _randomize_lora(adapters)
    enc = MergeEncoder(4, params.config.embed_dim, np.random.default_rng(0))
    ids = tok.encode("n0\n  n1\n\nparent: n0 child: n1?")
    cfg = GenerationConfig(max_new_tokens=12, stop_id=-1)
    s1 = prefill(enc, params, ids, tok.pad_id)
    out, rows = generate(s1, params, adapters, cfg, use_cache=True, return_logits=True)
    assert out == [int(np.argmax(r)) for r in rows]
    s2 = prefill(enc, params, ids, tok.pad_id)
    out2, rows2 = generate(s2, params, adapters, cfg, use_cache=False, return_logits=True)
    assert out == out2
    np.testing.assert_allclose(rows, rows2, rtol=0, atol=1e-5)
    # full forward over the final mixed sequence reproduces every step
    full = forward_lm(params, adapters, Tensor(s1.embeddings())).data
    n0 = s1.n_compressed
    np.testing.assert_allclose(full[n0 - 1:n0 - 1 + len(out)], rows, rtol=0, atol=1e-5)


def test_stop_token_halts(tiny_model, tok):
    params, adapters = tiny_model
    seq = prefill(None, params, tok.encode("abc"), tok.pad_id)
    with T.no_grad():
        first = int(np.argmax(forward_lm(params, adapters, Tensor(seq.embeddings())).data[-1]))
    out = generate(seq, params, adapters, GenerationConfig(max_new_tokens=10, stop_id=first))
    assert out == [first]
    assert seq.original_tokens[-1] == first


def test_sampling_reproducible_and_in_vocab(tiny_model, tok):
    params, adapters = tiny_model
    cfg = GenerationConfig(max_new_tokens=20, mode="sample", temperature=1.5, seed=3, stop_id=-1)
    a = generate(prefill(None, params, tok.encode("xy"), tok.pad_id), params, adapters, cfg)
    b = generate(prefill(None, params, tok.encode("xy"), tok.pad_id), params, adapters, cfg)
    assert a == b
    assert all(0 <= t < params.config.vocab_size for t in a)


def test_restricted_argmax():
    logits = np.zeros(10)
    assert restricted_argmax(logits, [7, 3]) == 3
    logits[7] = 1.0
    assert restricted_argmax(logits, [3, 7]) == 7
    assert restricted_argmax(logits, [5]) == 5
    with pytest.raises(ContractError):
        restricted_argmax(logits, [3, 3])
    with pytest.raises(ContractError):
        restricted_argmax(logits, [])


def test_classify_matches_restricted_logits(tiny_model, tok):
    params, adapters = tiny_model
    _randomize_lora(adapters, 1)
    seq = prefill(None, params, tok.encode("abc"), tok.pad_id)
    with T.no_grad():
        row = forward_lm(params, adapters, Tensor(seq.embeddings())).data[-1]
    want = tok.true_id if row[tok.true_id] >= row[tok.false_id] else tok.false_id
    assert classify(seq, params, adapters, [tok.true_id, tok.false_id]) == want


def test_memorized_completion_reproduced(tiny_model, tok):
    params, adapters = tiny_model
    enc = MergeEncoder(4, params.config.embed_dim, np.random.default_rng(2))
    rec = SampleRecord("n0\n  n1\n  n2\n\nparent: n0 child: n2?", "yes it is", {})
    tr = Trainer(params, adapters, enc, tok, lr=1e-2, full_finetune=True, batch_size=1)
    batch = tr.batch([rec])
    for _ in range(300):
        tr.step(batch)
    seq = prefill(enc, params, tok.encode(rec.prompt), tok.pad_id)
    out = generate(seq, params, adapters, GenerationConfig(max_new_tokens=20))
    assert out == tok.encode(rec.completion) + [tok.stop_id]


def test_dump_trace(tmp_path, tiny_model, tok):
    params, _ = tiny_model
    enc = MergeEncoder(2, params.config.embed_dim, np.random.default_rng(0))
    seq = prefill(enc, params, tok.encode("abc"), tok.pad_id)
    path = tmp_path / "t.jsonl"
    dump_trace(seq, [5, 1], path)
    obj = json.loads(path.read_text())
    assert obj["n_compressed"] == 2 and obj["blocks"][1] == tok.encode("c") + [tok.pad_id]
    assert obj["emitted"] == [5, 1]
