import numpy as np
import pytest

from ktm import tensor as T
from ktm.errors import CapacityError, ContractError, ShapeError, VocabularyError
from ktm.model import (KVCache, ModelConfig, attach_lora, embed_tokens, forward_lm, init_params,
                       trainable_parameters)
from ktm.tensor import Tensor


def _inputs(params, tokens):
    return embed_tokens(params, tokens)


def test_config_invariants():
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=10, embed_dim=10, n_heads=3)
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=1)


def test_fresh_lora_is_bit_identical_to_base(tiny_model):
    params, adapters = tiny_model
    x = _inputs(params, [5, 9, 30, 31, 7])
    base = forward_lm(params, None, x).data
    adapted = forward_lm(params, adapters, x).data
    assert base.tobytes() == adapted.tobytes()


def test_lora_changes_output_once_b_is_nonzero(tiny_model):
    params, adapters = tiny_model
    x = _inputs(params, [5, 9, 30])
    base = forward_lm(params, None, x).data
    ad = adapters["layers.0.attn.q"]
    ad.B.assign_(np.full(ad.B.shape, 0.1, dtype=np.float32))
    assert not np.array_equal(base, forward_lm(params, adapters, x).data)


def test_lora_scale_rule(tiny_model):
    params, adapters = tiny_model
    ad = adapters["layers.0.mlp.fc1"]
    assert ad.scale == 16.0 / 4
    assert ad.A.shape == (4, 16) and ad.B.shape == (64, 4)


def test_causality_suffix_permutation(tiny_model):
    params, adapters = tiny_model
    a = forward_lm(params, adapters, _inputs(params, [10, 11, 12, 13, 14, 15])).data
    b = forward_lm(params, adapters, _inputs(params, [10, 11, 12, 15, 13, 14])).data
    np.testing.assert_array_equal(a[:3], b[:3])


def test_appending_never_changes_earlier_logits(tiny_model):
    params, adapters = tiny_model
    short = forward_lm(params, adapters, _inputs(params, [4, 5, 6])).data
    long = forward_lm(params, adapters, _inputs(params, [4, 5, 6, 7, 8])).data
    np.testing.assert_allclose(short, long[:3], rtol=0, atol=1e-6)


def test_single_position_shape(tiny_model, tiny_config):
    params, adapters = tiny_model
    assert forward_lm(params, adapters, _inputs(params, [4])).shape == (1, tiny_config.vocab_size)


def test_batched_forward_matches_single(tiny_model):
    params, adapters = tiny_model
    x = _inputs(params, [[4, 5, 6], [7, 8, 9]])
    both = forward_lm(params, adapters, x).data
    one = forward_lm(params, adapters, _inputs(params, [7, 8, 9])).data
    np.testing.assert_allclose(both[1], one, atol=1e-6)


def test_capacity_and_dimension_errors(tiny_model, tiny_config):
    params, adapters = tiny_model
    with pytest.raises(CapacityError):
        forward_lm(params, adapters, _inputs(params, [4] * (tiny_config.max_seq_len + 1)))
    with pytest.raises(ShapeError):
        forward_lm(params, adapters, Tensor(np.zeros((3, 7), dtype=np.float32)))


def test_kv_cache_matches_full_forward(tiny_model):
    params, adapters = tiny_model
    x = _inputs(params, [4, 5, 6, 7, 8])
    full = forward_lm(params, adapters, x).data
    cache = KVCache(params.config.n_layers)
    with T.no_grad():
        first = forward_lm(params, adapters, x[:3], cache=cache).data
        rest = [forward_lm(params, adapters, x[i:i + 1], cache=cache).data for i in (3, 4)]
    np.testing.assert_allclose(np.concatenate([first] + rest), full, atol=1e-5)


def test_embed_tokens(tiny_model):
    params, _ = tiny_model
    np.testing.assert_array_equal(embed_tokens(params, [0]).data[0], params.emb.data[0])
    rep = embed_tokens(params, [7, 7]).data
    np.testing.assert_array_equal(rep[0], rep[1])
    assert embed_tokens(params, []).shape == (0, params.config.embed_dim)
    with pytest.raises(VocabularyError):
        embed_tokens(params, [params.config.vocab_size])
    with pytest.raises(VocabularyError):
        embed_tokens(params, [-1])


def test_trainable_parameter_sets(tiny_model, tiny_encoder):
    params, adapters = tiny_model
    lora_only = trainable_parameters(params, adapters, tiny_encoder, full_finetune=False)
    ids = {id(t) for t in lora_only.values()}
    assert id(params.emb) not in ids
    assert not any(k.startswith("model.") for k in lora_only)
    assert all(id(t) in ids for t in tiny_encoder.named().values())
    n_layers = params.config.n_layers
    assert sum(k.startswith("lora.") for k in lora_only) == 2 * 6 * n_layers
    assert {k.split(".")[3] + "." + k.split(".")[4] for k in lora_only if k.startswith("lora.")} == {
        "attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"}
    full = trainable_parameters(params, adapters, tiny_encoder, full_finetune=True)
    assert {id(t) for t in params.tensors.values()} <= {id(t) for t in full.values()}


def test_adapter_dropout_only_in_train_mode(tiny_model):
    params, adapters = tiny_model
    for ad in adapters.values():
        ad.B.assign_(np.random.default_rng(0).normal(size=ad.B.shape).astype(np.float32))
    x = _inputs(params, [4, 5, 6])
    ev1 = forward_lm(params, adapters, x).data
    ev2 = forward_lm(params, adapters, x).data
    tr = forward_lm(params, adapters, x, train_mode=True, rng=np.random.default_rng(1)).data
    assert np.array_equal(ev1, ev2)
    assert not np.array_equal(ev1, tr)


def test_logits_finite_for_float64_model(tok):
    cfg = ModelConfig(vocab_size=tok.vocab_size, embed_dim=8, n_layers=1, n_heads=2, max_seq_len=16)
    params = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    adapters = attach_lora(params, np.random.default_rng(1))
    out = forward_lm(params, adapters, embed_tokens(params, [4, 5]))
    assert out.dtype == np.float64 and np.all(np.isfinite(out.data))
