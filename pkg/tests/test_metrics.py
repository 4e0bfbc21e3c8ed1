import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktm import metrics as M
from ktm.data import SampleRecord
from ktm.encoder import MergeEncoder
from ktm.errors import ContractError, NumericDomainError
from ktm.model import ModelConfig, init_params
from ktm.train import Trainer

unit = st.floats(0.0, 1.0, allow_nan=False)


@pytest.mark.parametrize("preds,golds,want", [
    ([1, 1, 0, 0], [1, 0, 0, 0], 0.75),
    ([1, 2, 3], [1, 2, 3], 1.0),
    ([1, 1], [0, 0], 0.0),
])
def test_accuracy(preds, golds, want):
    assert M.accuracy(preds, golds) == want


def test_accuracy_errors():
    with pytest.raises(ContractError):
        M.accuracy([1], [1, 2])
    with pytest.raises(ContractError):
        M.accuracy([], [])


@pytest.mark.parametrize("k,want", [(4, 0.75), (2, 0.5), (1, 0.0)])
def test_length_reduction(k, want):
    assert M.length_reduction(12 * k, 12) == want


def test_length_reduction_errors():
    with pytest.raises(ContractError):
        M.length_reduction(3, 4)
    with pytest.raises(ContractError):
        M.length_reduction(0, 0)


def test_pl_f1_examples():
    assert round(M.pl_f1(0.9838, 0.75), 3) == 0.851
    assert round(M.pl_f1(0.9991, 0.50), 3) == 0.666
    assert M.pl_f1(0.7, 0.0) == 0.0
    assert M.pl_f1(0.0, 0.0) == 0.0
    with pytest.raises(ContractError):
        M.pl_f1(1.1, 0.5)


@given(unit, unit)
def test_pl_f1_symmetry_and_bound(p, l):
    assert M.pl_f1(p, l) == M.pl_f1(l, p)
    assert M.pl_f1(p, l) <= 2 * min(p, l) + 1e-12


@given(unit, unit, unit)
def test_pl_f1_monotone(p, l, q):
    lo, hi = sorted((p, q))
    assert M.pl_f1(lo, l) <= M.pl_f1(hi, l) + 1e-12


def test_normalize_ppl():
    p = M.normalize_ppl(1.391, 1.293)
    assert abs(p - 0.9296) <= 1e-4  # 0.929547 exactly; the 4-decimal figure is rounded up
    assert round(M.pl_f1(p, 0.75), 3) == 0.830
    assert round(M.pl_f1(M.normalize_ppl(1.343, 1.293), 0.5), 3) == 0.658
    assert M.normalize_ppl(1.5, 1.5) == 1.0
    with pytest.raises(ContractError):
        M.normalize_ppl(1.2, 1.3)


@pytest.mark.parametrize("name", ["tree", "amazon", "commitpack"])
def test_reference_rows_reproduce_published_f1(name):
    for rep, want in zip(M.reference_reports(name), M.REFERENCE_F1[name]):
        assert abs(rep.pl_f1 - want) <= 0.001, rep.method


def test_flop_ratio():
    assert M.flop_ratio(4, 10) == 0.0625
    assert M.flop_ratio(2, 7) == 0.25
    assert M.flop_ratio(1, 9, 5) == 1.0
    # decoding pulls the ratio towards 1
    assert 0.0625 < M.flop_ratio(4, 10, 100) < 1.0
    full = M.flop_ratio(4, 10, include_linear=True, embed_dim=64, n_layers=2)
    assert 0.0625 < full < 0.25 + 1e-12
    with pytest.raises(ContractError):
        M.flop_ratio(0, 3)


@given(st.integers(1, 8), st.integers(1, 200))
def test_flop_ratio_prefill_only_is_inverse_square(k, n):
    assert M.flop_ratio(k, n) == 1.0 / (k * k)


def test_flop_ratio_tends_to_prefill_value():
    r = [M.flop_ratio(4, n, 1) for n in (10, 100, 1000)]
    assert r[0] > r[1] > r[2] > 0.0625
    assert r[2] - 0.0625 < 1e-3


def test_bits_report():
    emb, _ = M.bits_report(151_936, 896, 32)
    assert emb == 28_672
    _, one = M.bits_report(151_936, 896, 32, k=1)
    assert one == pytest.approx(math.log2(151_936)) and round(one, 2) == 17.21
    _, four = M.bits_report(151_936, 896, 32, k=4)
    assert round(four, 2) == 68.85
    with pytest.raises(ContractError):
        M.bits_report(0, 1, 1)


def test_perplexity_from_logprobs():
    v = 32
    assert M.perplexity_from_logprobs([np.full(3, -math.log(v)), np.full(2, -math.log(v))]) == pytest.approx(v)
    assert M.perplexity_from_logprobs([np.zeros(4)]) == 1.0
    with pytest.raises(NumericDomainError, match="record 1"):
        M.perplexity_from_logprobs([np.zeros(2), np.array([-np.inf])])
    with pytest.raises(ContractError):
        M.perplexity_from_logprobs([])


def test_uniform_model_perplexity_is_vocab_size(tok):
    cfg = ModelConfig(vocab_size=tok.vocab_size, embed_dim=8, n_layers=1, n_heads=2, max_seq_len=64)
    params = init_params(cfg, np.random.default_rng(0))
    w = params.tensors["unembed.w"]
    w.assign_(np.zeros_like(w.data))
    recs = [SampleRecord("abcdef", "xyz", {}), SampleRecord("ab", "q", {})]
    enc = MergeEncoder(2, 8, np.random.default_rng(0))
    assert M.perplexity(params, {}, enc, tok, recs) == pytest.approx(tok.vocab_size, rel=1e-6)


def test_perplexity_matches_masked_nll(tiny_model, tok):
    params, adapters = tiny_model
    rng = np.random.default_rng(4)
    for ad in adapters.values():
        ad.B.assign_(rng.normal(0, 0.2, size=ad.B.shape).astype(np.float32))
    enc = MergeEncoder(4, params.config.embed_dim, np.random.default_rng(1))
    recs = [SampleRecord(f"prompt number {i} " * (i + 1), "done" * (i % 3 + 1), {}) for i in range(7)]
    ppl = M.perplexity(params, adapters, enc, tok, recs)
    tr = Trainer(params, adapters, enc, tok)
    total, count = tr.nll_totals(recs, batch_size=3)
    assert ppl == pytest.approx(math.exp(total / count), rel=1e-6)


def test_make_report_and_serialization():
    rep = M.make_report("4-Token", "accuracy", 0.9838, [8, 16], [2, 4], k=4)
    assert rep.length_reduction == 0.75
    assert round(rep.pl_f1, 3) == 0.851
    assert rep.flop_ratio == 0.0625
    assert M.EvalReport.from_dict(json.loads(rep.to_json())) == rep
    assert rep.csv_row().split(",")[0] == "4-Token"
    assert M.EvalReport.csv_header().startswith("method,metric,raw")
    ppl = M.make_report("x", "perplexity", 1.391, [4], [1], ppl_min=1.293)
    assert abs(ppl.performance - 0.9296) <= 1e-4
    with pytest.raises(ContractError):
        M.make_report("x", "bleu", 1.0, [4], [1])


def test_padding_lowers_measured_l():
    rep = M.make_report("m", "accuracy", 1.0, [10], [3], k=4)
    assert rep.length_reduction == pytest.approx(0.7)


def test_pareto_flags_and_format():
    reps = M.reference_reports("tree")
    table = M.pareto_table(reps)
    flags = {r.method: f for r, f in table}
    assert flags["4-Token (published)"] and flags["Uncompressed (published)"]
    assert not flags["LLMLingua2 (published)"]
    text = M.format_pareto(table)
    assert "P-L F1" in text and "4-Token" in text


def test_normalize_perplexity_rows():
    reps = [M.make_report("a", "perplexity", 1.4, [4], [1]), M.make_report("b", "perplexity", 1.2, [4], [2])]
    M.normalize_perplexity_rows(reps)
    assert reps[1].performance == 1.0
    assert reps[0].performance == pytest.approx(1.2 / 1.4)
