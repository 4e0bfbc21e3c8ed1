"""Performance, compression and efficiency accounting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractError, NumericDomainError


def accuracy(preds, golds) -> float:
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds):
        raise ContractError(f"accuracy: {len(preds)} predictions vs {len(golds)} labels")
    if not preds:
        raise ContractError("accuracy: empty input")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def length_reduction(original_tokens: int, compressed_slots: int) -> float:
    if original_tokens <= 0 or compressed_slots <= 0:
        raise ContractError("length_reduction: counts must be positive")
    if compressed_slots > original_tokens:
        raise ContractError(
            f"length_reduction: {compressed_slots} slots exceed {original_tokens} original tokens"
        )
    return 1.0 - compressed_slots / original_tokens


def pl_f1(p: float, l: float) -> float:
    """Harmonic mean of normalized performance and length reduction."""
    for name, v in (("P", p), ("L", l)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"pl_f1: {name}={v} outside [0, 1]")
    if p + l == 0:
        return 0.0
    return 2.0 * p * l / (p + l)


def normalize_ppl(ppl_i: float, ppl_min: float) -> float:
    """Relative perplexity ratio ``ppl_min / ppl_i`` in (0, 1]."""
    if ppl_min < 1.0 or ppl_i < 1.0:
        raise ContractError("perplexities must be >= 1")
    if ppl_i < ppl_min:
        raise ContractError(f"ppl_i={ppl_i} is below ppl_min={ppl_min}")
    return ppl_min / ppl_i


def attention_flops(n_prefill: int, n_decode: int, embed_dim: int = 1, n_layers: int = 1) -> int:
    """Score + value FLOPs: dense ``n x n`` prefill, then one row per decode step."""
    per = 4 * embed_dim * n_layers
    decode = sum(n_prefill + j for j in range(1, n_decode + 1))
    return per * (n_prefill * n_prefill + decode)


def flop_ratio(k: int, n_compressed: int, n_generated: int = 0, embed_dim: int = 1,
               n_layers: int = 1, include_linear: bool = False,
               encoder_hidden: int | None = None) -> float:
    """Compressed / uncompressed FLOPs for a prompt of ``k * n_compressed`` tokens.

    The default counts only the quadratic attention term, so with no
    generated tokens the ratio is exactly ``1 / k**2``. ``include_linear``
    adds projection and MLP FLOPs (``24 d^2`` per token per layer) and, given
    ``encoder_hidden``, the encoder's cost per compressed slot.
    """
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    if n_compressed < 1 or n_generated < 0:
        raise ContractError("flop_ratio: need n_compressed >= 1 and n_generated >= 0")
    d, L = embed_dim, n_layers
    comp = attention_flops(n_compressed, n_generated, d, L)
    full = attention_flops(k * n_compressed, n_generated, d, L)
    if include_linear:
        comp += 24 * d * d * L * (n_compressed + n_generated)
        full += 24 * d * d * L * (k * n_compressed + n_generated)
        if encoder_hidden:
            h = encoder_hidden
            comp += 2 * (k * d * h + h * h + h * d) * n_compressed
    return float(Fraction(comp, full))


def bits_report(vocab_size: int, embed_dim: int, bits_per_component: int, k: int = 1) -> tuple:
    """(bits stored per embedding vector, bits needed to name a K-gram)."""
    if min(vocab_size, embed_dim, bits_per_component, k) <= 0:
        raise ContractError("bits_report: all arguments must be positive")
    return embed_dim * bits_per_component, k * math.log2(vocab_size)


def perplexity_from_logprobs(logprobs_per_record) -> float:
    """exp of the mean negative log-probability over all target tokens."""
    total, count = 0.0, 0
    for i, lp in enumerate(logprobs_per_record):
        lp = np.asarray(lp, dtype=np.float64)
        if not np.all(np.isfinite(lp)):
            raise NumericDomainError(f"non-finite log-probability in record {i}")
        total -= float(lp.sum())
        count += lp.size
    if count == 0:
        raise ContractError("perplexity: no target tokens")
    return math.exp(total / count)


def perplexity(params, adapters, encoder, tokenizer, records, batch_size: int = 64) -> float:
    """Perplexity over completion tokens, conditioned on the (compressed) prompt."""
    from . import tensor as T
    from .infer import batch_inputs, make_batch
    from .model import forward_lm

    def per_record():
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            prompts = [tokenizer.encode(r.prompt) for r in chunk]
            targets = [tokenizer.target_ids(r) for r in chunk]
            k = None if encoder is None else encoder.k
            batch = make_batch(prompts, targets, k, tokenizer.pad_id)
            with T.no_grad():
                logits = forward_lm(params, adapters, batch_inputs(batch, params, encoder)).data
            z = logits.astype(np.float64)
            z = z - z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            for b in range(batch.size):
                pos = np.nonzero(batch.loss_mask[b])[0]
                yield logp[b, pos, batch.targets[b, pos]]

    return perplexity_from_logprobs(per_record())


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    metric: str  # "accuracy" or "perplexity"
    raw: float
    performance: float
    length_reduction: float
    pl_f1: float
    flop_ratio: float | None = None
    k: int | None = None
    n_samples: int = 0
    tokens_before: int = 0
    tokens_after: int = 0
    extra: dict = field(default_factory=dict)

    CSV_FIELDS = ("method", "metric", "raw", "performance", "length_reduction", "pl_f1",
                  "flop_ratio", "k", "n_samples", "tokens_before", "tokens_after")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([getattr(self, f) for f in self.CSV_FIELDS])
        return buf.getvalue()

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def make_report(method: str, metric: str, raw: float, token_counts, slot_counts,
                k: int | None = None, ppl_min: float | None = None, n_generated: int = 0) -> EvalReport:
    """Build a report from a raw score and per-sample (tokens, slots) counts.

    L is averaged over samples. For perplexity, P uses ``ppl_min`` (default:
    the raw perplexity itself, i.e. P = 1 until compared against others).
    """
    token_counts = list(token_counts)
    slot_counts = list(slot_counts)
    if metric == "accuracy":
        p = raw
    elif metric == "perplexity":
        p = normalize_ppl(raw, raw if ppl_min is None else ppl_min)
    else:
        raise ContractError(f"unknown metric {metric!r}")
    lr = float(np.mean([length_reduction(t, s) for t, s in zip(token_counts, slot_counts)]))
    fr = None
    if k is not None and slot_counts:
        n_mean = max(1, round(float(np.mean(slot_counts))))
        fr = flop_ratio(k, n_mean, n_generated)
    return EvalReport(method, metric, raw, p, lr, pl_f1(p, lr), fr, k, len(token_counts),
                      int(sum(token_counts)), int(sum(slot_counts)))


# Published reference rows (method, metric, raw score, length reduction) per
# benchmark; accuracy as a fraction, perplexity as-is. Used as static context
# rows in Pareto tables.
REFERENCE_ROWS = {
    "tree": [
        ("Uncompressed", "accuracy", 0.9997, 0.0),
        ("SelectiveContext", "accuracy", 0.9043, 0.525),
        ("LLMLingua2", "accuracy", 0.8217, 0.270),
        ("LTSC", "accuracy", 0.9968, 0.271),
        ("2-Token", "accuracy", 0.9991, 0.500),
        ("3-Token", "accuracy", 0.9863, 0.667),
        ("4-Token", "accuracy", 0.9838, 0.750),
    ],
    "amazon": [
        ("Uncompressed", "accuracy", 0.9354, 0.0),
        ("SelectiveContext", "accuracy", 0.9130, 0.446),
        ("LLMLingua2", "accuracy", 0.9149, 0.510),
        ("LTSC", "accuracy", 0.9348, 0.001),
        ("2-Token", "accuracy", 0.9251, 0.500),
        ("3-Token", "accuracy", 0.9223, 0.667),
        ("4-Token", "accuracy", 0.9105, 0.750),
    ],
    "commitpack": [
        ("Uncompressed", "perplexity", 1.293, 0.0),
        ("SelectiveContext", "perplexity", 1.380, 0.399),
        ("LLMLingua2", "perplexity", 1.381, 0.300),
        ("LTSC", "perplexity", 1.296, 0.172),
        ("2-Token", "perplexity", 1.343, 0.500),
        ("3-Token", "perplexity", 1.382, 0.667),
        ("4-Token", "perplexity", 1.391, 0.750),
    ],
}

# Published P-L F1 for the rows above, same order.
REFERENCE_F1 = {
    "tree": [0.000, 0.664, 0.406, 0.426, 0.666, 0.796, 0.851],
    "amazon": [0.000, 0.599, 0.655, 0.002, 0.649, 0.774, 0.822],
    "commitpack": [0.000, 0.560, 0.454, 0.293, 0.658, 0.779, 0.830],
}


def reference_reports(name: str) -> list:
    rows = REFERENCE_ROWS[name]
    ppl_min = min((raw for _, m, raw, _ in rows if m == "perplexity"), default=None)
    out = []
    for method, metric, raw, lr in rows:
        p = raw if metric == "accuracy" else normalize_ppl(raw, ppl_min)
        out.append(EvalReport(f"{method} (published)", metric, raw, p, lr, pl_f1(p, lr)))
    return out


def normalize_perplexity_rows(reports: list) -> list:
    """Recompute P for perplexity rows against the minimum perplexity among them."""
    ppl = [r.raw for r in reports if r.metric == "perplexity"]
    if not ppl:
        return reports
    ppl_min = min(ppl)
    for r in reports:
        if r.metric == "perplexity":
            r.performance = normalize_ppl(r.raw, ppl_min)
            r.pl_f1 = pl_f1(r.performance, r.length_reduction)
    return reports


def pareto_table(reports: list) -> list:
    """Rows sorted by length reduction, each paired with its Pareto-optimal flag.

    A row is flagged unless some other row has strictly higher P and
    strictly higher L.
    """
    rows = sorted(reports, key=lambda r: (r.length_reduction, r.performance))
    out = []
    for r in rows:
        dominated = any(o.performance > r.performance and o.length_reduction > r.length_reduction
                        for o in rows if o is not r)
        out.append((r, not dominated))
    return out


def format_pareto(table: list) -> str:
    lines = [f"{'method':<28} {'P':>8} {'L':>8} {'P-L F1':>8}  pareto"]
    for r, flag in table:
        lines.append(f"{r.method:<28} {r.performance:8.4f} {r.length_reduction:8.3f} "
                     f"{r.pl_f1:8.3f}  {'*' if flag else ''}")
    return "\n".join(lines)
