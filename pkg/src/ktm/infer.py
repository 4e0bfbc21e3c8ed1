"""Prefill and generation over mixed compressed/original sequences."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PAD, STOP
from .encoder import KGramCache, MergeEncoder, compress_prefix, encoder_forward, partition_and_pad
from .errors import CapacityError, ContractError
from .model import KVCache, ModelParams, embed_tokens, forward_lm
from .tensor import Tensor


@dataclass
class CompressedSlot:
    embedding: np.ndarray
    source_block: tuple


@dataclass
class OriginalSlot:
    token: int
    embedding: np.ndarray


@dataclass
class MixedSequence:
    """``(C_1..C_N, G_1..G_M)``: compressed slots strictly before original ones."""

    slots: list = field(default_factory=list)

    @property
    def n_compressed(self) -> int:
        n = 0
        for s in self.slots:
            if not isinstance(s, CompressedSlot):
                break
            n += 1
        return n

    @property
    def original_tokens(self) -> list:
        return [s.token for s in self.slots if isinstance(s, OriginalSlot)]

    def __len__(self):
        return len(self.slots)

    def append_compressed(self, slot: CompressedSlot) -> None:
        if any(isinstance(s, OriginalSlot) for s in self.slots):
            raise ContractError("compressed slots may only precede original slots")
        self.slots.append(slot)

    def append_original(self, token: int, embedding: np.ndarray) -> None:
        self.slots.append(OriginalSlot(int(token), np.asarray(embedding)))

    def embeddings(self) -> np.ndarray:
        return np.stack([s.embedding for s in self.slots])

    def trace(self) -> dict:
        return {
            "n_compressed": self.n_compressed,
            "blocks": [list(s.source_block) for s in self.slots if isinstance(s, CompressedSlot)],
            "original_tokens": self.original_tokens,
        }


@dataclass
class GenerationConfig:
    max_new_tokens: int = 32
    mode: str = "greedy"
    temperature: float = 1.0
    stop_id: int = STOP
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ContractError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ContractError("temperature must be > 0 when sampling")


def prefill(enc: MergeEncoder | None, params: ModelParams, prompt_tokens,
            pad_token: int = PAD, cache: KGramCache | None = None,
            keep_last: int = 0) -> MixedSequence:
    """Compress a prompt into a mixed sequence.

    ``enc=None`` keeps every prompt token as an original slot (the
    uncompressed baseline). ``keep_last`` leaves that many trailing prompt
    tokens uncompressed.
    """
    tokens = [int(t) for t in prompt_tokens]
    if not tokens:
        raise ContractError("prompt must be nonempty")
    cfg = params.config
    seq = MixedSequence()
    with T.no_grad():
        if enc is None:
            if len(tokens) > cfg.max_seq_len:
                raise CapacityError(f"prompt of {len(tokens)} tokens exceeds capacity {cfg.max_seq_len}")
            for tok, vec in zip(tokens, embed_tokens(params, tokens).data):
                seq.append_original(tok, vec)
            return seq
        head, tail = (tokens[:-keep_last], tokens[-keep_last:]) if keep_last else (tokens, [])
        if len(head) > enc.k * cfg.max_seq_len:
            raise CapacityError(
                f"prompt of {len(head)} tokens exceeds K*max_seq_len = {enc.k * cfg.max_seq_len}"
            )
        if head:
            _, blocks = partition_and_pad(head, enc.k, pad_token)
            comp = compress_prefix(enc, params, head, pad_token, cache)
            for block, vec in zip(blocks, comp.data):
                seq.append_compressed(CompressedSlot(vec.copy(), block))
        if tail:
            for tok, vec in zip(tail, embed_tokens(params, tail).data):
                seq.append_original(tok, vec)
    if len(seq) > cfg.max_seq_len:
        raise CapacityError(f"mixed sequence of {len(seq)} slots exceeds max_seq_len {cfg.max_seq_len}")
    return seq


def _pick(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / cfg.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate(seq: MixedSequence, params: ModelParams, adapters: dict | None,
             cfg: GenerationConfig, use_cache: bool = True, return_logits: bool = False):
    """Append up to ``cfg.max_new_tokens`` original tokens to ``seq``.

    Returns the emitted ids (the stop token included when hit); with
    ``return_logits`` also the logits row each id was chosen from.
    """
    rng = np.random.default_rng(cfg.seed)
    emitted, rows = [], []
    with T.no_grad():
        kv = KVCache(params.config.n_layers) if use_cache else None
        logits = forward_lm(params, adapters, Tensor(seq.embeddings()), cache=kv).data[-1]
        for _ in range(cfg.max_new_tokens):
            tok = _pick(logits, cfg, rng)
            emitted.append(tok)
            rows.append(logits.copy())
            vec = embed_tokens(params, [tok]).data[0]
            seq.append_original(tok, vec)
            if tok == cfg.stop_id or len(seq) >= params.config.max_seq_len:
                break
            if use_cache:
                logits = forward_lm(params, adapters, Tensor(vec[None, :]), cache=kv).data[-1]
            else:
                logits = forward_lm(params, adapters, Tensor(seq.embeddings())).data[-1]
    return (emitted, np.stack(rows)) if return_logits else emitted


def restricted_argmax(logits: np.ndarray, label_tokens) -> int:
    """Label with the largest logit; ties go to the lowest token id."""
    labels = [int(t) for t in label_tokens]
    if not labels:
        raise ContractError("label_tokens must be nonempty")
    if len(set(labels)) != len(labels):
        raise ContractError(f"duplicate label tokens in {labels}")
    ordered = sorted(labels)
    return ordered[int(np.argmax(logits[ordered]))]


def classify(seq: MixedSequence, params: ModelParams, adapters: dict | None, label_tokens) -> int:
    with T.no_grad():
        logits = forward_lm(params, adapters, Tensor(seq.embeddings())).data[-1]
    return restricted_argmax(logits, label_tokens)


# -- batched assembly shared with training -------------------------------------

@dataclass
class TrainBatch:
    """Padded batch of mixed sequences, stored as ids until embedded.

    Inputs are gathered from a source table ``[compressed rows; original
    rows; zero row]`` via ``source_index``. ``loss_mask[b, t]`` marks logits
    position ``t`` whose target ``targets[b, t]`` lies in the uncompressed
    index set.
    """

    blocks: np.ndarray | None  # (n_blocks, K) or None when uncompressed
    original_ids: np.ndarray
    source_index: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    loss_mask: np.ndarray  # (B, T) bool
    n_compressed: np.ndarray  # (B,)
    last_prompt_pos: np.ndarray  # (B,) position whose logits predict the first target
    labels: list | None = None

    @property
    def size(self) -> int:
        return self.source_index.shape[0]

    def check(self) -> None:
        B, Tn = self.targets.shape
        pos = np.arange(Tn)[None, :] + 1  # index of the predicted slot
        if np.any(self.loss_mask & (pos < self.n_compressed[:, None])):
            raise ContractError("uncompressed index set references a compressed slot")


def make_batch(prompts: list, targets: list, k: int | None, pad_token: int = PAD,
               lm_all: bool = False, labels=None) -> TrainBatch:
    """Assemble prompts (token lists) and target token lists into a :class:`TrainBatch`.

    With ``k=None`` prompts stay uncompressed. ``lm_all`` extends the loss to
    every uncompressed prompt position as well (plain language modelling).
    """
    blocks, original_ids = [], []
    rows = []
    for prompt, tgt in zip(prompts, targets):
        if k is not None:
            _, bl = partition_and_pad(prompt, k, pad_token)
            comp_idx = list(range(len(blocks), len(blocks) + len(bl)))
            blocks.extend(bl)
            orig = list(tgt[:-1])
            seq_targets = [pad_token] * (len(bl) - 1) + list(tgt)
            n_comp = len(bl)
            start_loss = len(bl) - 1
        else:
            comp_idx = []
            orig = list(prompt) + list(tgt[:-1])
            seq_targets = list(prompt[1:]) + list(tgt)
            n_comp = 0
            start_loss = 0 if lm_all else len(prompt) - 1
        orig_idx = list(range(len(original_ids), len(original_ids) + len(orig)))
        original_ids.extend(orig)
        rows.append((comp_idx, orig_idx, seq_targets, n_comp, start_loss))
    n_blocks = len(blocks)
    zero_row = n_blocks + len(original_ids)
    Tmax = max(len(c) + len(o) for c, o, *_ in rows)
    B = len(rows)
    source_index = np.full((B, Tmax), zero_row, dtype=np.int64)
    tgt_arr = np.full((B, Tmax), pad_token, dtype=np.int64)
    mask = np.zeros((B, Tmax), dtype=bool)
    n_compressed = np.zeros(B, dtype=np.int64)
    last_prompt = np.zeros(B, dtype=np.int64)
    for b, (comp_idx, orig_idx, seq_targets, n_comp, start_loss) in enumerate(rows):
        idx = comp_idx + [n_blocks + i for i in orig_idx]
        source_index[b, :len(idx)] = idx
        tgt_arr[b, :len(seq_targets)] = seq_targets
        mask[b, start_loss:len(seq_targets)] = True
        n_compressed[b] = n_comp
        last_prompt[b] = len(seq_targets) - len(targets[b])
    return TrainBatch(
        blocks=np.array(blocks, dtype=np.int64).reshape(-1, k) if k is not None else None,
        original_ids=np.array(original_ids, dtype=np.int64),
        source_index=source_index,
        targets=tgt_arr,
        loss_mask=mask,
        n_compressed=n_compressed,
        last_prompt_pos=last_prompt,
        labels=labels,
    )


def batch_inputs(batch: TrainBatch, params: ModelParams, enc: MergeEncoder | None) -> Tensor:
    """Embed a batch into ``(B, T, d)`` model inputs (on the gradient tape)."""
    d = params.config.embed_dim
    parts = []
    if batch.blocks is not None and len(batch.blocks):
        if enc is None:
            raise ContractError("compressed batch needs an encoder")
        parts.append(encoder_forward(enc, embed_tokens(params, batch.blocks)))
    if len(batch.original_ids):
        parts.append(embed_tokens(params, batch.original_ids))
    parts.append(Tensor(np.zeros((1, d), dtype=params.emb.dtype)))
    source = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return T.take(source, batch.source_index)


def classify_batch(batch: TrainBatch, params: ModelParams, adapters, enc, label_tokens) -> np.ndarray:
    with T.no_grad():
        logits = forward_lm(params, adapters, batch_inputs(batch, params, enc)).data
    rows = logits[np.arange(batch.size), batch.last_prompt_pos]
    return np.array([restricted_argmax(r, label_tokens) for r in rows])


def dump_trace(seq: MixedSequence, emitted: list, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({**seq.trace(), "emitted": emitted}) + "\n")
