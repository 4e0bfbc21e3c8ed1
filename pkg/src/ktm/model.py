"""Decoder-only causal transformer with LoRA adapters.

The model consumes *embedding vectors*, not token ids: compressed slots have
no id, so callers embed original tokens with :func:`embed_tokens` and splice
them together with encoder outputs before calling :func:`forward_lm`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, ShapeError, VocabularyError
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 512
    dropout_p: float = 0.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ContractError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("embed_dim", "n_layers", "n_heads", "max_seq_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.embed_dim % self.n_heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)


# Sublayers that carry a LoRA adapter, per layer.
LORA_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @property
    def emb(self) -> Tensor:
        return self.tensors["tok_emb"]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self, prefix: str = "model.") -> dict:
        return {prefix + k: v for k, v in self.tensors.items()}


@dataclass
class LoRAAdapter:
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    rank: int
    alpha: float
    dropout_p: float
    target: str

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    d, V, L = config.embed_dim, config.vocab_size, config.n_layers
    hidden = config.mlp_ratio * d
    std = 0.02
    proj_std = std / math.sqrt(2 * L)

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dtype))

    def const(shape, v):
        return Tensor(np.full(shape, v, dtype=dtype))

    t = {
        "tok_emb": normal((V, d), std),
        "pos_emb": normal((config.max_seq_len, d), std),
    }
    for i in range(L):
        p = f"layers.{i}."
        t[p + "ln1.g"], t[p + "ln1.b"] = const(d, 1.0), const(d, 0.0)
        for name in ("q", "k", "v"):
            t[p + f"attn.{name}.w"] = normal((d, d), std)
            t[p + f"attn.{name}.b"] = const(d, 0.0)
        t[p + "attn.o.w"], t[p + "attn.o.b"] = normal((d, d), proj_std), const(d, 0.0)
        t[p + "ln2.g"], t[p + "ln2.b"] = const(d, 1.0), const(d, 0.0)
        t[p + "mlp.fc1.w"], t[p + "mlp.fc1.b"] = normal((d, hidden), std), const(hidden, 0.0)
        t[p + "mlp.fc2.w"], t[p + "mlp.fc2.b"] = normal((hidden, d), proj_std), const(d, 0.0)
    t["ln_f.g"], t["ln_f.b"] = const(d, 1.0), const(d, 0.0)
    t["unembed.w"] = normal((d, V), std)
    return ModelParams(config, t)


def attach_lora(
    params: ModelParams,
    rng: np.random.Generator,
    rank: int = 4,
    alpha: float = 16.0,
    dropout_p: float = 0.05,
) -> dict:
    """One adapter per attention projection and MLP matrix in every layer.

    ``B`` starts at zero so the adapted map equals the base map exactly.
    """
    if rank < 1 or alpha <= 0:
        raise ContractError("LoRA rank must be >= 1 and alpha > 0")
    adapters = {}
    for i in range(params.config.n_layers):
        for tgt in LORA_TARGETS:
            name = f"layers.{i}.{tgt}"
            d_in, d_out = params[name + ".w"].shape
            dtype = params[name + ".w"].dtype
            A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in)).astype(dtype))
            B = Tensor(np.zeros((d_out, rank), dtype=dtype))
            adapters[name] = LoRAAdapter(A, B, rank, float(alpha), float(dropout_p), name)
    return adapters


def lora_named(adapters: dict) -> dict:
    out = {}
    for name, ad in adapters.items():
        out[f"lora.{name}.A"] = ad.A
        out[f"lora.{name}.B"] = ad.B
    return out


def embed_tokens(params: ModelParams, tokens) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)
    V = params.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise VocabularyError(f"token id {bad} outside vocabulary [0, {V})")
    if ids.size == 0:
        return Tensor(np.zeros(ids.shape + (params.config.embed_dim,), dtype=params.emb.dtype))
    return T.embedding(params.emb, ids)


def _linear(x: Tensor, name: str, params: ModelParams, adapters: dict | None,
            train_mode: bool, rng) -> Tensor:
    y = x @ params[name + ".w"] + params[name + ".b"]
    ad = adapters.get(name) if adapters else None
    if ad is not None:
        h = T.dropout(x, ad.dropout_p, rng, train=train_mode)
        y = y + ((h @ ad.A.T) @ ad.B.T) * ad.scale
    return y


class KVCache:
    """Per-layer key/value tensors for incremental decoding (no-grad only)."""

    def __init__(self, n_layers: int):
        self.keys: list = [None] * n_layers
        self.values: list = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def extend(self, layer: int, k: Tensor, v: Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = T.concat([self.keys[layer], k], axis=2)
            self.values[layer] = T.concat([self.values[layer], v], axis=2)
        return self.keys[layer], self.values[layer]


def forward_lm(
    params: ModelParams,
    adapters: dict | None,
    inputs: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    cache: KVCache | None = None,
) -> Tensor:
    """Logits for every input position.

    ``inputs`` is ``(T, d)`` or ``(B, T, d)``; the result is ``(T, V)`` or
    ``(B, T, V)``. With ``cache`` the inputs continue the cached sequence.
    """
    cfg = params.config
    squeeze = inputs.ndim == 2
    if squeeze:
        inputs = inputs.reshape(1, *inputs.shape)
    if inputs.ndim != 3 or inputs.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"forward_lm: inputs shape {inputs.shape} vs embed_dim {(cfg.embed_dim,)}")
    B, Tn, d = inputs.shape
    start = cache.length if cache is not None else 0
    if start + Tn > cfg.max_seq_len:
        raise CapacityError(f"sequence length {start + Tn} exceeds max_seq_len {cfg.max_seq_len}")
    if Tn == 0:
        raise ContractError("forward_lm: empty input sequence")
    H = cfg.n_heads
    dh = d // H
    drop = cfg.dropout_p if train_mode else 0.0

    x = inputs + params["pos_emb"][start:start + Tn]
    x = T.dropout(x, drop, rng, train=train_mode)
    S = start + Tn
    causal = np.tril(np.ones((S, S), dtype=bool))[start:S]
    inv = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])

        def heads(t):
            return t.reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)

        q = heads(_linear(h, p + "attn.q", params, adapters, train_mode, rng))
        k = heads(_linear(h, p + "attn.k", params, adapters, train_mode, rng))
        v = heads(_linear(h, p + "attn.v", params, adapters, train_mode, rng))
        if cache is not None:
            k, v = cache.extend(i, k, v)
        att = T.softmax((q @ k.T) * inv, mask=causal)
        att = T.dropout(att, drop, rng, train=train_mode)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tn, d)
        x = x + T.dropout(_linear(o, p + "attn.o", params, adapters, train_mode, rng), drop, rng, train_mode)
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = T.gelu(_linear(h, p + "mlp.fc1", params, adapters, train_mode, rng))
        x = x + T.dropout(_linear(h, p + "mlp.fc2", params, adapters, train_mode, rng), drop, rng, train_mode)
    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = x @ params["unembed.w"]
    if squeeze:
        logits = logits.reshape(Tn, cfg.vocab_size)
    return logits


def trainable_parameters(params: ModelParams, adapters: dict, encoder=None,
                         full_finetune: bool = False) -> dict:
    """Name -> tensor for everything the optimizer may update."""
    out = {}
    if full_finetune:
        out.update(params.named())
    out.update(lora_named(adapters or {}))
    if encoder is not None:
        out.update(encoder.named())
    return out


def set_trainable(all_tensors: dict, trainable: dict) -> None:
    """Flip ``requires_grad`` so only ``trainable`` members record gradients."""
    keep = {id(t) for t in trainable.values()}
    for t in all_tensors.values():
        t.requires_grad = id(t) in keep
        t.grad = None
