"""Saving and restoring models and trainers through the checkpoint container."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .encoder import MergeEncoder
from .errors import CheckpointError
from .model import LoRAAdapter, ModelConfig, ModelParams, lora_named
from .tensor import Tensor
from .train import OptimState, Trainer, TrainRow


@dataclass
class Bundle:
    """Everything needed to run (or keep training) a model."""

    params: ModelParams
    adapters: dict
    encoder: MergeEncoder | None
    header: dict
    opt: OptimState | None = None

    @property
    def run_config(self) -> dict:
        return self.header.get("run_config", {})

    @property
    def k(self):
        return None if self.encoder is None else self.encoder.k


def bundle_tensors(params, adapters, encoder, opt: OptimState | None = None) -> dict:
    named = dict(params.named())
    named.update(lora_named(adapters or {}))
    if encoder is not None:
        named.update(encoder.named())
    out = {k: v.data for k, v in named.items()}
    if opt is not None:
        out.update(opt.named_buffers())
    return out


def bundle_header(params, adapters, encoder, run_config: dict | None = None,
                  opt: OptimState | None = None, trainer: dict | None = None) -> dict:
    lora = None
    if adapters:
        ad = next(iter(adapters.values()))
        lora = {"rank": ad.rank, "alpha": ad.alpha, "dropout": ad.dropout_p,
                "targets": sorted(adapters)}
    header = {
        "model": params.config.to_dict(),
        "dtype": str(params.emb.dtype),
        "encoder": None if encoder is None else encoder.config(),
        "lora": lora,
        "run_config": run_config or {},
    }
    if opt is not None:
        header["optim"] = {"lr": opt.lr, "weight_decay": opt.weight_decay,
                           "betas": list(opt.betas), "eps": opt.eps, "step": opt.step}
    if trainer is not None:
        header["trainer"] = trainer
    return header


def save_bundle(path, params, adapters, encoder, run_config=None, opt=None, trainer=None) -> None:
    checkpoint.save(path, bundle_header(params, adapters, encoder, run_config, opt, trainer),
                    bundle_tensors(params, adapters, encoder, opt))


def save_trainer(path, trainer: Trainer, run_config: dict | None = None, extra: dict | None = None) -> None:
    info = {
        "seed": trainer.seed,
        "epoch": trainer.epoch,
        "batch_size": trainer.batch_size,
        "grad_clip": trainer.grad_clip,
        "full_finetune": trainer.full_finetune,
        "lm_all": trainer.lm_all,
        "rows": [asdict(r) for r in trainer.rows],
    }
    info.update(extra or {})
    save_bundle(path, trainer.params, trainer.adapters, trainer.encoder, run_config,
                trainer.opt, info)


def bundle_from(header: dict, tensors: dict) -> Bundle:
    try:
        cfg = ModelConfig(**header["model"])
        dtype = np.dtype(header.get("dtype", "float32"))
        params = ModelParams(cfg, {
            k[len("model."):]: Tensor(v.astype(dtype, copy=False))
            for k, v in tensors.items() if k.startswith("model.")
        })
        adapters = {}
        lora = header.get("lora")
        if lora:
            for tgt in lora["targets"]:
                adapters[tgt] = LoRAAdapter(Tensor(tensors[f"lora.{tgt}.A"]), Tensor(tensors[f"lora.{tgt}.B"]),
                                            lora["rank"], lora["alpha"], lora["dropout"], tgt)
        encoder = None
        ec = header.get("encoder")
        if ec:
            encoder = MergeEncoder(ec["k"], cfg.embed_dim, np.random.default_rng(0), hidden=ec["hidden"],
                                   strategy=ec["strategy"], keep_mean=ec["keep_mean"], dtype=dtype)
            for name, t in encoder.named().items():
                t.assign_(tensors[name])
        opt = None
        oh = header.get("optim")
        if oh:
            opt = OptimState(lr=oh["lr"], weight_decay=oh["weight_decay"], betas=tuple(oh["betas"]),
                             eps=oh["eps"], step=oh["step"])
            for key, arr in tensors.items():
                if key.startswith("optim.m."):
                    opt.m[key[len("optim.m."):]] = arr
                elif key.startswith("optim.v."):
                    opt.v[key[len("optim.v."):]] = arr
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from exc
    return Bundle(params, adapters, encoder, header, opt)


def load_bundle(path) -> Bundle:
    return bundle_from(*checkpoint.load(path))


def restore_trainer(bundle: Bundle, tokenizer, lr: float | None = None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint stopped."""
    info = bundle.header.get("trainer")
    if info is None or bundle.opt is None:
        raise CheckpointError("checkpoint holds no trainer state")
    opt = bundle.opt
    trainer = Trainer(bundle.params, bundle.adapters, bundle.encoder, tokenizer, seed=info["seed"],
                      lr=opt.lr if lr is None else lr, weight_decay=opt.weight_decay,
                      batch_size=info["batch_size"], full_finetune=info["full_finetune"],
                      grad_clip=info["grad_clip"], lm_all=info["lm_all"])
    trainer.opt = opt
    trainer.epoch = info["epoch"]
    trainer.rows = [TrainRow(**r) for r in info["rows"]]
    return trainer
