"""Masked-NLL training of LoRA adapters and the merge encoder."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Tokenizer, gen_tree_dataset
from .encoder import MergeEncoder
from .errors import ContractError, DivergedError, NumericDomainError, StalledCurriculumError
from .infer import TrainBatch, batch_inputs, classify_batch, make_batch
from .model import ModelParams, attach_lora, forward_lm, lora_named, set_trainable, trainable_parameters
from .tensor import Tensor

log = logging.getLogger(__name__)


def masked_nll(logits: Tensor, targets, loss_mask, n_compressed=None) -> Tensor:
    """Sum of ``-log p(target)`` over masked positions, averaged over the batch.

    ``logits`` is ``(B, T, V)`` (or ``(T, V)`` for one sequence) where
    position ``t`` predicts slot ``t + 1``. ``n_compressed`` (per sample)
    enables the check that no compressed slot is used as a target.
    """
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets, loss_mask = targets[None], loss_mask[None]
    if targets.shape != logits.shape[:2] or loss_mask.shape != targets.shape:
        raise ContractError(
            f"masked_nll: logits {logits.shape}, targets {targets.shape}, mask {loss_mask.shape}"
        )
    if n_compressed is not None:
        n_compressed = np.broadcast_to(np.asarray(n_compressed), (targets.shape[0],))
        predicted = np.arange(targets.shape[1])[None, :] + 1
        if np.any(loss_mask & (predicted < n_compressed[:, None])):
            raise ContractError("uncompressed index set references a compressed slot")
    safe_targets = np.where(loss_mask, targets, 0)
    nll = T.cross_entropy(logits, safe_targets)
    per_sample = T.sum_(T.where_mask(nll, loss_mask), axis=1)
    return T.mean(per_sample, axis=0)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def named_buffers(self) -> dict:
        out = {}
        for k, a in self.m.items():
            out[f"optim.m.{k}"] = a
        for k, a in self.v.items():
            out[f"optim.v.{k}"] = a
        return out


def adamw_update(params: dict, opt: OptimState, grad_clip: float | None = None) -> None:
    """One AdamW step with decoupled weight decay. Moments update even at lr=0."""
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    if grad_clip:
        total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if total > grad_clip:
            grads = {n: g * (grad_clip / total) for n, g in grads.items()}
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        g = grads[name]
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if opt.lr == 0.0:
            continue
        new = p.data * (1.0 - opt.lr * opt.weight_decay)
        new = new - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.assign_(new)


# -- trainer -------------------------------------------------------------------

@dataclass
class TrainRow:
    step: int
    epoch: int
    stage: int
    loss: float
    val_accuracy: float
    seed: int


LOG_COLUMNS = ("step", "epoch", "stage", "loss", "val_accuracy", "seed")


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.step, r.epoch, r.stage, f"{r.loss:.6f}", f"{r.val_accuracy:.6f}", r.seed])


class Trainer:
    """Owns the mutable training state for one seed.

    ``encoder=None`` trains on uncompressed prompts (the baseline and the
    base-model pretraining phase).
    """

    def __init__(self, params: ModelParams, adapters: dict, encoder: MergeEncoder | None,
                 tokenizer: Tokenizer, seed: int = 0, lr: float = 1e-4, weight_decay: float = 0.01,
                 batch_size: int = 32, full_finetune: bool = False, grad_clip: float | None = 1.0,
                 lm_all: bool = False):
        self.params = params
        self.adapters = adapters
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.seed = seed
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.lm_all = lm_all
        self.full_finetune = full_finetune
        self.opt = OptimState(lr=lr, weight_decay=weight_decay)
        self.trainable = trainable_parameters(params, adapters, encoder, full_finetune)
        set_trainable(self.all_tensors(), self.trainable)
        self.epoch = 0
        self.rows: list = []

    @property
    def k(self):
        return None if self.encoder is None else self.encoder.k

    @property
    def label_tokens(self) -> list:
        return [self.tokenizer.true_id, self.tokenizer.false_id]

    def all_tensors(self) -> dict:
        out = dict(self.params.named())
        out.update(lora_named(self.adapters or {}))
        if self.encoder is not None:
            out.update(self.encoder.named())
        return out

    def batch(self, records) -> TrainBatch:
        tok = self.tokenizer
        prompts = [tok.encode(r.prompt) for r in records]
        targets = [tok.target_ids(r) for r in records]
        labels = [tok.label_ids.get(r.completion) for r in records]
        return make_batch(prompts, targets, self.k, tok.pad_id, lm_all=self.lm_all, labels=labels)

    def loss(self, batch: TrainBatch, train_mode: bool = True) -> Tensor:
        rng = np.random.default_rng([self.seed, self.opt.step, 11])
        inputs = batch_inputs(batch, self.params, self.encoder)
        logits = forward_lm(self.params, self.adapters, inputs, train_mode=train_mode, rng=rng)
        return masked_nll(logits, batch.targets, batch.loss_mask, batch.n_compressed)

    def step(self, batch: TrainBatch) -> float:
        return train_step(self, batch)

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 7]).permutation(n)

    def run_epoch(self, records: list, epoch: int | None = None, start_batch: int = 0,
                  max_batches: int | None = None) -> float:
        """Train one pass over ``records``; returns mean loss over the batches run."""
        epoch = self.epoch if epoch is None else epoch
        order = self.epoch_order(len(records), epoch)
        bs = self.batch_size
        starts = list(range(0, len(records), bs))[start_batch:]
        if max_batches is not None:
            starts = starts[:max_batches]
        losses = [self.step(self.batch([records[i] for i in order[s:s + bs]])) for s in starts]
        return float(np.mean(losses)) if losses else float("nan")

    def accuracy(self, records: list, batch_size: int = 256) -> float:
        correct = 0
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            b = self.batch(chunk)
            preds = classify_batch(b, self.params, self.adapters, self.encoder, self.label_tokens)
            correct += int(np.sum(preds == np.array(b.labels)))
        return correct / len(records)

    def nll_totals(self, records: list, batch_size: int = 128) -> tuple:
        """(summed NLL over completion targets, target count) without gradients."""
        total, count = 0.0, 0
        with T.no_grad():
            for s in range(0, len(records), batch_size):
                b = self.batch(records[s:s + batch_size])
                total += self.loss(b, train_mode=False).item() * b.size
                count += int(b.loss_mask.sum())
        return total, count


def train_step(trainer: Trainer, batch: TrainBatch) -> float:
    """Forward, backward and AdamW update; returns the pre-update loss."""
    for p in trainer.trainable.values():
        p.grad = None
    try:
        loss = trainer.loss(batch, train_mode=True)
    except NumericDomainError as exc:
        raise DivergedError(trainer.opt.step, float("nan")) from exc
    value = loss.item()
    if not math.isfinite(value):
        raise DivergedError(trainer.opt.step, value)
    loss.backward()
    adamw_update(trainer.trainable, trainer.opt, trainer.grad_clip)
    return value


# -- curriculum ----------------------------------------------------------------

@dataclass
class Stage:
    n_nodes: tuple  # inclusive (lo, hi)
    threshold: float = 0.97
    max_epochs: int = 20
    n_train: int = 2048
    n_val: int = 512

    def __post_init__(self):
        if isinstance(self.n_nodes, int):
            self.n_nodes = (self.n_nodes, self.n_nodes)
        self.n_nodes = tuple(self.n_nodes)
        if not 0.0 < self.threshold <= 1.0:
            raise ContractError(f"threshold must be in (0, 1], got {self.threshold}")


@dataclass
class CurriculumSchedule:
    stages: list
    current: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ContractError("curriculum needs at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.n_nodes[0] <= a.n_nodes[1]:
                raise ContractError("curriculum stages must strictly increase in tree size")

    def should_advance(self, val_accuracy: float) -> bool:
        return val_accuracy >= self.stages[self.current].threshold


def stage_data(stage: Stage, index: int, seed: int) -> tuple:
    train = gen_tree_dataset(stage.n_train, stage.n_nodes, seed=seed * 1000 + 2 * index)
    val = gen_tree_dataset(stage.n_val, stage.n_nodes, seed=seed * 1000 + 2 * index + 1 + 500)
    return train, val


def run_curriculum(schedule: CurriculumSchedule, trainer: Trainer, data_seed: int | None = None,
                   on_epoch=None, stop_at_threshold: bool = True) -> list:
    """Train stage by stage; a stage ends once val accuracy reaches its threshold.

    Returns the per-epoch log rows. Raises :class:`StalledCurriculumError`
    when a stage exhausts ``max_epochs``. ``on_epoch(trainer, row)`` runs
    after every epoch (checkpointing hooks).
    """
    data_seed = trainer.seed if data_seed is None else data_seed
    while schedule.current < len(schedule.stages):
        si = schedule.current
        stage = schedule.stages[si]
        train, val = stage_data(stage, si, data_seed)
        # epochs already spent in this stage (a resumed run) count against its budget
        done = [r.val_accuracy for r in trainer.rows if r.stage == si]
        best = max(done, default=0.0)
        if stop_at_threshold and done and schedule.should_advance(done[-1]):
            schedule.current += 1
            continue
        for _ in range(stage.max_epochs - len(done)):
            loss = trainer.run_epoch(train)
            trainer.epoch += 1
            acc = trainer.accuracy(val)
            best = max(best, acc)
            row = TrainRow(trainer.opt.step, trainer.epoch, si, loss, acc, trainer.seed)
            trainer.rows.append(row)
            log.info("seed %d stage %d epoch %d loss %.4f val_acc %.4f",
                     trainer.seed, si, trainer.epoch, loss, acc)
            if on_epoch is not None:
                on_epoch(trainer, row)
            if stop_at_threshold and schedule.should_advance(acc):
                break
        else:
            if not (best >= stage.threshold and not stop_at_threshold):
                raise StalledCurriculumError(si, stage.max_epochs, best, stage.threshold, trainer.rows)
        schedule.current += 1
    return trainer.rows


# -- base pretraining and the initialization ablation -------------------------

def pretrain_base(params: ModelParams, tokenizer: Tokenizer, records: list, epochs: int,
                  seed: int = 0, lr: float = 1e-3, batch_size: int = 32, lm_all: bool = True,
                  final_lr_fraction: float = 0.1, on_epoch=None) -> Trainer:
    """Full-parameter training on uncompressed records.

    Stands in for the pretrained LLM that the adapters are fitted on. The
    learning rate decays linearly per epoch down to ``final_lr_fraction * lr``.
    """
    trainer = Trainer(params, {}, None, tokenizer, seed=seed, lr=lr, batch_size=batch_size,
                      full_finetune=True, lm_all=lm_all)
    for e in range(epochs):
        frac = e / max(1, epochs - 1)
        trainer.opt.lr = lr * (1.0 - (1.0 - final_lr_fraction) * frac)
        loss = trainer.run_epoch(records)
        trainer.epoch += 1
        if on_epoch is not None:
            on_epoch(trainer, loss)
    set_trainable(trainer.all_tensors(), {})
    return trainer


@dataclass
class AblationResult:
    strategy: str
    seed: int
    epochs: int
    reached: bool
    log: list
    trainer: Trainer | None = field(default=None, repr=False)

    @property
    def sort_key(self) -> float:
        """Epochs to target; a run that never got there ranks after every run that did."""
        return float(self.epochs) if self.reached else math.inf


def ablation_init(base: ModelParams, tokenizer: Tokenizer, strategy: str, seeds,
                  k: int = 4, n_nodes: int = 5, target: float = 0.97, max_epochs: int = 20,
                  lr: float = 1e-4, n_train: int = 2048, n_val: int = 512, batch_size: int = 8,
                  lora_rank: int = 4, lora_alpha: float = 16.0, lora_dropout: float = 0.05,
                  keep_mean: bool | None = None, keep_trainers: bool = False) -> list:
    """Epochs until val accuracy first reaches ``target`` for each seed.

    A run that never gets there is recorded with ``epochs=max_epochs`` and
    ``reached=False``. ``keep_trainers`` attaches each final trainer.
    """
    results = []
    for seed in seeds:
        params = clone_params(base)
        rng = np.random.default_rng([seed, 1])
        adapters = attach_lora(params, rng, lora_rank, lora_alpha, lora_dropout)
        enc = MergeEncoder(k, params.config.embed_dim, rng, strategy=strategy, keep_mean=keep_mean,
                           dtype=params.emb.dtype)
        trainer = Trainer(params, adapters, enc, tokenizer, seed=seed, lr=lr, batch_size=batch_size)
        stage = Stage((n_nodes, n_nodes), threshold=target, max_epochs=max_epochs,
                      n_train=n_train, n_val=n_val)
        try:
            rows = run_curriculum(CurriculumSchedule([stage]), trainer)
            res = AblationResult(strategy, seed, rows[-1].epoch, True, rows)
        except StalledCurriculumError as exc:
            res = AblationResult(strategy, seed, max_epochs, False, exc.log)
        if keep_trainers:
            res.trainer = trainer
        results.append(res)
    return results


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams(params.config, {k: Tensor(v.data.copy()) for k, v in params.tensors.items()})
