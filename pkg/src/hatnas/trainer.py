"""Training loops: sampled supernet training, standalone SubTransformers, finetuning, distillation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .design_space import ArchConfig, DesignSpace, ValidationError, sample_uniform
from .numerics import AdamState, Tensor
from .supernet import PAD, ModelWeights, extract_sub, forward, init_sub, slice_view
from .task_data import Corpus, Pair, eval_batches, iterate_batches


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 8000
    warmup_steps: int = 400
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    schedule: str = "cosine"
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 0
    label_smoothing: float = 0.1
    val_every: int = 1000
    val_limit: int | None = None

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")
        if self.total_steps and not 0 <= self.warmup_steps < self.total_steps:
            raise ValidationError("warmup_steps must be < total_steps")
        if self.lr_min > self.lr_max:
            raise ValidationError("lr_min must be <= lr_max")
        if not 0 <= self.label_smoothing < 1:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if self.schedule not in ("cosine", "inv_sqrt"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_min to lr_max, then cosine or inverse-sqrt decay."""
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * step / cfg.warmup_steps
    if cfg.schedule == "inv_sqrt":
        return cfg.lr_max * math.sqrt(max(cfg.warmup_steps, 1) / max(step, 1))
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    weights: ModelWeights
    trace: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def write_trace(self, path: str | Path) -> None:
        write_trace_csv(path, self.trace)


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss", "val_loss"])
        for row in trace:
            val = row.get("val_loss")
            w.writerow([row["step"], repr(row["lr"]), repr(row["train_loss"]),
                        "" if val is None else repr(val)])


def validate(weights: ModelWeights, arch: ArchConfig, pairs: list[Pair], batch_size: int = 250,
             limit: int | None = None) -> float:
    """Mean teacher-forced token cross-entropy (no smoothing) over ``pairs``."""
    if limit is not None:
        pairs = pairs[:limit]
    view = slice_view(weights, arch)
    total = 0.0
    count = 0
    with nx.no_grad():
        for src, tin, tout in eval_batches(pairs, batch_size):
            logits = forward(weights, view.arch, src, tin)
            n = int((tout != PAD).sum())
            total += nx.cross_entropy(logits, tout).item() * n
            count += n
    return total / max(count, 1)


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray, gold: np.ndarray, k: int = 5,
            lam: float = 0.5, label_smoothing: float = 0.0) -> Tensor:
    """Top-k soft-label distillation mixed with the hard-label loss.

    The teacher's ``k`` most likely classes are kept and renormalized; the
    distillation term is the student's cross-entropy against that distribution.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("lambda must be in [0, 1]")
    v = teacher_logits.shape[-1]
    if not 1 <= k <= v:
        raise ValidationError(f"k={k} outside [1, {v}]")
    gold = np.asarray(gold).reshape(-1)
    z = teacher_logits - teacher_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    top = np.argsort(-p, axis=-1, kind="stable")[:, :k]
    rows = np.arange(p.shape[0])[:, None]
    q = np.zeros_like(p)
    q[rows, top] = p[rows, top]
    q /= q.sum(axis=-1, keepdims=True)
    valid = gold != PAD
    soft = nx.soft_cross_entropy(student_logits, q, valid)
    hard = nx.cross_entropy(student_logits, gold, label_smoothing=label_smoothing)
    return nx.add(nx.scale(soft, lam), nx.scale(hard, 1.0 - lam))


Teacher = tuple[ModelWeights, ArchConfig]


def _train_loop(weights: ModelWeights, pick_arch: Callable[[np.random.Generator], ArchConfig],
                corpus: Corpus, cfg: TrainConfig, teacher: Teacher | None = None,
                kd_lambda: float = 0.5, kd_k: int = 5, log: Callable[[dict], None] | None = None,
                eval_arch: ArchConfig | None = None) -> TrainResult:
    """Adam over front slices; weights are updated in place and returned.

    Batches and sampled architectures come from two independent streams
    derived from ``cfg.seed`` so a constant sampler leaves the batch order
    untouched.
    """
    batch_rng = np.random.default_rng([cfg.seed, 11])
    arch_rng = np.random.default_rng([cfg.seed, 12])
    batches = iterate_batches(corpus.train, cfg.batch_size, batch_rng)
    state = AdamState()
    trace = []
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        arch = pick_arch(arch_rng)
        view = slice_view(weights, arch)
        src, tin, tout = next(batches)
        P = {name: Tensor(weights.params[name], requires_grad=True) for name in view.extents}
        logits = forward(weights, view.arch, src, tin, P)
        if teacher is not None:
            with nx.no_grad():
                t_logits = forward(teacher[0], teacher[1], src, tin).data
            loss = kd_loss(logits, t_logits, tout, kd_k, kd_lambda, cfg.label_smoothing)
        else:
            loss = nx.cross_entropy(logits, tout, label_smoothing=cfg.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step} for {view.arch.to_json()}")
        loss.backward()
        grads = {name: t.grad for name, t in P.items() if t.grad is not None}
        lr = lr_at(step, cfg)
        nx.adam_step(weights.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps,
                     regions={name: view.extents[name] for name in grads})
        row = {"step": step, "lr": lr, "train_loss": value, "val_loss": None}
        last = step == cfg.total_steps - 1
        if eval_arch is not None and cfg.val_every and ((step + 1) % cfg.val_every == 0 or last):
            row["val_loss"] = validate(weights, eval_arch, corpus.valid, limit=cfg.val_limit)
        trace.append(row)
        if log is not None and (row["val_loss"] is not None or step % 100 == 0):
            log({**row, "elapsed_s": round(time.perf_counter() - t0, 1)})
    return TrainResult(weights, trace)


def train_supernet(weights: ModelWeights, space: DesignSpace, corpus: Corpus, cfg: TrainConfig,
                   log=None) -> TrainResult:
    """One uniformly sampled SubTransformer per step; only its slices move."""
    if weights.arch is not None:
        raise ValidationError("train_supernet expects SuperTransformer weights")
    result = _train_loop(weights, lambda rng: sample_uniform(space, rng), corpus, cfg, log=log,
                         eval_arch=space.largest())
    result.metrics["final_train_loss"] = result.trace[-1]["train_loss"] if result.trace else None
    return result


def _finish(result: TrainResult, arch: ArchConfig, corpus: Corpus, with_accuracy: bool) -> TrainResult:
    from .task_data import make_decoder, sequence_accuracy
    w = result.weights
    result.metrics["val_loss"] = validate(w, arch, corpus.valid)
    if with_accuracy:
        acc = sequence_accuracy(make_decoder(w, arch), corpus.test)
        result.metrics.update({f"test_{k}": v for k, v in acc.items()})
    return result


def train_from_scratch(space: DesignSpace, arch: ArchConfig, corpus: Corpus, cfg: TrainConfig,
                       teacher: Teacher | None = None, kd_lambda: float = 0.5, kd_k: int = 5,
                       with_accuracy: bool = True, log=None) -> TrainResult:
    arch = space.check(arch)
    weights = init_sub(space, arch, cfg.seed)
    result = _train_loop(weights, lambda rng: arch, corpus, cfg, teacher, kd_lambda, kd_k, log,
                         eval_arch=arch)
    return _finish(result, arch, corpus, with_accuracy)


def finetune_inherited(super_weights: ModelWeights, arch: ArchConfig, corpus: Corpus, cfg: TrainConfig,
                       with_accuracy: bool = True, log=None) -> TrainResult:
    weights = extract_sub(super_weights, arch)
    arch = weights.arch
    result = _train_loop(weights, lambda rng: arch, corpus, cfg, log=log, eval_arch=arch)
    return _finish(result, arch, corpus, with_accuracy)


def shorter(cfg: TrainConfig, factor: float = 0.25) -> TrainConfig:
    """Same schedule shape over ``factor`` of the steps."""
    steps = max(int(round(cfg.total_steps * factor)), 1)
    warm = min(int(round(cfg.warmup_steps * factor)), steps - 1)
    return replace(cfg, total_steps=steps, warmup_steps=warm)
