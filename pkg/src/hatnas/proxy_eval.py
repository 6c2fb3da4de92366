"""Does inherited-weight validation loss rank SubTransformers like from-scratch training does?"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .design_space import ArchConfig, DesignSpace, ValidationError, sample_uniform
from .supernet import ModelWeights, count_params
from .task_data import Corpus
from .trainer import TrainConfig, train_from_scratch, validate


def kendall_tau_b(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Kendall rank correlation with the tau-b tie correction."""
    if len(xs) != len(ys):
        raise ValidationError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) == 0:
        raise ValidationError("kendall_tau_b of empty sequences")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    i, j = np.triu_indices(len(x), k=1)
    dx = np.sign(x[i] - x[j])
    dy = np.sign(y[i] - y[j])
    s = float(np.sum(dx * dy))
    n_x = float(np.count_nonzero(dx))       # pairs not tied in x
    n_y = float(np.count_nonzero(dy))
    if n_x == 0 or n_y == 0:
        return float("nan")
    return s / np.sqrt(n_x * n_y)


@dataclass
class ProxyEntry:
    arch: ArchConfig
    params: int
    inherited_val_loss: float
    scratch_val_loss: float
    scratch_token_acc: float


@dataclass
class ProxyReport:
    entries: list[ProxyEntry] = field(default_factory=list)
    tau: float = float("nan")

    def to_dict(self) -> dict:
        return {"tau": self.tau,
                "entries": [{**asdict(e), "arch": e.arch.to_dict()} for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyReport":
        entries = [ProxyEntry(**{**e, "arch": ArchConfig.from_dict(e["arch"])}) for e in d["entries"]]
        return cls(entries, d["tau"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ProxyReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def spanning_archs(space: DesignSpace, n: int, seed: int, pool: int = 200) -> list[ArchConfig]:
    """Smallest, largest, and evenly spaced size quantiles of a uniform sample pool."""
    if n < 2:
        raise ValidationError("need at least two architectures")
    rng = np.random.default_rng(seed)
    cands = [sample_uniform(space, rng) for _ in range(pool)]
    cands.sort(key=lambda a: (count_params(space, a), a.genes()))
    picks = [space.smallest()]
    for q in np.linspace(0, 1, n)[1:-1]:
        picks.append(cands[int(round(q * (pool - 1)))])
    picks.append(space.largest())
    return picks


ScratchFn = Callable[[ArchConfig], dict]


def run_proxy_study(weights: ModelWeights, space: DesignSpace, corpus: Corpus, n_archs: int = 5,
                    scratch_cfg: TrainConfig | None = None, seed: int = 0,
                    scratch: ScratchFn | None = None, log=None) -> ProxyReport:
    """``scratch`` maps an arch to metrics with ``val_loss`` and ``test_token_acc`` (defaults to training)."""
    cfg = scratch_cfg or TrainConfig(seed=seed)
    if scratch is None:
        def scratch(arch):
            return train_from_scratch(space, arch, corpus, cfg).metrics
    report = ProxyReport()
    for arch in spanning_archs(space, n_archs, seed):
        inherited = validate(weights, arch, corpus.valid)
        m = scratch(arch)
        entry = ProxyEntry(arch, count_params(space, arch), inherited, float(m["val_loss"]),
                           float(m.get("test_token_acc", float("nan"))))
        report.entries.append(entry)
        if log is not None:
            log({"params": entry.params, "inherited_val_loss": inherited,
                 "scratch_val_loss": entry.scratch_val_loss})
    report.tau = kendall_tau_b([e.inherited_val_loss for e in report.entries],
                               [e.scratch_val_loss for e in report.entries])
    return report
