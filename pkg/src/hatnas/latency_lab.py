"""Host latency measurement and the (architecture, latency) dataset."""
from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .container import ArtifactError
from .design_space import ArchConfig, DesignSpace, ValidationError, encode_features, sample_uniform
from .supernet import EOS, ModelWeights, extract_sub
from .task_data import greedy_decode_batch

DATASET_MAGIC = "HATLAT"
DATASET_VERSION = 1
SPLITS = ("train", "valid", "test")


def robust_mean(values: Sequence[float], trim: float = 0.1) -> float:
    """Sort, drop floor(trim * n) samples from each end, average the rest."""
    if len(values) == 0:
        raise ValidationError("robust_mean of an empty sample")
    if not 0.0 <= trim < 0.5:
        raise ValidationError("trim must be in [0, 0.5)")
    v = np.sort(np.asarray(values, dtype=np.float64))
    cut = int(math.floor(trim * len(v)))
    return float(v[cut:len(v) - cut].mean())


def time_runs(fn: Callable[[], object], n: int, warmup: int = 20,
              clock: Callable[[], float] = time.perf_counter) -> list[float]:
    """Wall-clock milliseconds of ``n`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(n):
        t0 = clock()
        fn()
        out.append((clock() - t0) * 1e3)
    return out


@dataclass
class Measurement:
    latency_ms: float
    n_runs: int
    coarse_timer: bool
    samples: list[float] = field(default_factory=list, repr=False)


def timer_resolution_ms() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e3


def _decode_fn(weights: ModelWeights, arch: ArchConfig, src_len: int, tgt_len: int) -> Callable[[], object]:
    sub = extract_sub(weights, arch)
    src = [EOS + 1] * (src_len - 1) + [EOS]
    return lambda: greedy_decode_batch(sub, sub.arch, [src], max_len=tgt_len, stop_at_eos=False)


def measure_block(weights: ModelWeights, archs: Sequence[ArchConfig], src_len: int = 16, tgt_len: int = 16,
                  n: int = 300, trim: float = 0.1, warmup: int = 20,
                  clock: Callable[[], float] | None = None) -> list[Measurement]:
    """Time several archs round-robin: each pass runs every arch once.

    Every arch still gets ``warmup`` discarded runs and ``n`` timed ones, but
    its samples are spread over the whole block, so a slow phase of the host
    lands on all archs alike instead of on whichever was being timed.  All
    extracted SubTransformers are held in memory at once.
    """
    clock = clock or time.perf_counter
    fns = [_decode_fn(weights, a, src_len, tgt_len) for a in archs]
    samples: list[list[float]] = [[] for _ in fns]
    with threadpool_limits(limits=1):
        for fn in fns:
            for _ in range(warmup):
                fn()
        for _ in range(n):
            for fn, out in zip(fns, samples):
                t0 = clock()
                fn()
                out.append((clock() - t0) * 1e3)
    coarse_res = timer_resolution_ms()
    result = []
    for s in samples:
        value = robust_mean(s, trim)
        result.append(Measurement(value, n, clock is time.perf_counter and coarse_res > 0.01 * value, s))
    return result


def measure_latency(weights: ModelWeights, arch: ArchConfig, src_len: int = 16, tgt_len: int = 16,
                    n: int = 300, trim: float = 0.1, warmup: int = 20,
                    clock: Callable[[], float] | None = None) -> Measurement:
    """Time a fixed-length greedy decode of the extracted SubTransformer.

    The source is a constant token sequence; the decoder runs exactly
    ``tgt_len`` steps regardless of what it emits.
    """
    return measure_block(weights, [arch], src_len, tgt_len, n, trim, warmup, clock)[0]


@dataclass
class LatencyRecord:
    arch: ArchConfig
    features: list[float]
    latency_ms: float
    n_runs: int
    host: str
    split: str = "train"
    coarse_timer: bool = False

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValidationError(f"latency must be positive, got {self.latency_ms}")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "features": [float(x) for x in self.features],
                "latency_ms": self.latency_ms, "n_runs": self.n_runs, "host": self.host,
                "split": self.split, "coarse_timer": self.coarse_timer}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyRecord":
        arch = ArchConfig.from_dict(d["arch"])
        feats = [float(x) for x in d["features"]]
        if not np.array_equal(encode_features(arch), feats):
            raise ValidationError("record features do not match its architecture")
        return cls(arch, feats, float(d["latency_ms"]), int(d["n_runs"]), d["host"], d["split"],
                   bool(d.get("coarse_timer", False)))


@dataclass
class LatencyDataset:
    records: list[LatencyRecord]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[LatencyRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        recs = self.split(name)
        x = np.array([r.features for r in recs], dtype=np.float64).reshape(len(recs), -1)
        y = np.array([r.latency_ms for r in recs], dtype=np.float64)
        return x, y

    def save(self, path: str | Path) -> None:
        head = {"magic": DATASET_MAGIC, "version": DATASET_VERSION, **self.meta}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LatencyDataset":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
            head = json.loads(lines[0]) if lines else {}
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"{path}: cannot read latency dataset ({exc}); "
                                f"expected {DATASET_MAGIC} version {DATASET_VERSION}") from None
        if head.get("magic") != DATASET_MAGIC or head.get("version") != DATASET_VERSION:
            raise ArtifactError(f"{path}: expected magic {DATASET_MAGIC} version {DATASET_VERSION}")
        meta = {k: v for k, v in head.items() if k not in ("magic", "version")}
        return cls([LatencyRecord.from_dict(json.loads(line)) for line in lines[1:] if line], meta)


def split_labels(n: int, rng: np.random.Generator) -> list[str]:
    """8:1:1 split assigned by a shuffled index."""
    n_valid = n_test = n // 10
    labels = ["train"] * (n - n_valid - n_test) + ["valid"] * n_valid + ["test"] * n_test
    order = rng.permutation(n)
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = labels[rank]
    return out


def host_tag() -> str:
    return f"{platform.node()}/{platform.machine()}/{platform.python_implementation()}"


def collect_dataset(weights: ModelWeights, space: DesignSpace, n_samples: int = 2000, seed: int = 0,
                    src_len: int = 16, tgt_len: int = 16, n_runs: int = 300, trim: float = 0.1,
                    warmup: int = 20, host: str | None = None, block: int = 1,
                    progress: Callable[[int, LatencyRecord], None] | None = None) -> LatencyDataset:
    """Measure ``n_samples`` uniformly sampled SubTransformers.

    The architecture list and split assignment depend only on ``seed``.
    ``block`` archs at a time are timed round-robin (see ``measure_block``).
    """
    if block < 1:
        raise ValidationError("block must be >= 1")
    rng = np.random.default_rng(seed)
    archs = [sample_uniform(space, rng) for _ in range(n_samples)]
    labels = split_labels(n_samples, rng)
    host = host or host_tag()
    records = []
    for start in range(0, n_samples, block):
        chunk = archs[start:start + block]
        for arch, m in zip(chunk, measure_block(weights, chunk, src_len, tgt_len, n_runs, trim, warmup)):
            i = len(records)
            rec = LatencyRecord(arch, encode_features(arch).tolist(), m.latency_ms, n_runs, host, labels[i],
                                m.coarse_timer)
            records.append(rec)
            if progress is not None:
                progress(i, rec)
    meta = {"seed": seed, "src_len": src_len, "tgt_len": tgt_len, "n_runs": n_runs, "trim": trim,
            "warmup": warmup, "block": block, "space": space.to_dict()}
    return LatencyDataset(records, meta)
