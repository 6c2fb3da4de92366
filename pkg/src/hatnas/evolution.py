"""Latency-constrained evolutionary search and a constrained random baseline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .design_space import ArchConfig, DesignSpace, ValidationError, crossover, encode_features, mutate, \
    sample_uniform
from .predictor import LatencyPredictor, predict
from .supernet import ModelWeights
from .task_data import Corpus
from .trainer import validate

MAX_PROBES = 10_000
MAX_RETRIES = 50
REPORT_VERSION = 1


class InfeasibleConstraint(RuntimeError):
    pass


@dataclass(frozen=True)
class EvoParams:
    latency_constraint_ms: float
    iterations: int = 30
    population: int = 125
    parents: int = 25
    mutation_size: int = 50
    mutation_prob: float = 0.3
    crossover_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.latency_constraint_ms > 0:
            raise ValidationError("latency constraint must be positive")
        if not 1 <= self.parents <= self.population:
            raise ValidationError("need 1 <= parents <= population")
        if self.parents + self.mutation_size + self.crossover_size != self.population:
            raise ValidationError("parents + mutation_size + crossover_size must equal population")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValidationError("mutation_prob must be in [0, 1]")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")

    @property
    def max_evaluations(self) -> int:
        return self.population + self.iterations * (self.mutation_size + self.crossover_size)


class Fitness:
    """Validation loss with inherited weights, memoized by active architecture."""

    def __init__(self, fn: Callable[[ArchConfig], float]):
        self.fn = fn
        self.cache: dict[tuple, float] = {}
        self.evaluations = 0

    def __call__(self, arch: ArchConfig) -> float:
        k = arch.key()
        if k not in self.cache:
            self.cache[k] = float(self.fn(arch))
            self.evaluations += 1
        return self.cache[k]


def make_fitness(weights: ModelWeights, corpus: Corpus, limit: int | None = None,
                 batch_size: int = 250) -> Fitness:
    return Fitness(lambda arch: validate(weights, arch, corpus.valid, batch_size, limit))


class LatencyOracle:
    """Memoized predictor latency for architectures."""

    def __init__(self, predictor: LatencyPredictor | Callable[[ArchConfig], float]):
        self.predictor = predictor
        self.cache: dict[tuple, float] = {}

    def __call__(self, arch: ArchConfig) -> float:
        k = arch.key()
        if k not in self.cache:
            if isinstance(self.predictor, LatencyPredictor):
                self.cache[k] = predict(self.predictor, encode_features(arch))
            else:
                self.cache[k] = float(self.predictor(arch))
        return self.cache[k]


@dataclass
class Scored:
    arch: ArchConfig
    latency_ms: float
    loss: float

    def rank_key(self):
        # ties: lower latency, then genome order
        return (self.loss, self.latency_ms, self.arch.genes())


@dataclass
class SearchResult:
    best: ArchConfig
    best_loss: float
    best_latency_ms: float
    history: list[dict] = field(default_factory=list)
    curve: list[tuple[int, float]] = field(default_factory=list)   # (evaluations so far, best loss)
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {"best_arch": self.best.to_dict(), "best_loss": self.best_loss,
                "predicted_latency_ms": self.best_latency_ms, "evaluations": self.evaluations,
                "history": self.history, "curve": [list(p) for p in self.curve]}


def constrained_sample(space: DesignSpace, latency: LatencyOracle, constraint: float,
                       rng: np.random.Generator) -> ArchConfig:
    for _ in range(MAX_PROBES):
        arch = sample_uniform(space, rng)
        if latency(arch) < constraint:
            return arch
    raise InfeasibleConstraint(
        f"no architecture under {constraint} ms in {MAX_PROBES} uniform samples")


def _offspring(make: Callable[[], ArchConfig], space, latency, constraint, rng) -> ArchConfig:
    for _ in range(MAX_RETRIES):
        child = make()
        if latency(child) < constraint:
            return child
    return constrained_sample(space, latency, constraint, rng)


def evolutionary_search(params: EvoParams, space: DesignSpace, predictor, fitness: Callable[[ArchConfig], float],
                        rng: np.random.Generator | None = None,
                        log: Callable[[dict], None] | None = None) -> SearchResult:
    """Elitist evolution; only architectures under the latency constraint ever enter the population."""
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    latency = LatencyOracle(predictor)
    c = params.latency_constraint_ms
    counter = _Counter(fitness)
    population = [constrained_sample(space, latency, c, rng) for _ in range(params.population)]
    history, curve = [], []
    best: Scored | None = None
    for gen in range(params.iterations + 1):
        scored = []
        for arch in population:
            loss = counter(arch)
            scored.append(Scored(arch, latency(arch), loss))
            if best is None or scored[-1].rank_key() < best.rank_key():
                best = scored[-1]
            curve.append((counter.evaluations, best.loss))
        scored.sort(key=Scored.rank_key)
        losses = [s.loss for s in scored]
        history.append({"generation": gen, "best_loss": best.loss, "mean_loss": float(np.mean(losses)),
                        "evaluations": counter.evaluations,
                        "max_latency_ms": max(s.latency_ms for s in scored),
                        "best_arch": best.arch.to_dict()})
        if log is not None:
            log({k: v for k, v in history[-1].items() if k != "best_arch"})
        if gen == params.iterations:
            break
        parents = [s.arch for s in scored[:params.parents]]
        mutants = [_offspring(lambda: mutate(parents[rng.integers(len(parents))], params.mutation_prob, space, rng),
                              space, latency, c, rng) for _ in range(params.mutation_size)]
        children = [_offspring(lambda: crossover(parents[rng.integers(len(parents))],
                                                 parents[rng.integers(len(parents))], rng),
                               space, latency, c, rng) for _ in range(params.crossover_size)]
        population = parents + mutants + children
    # collapse repeated (evaluations, best) points from memo hits
    curve = [p for i, p in enumerate(curve) if i == len(curve) - 1 or curve[i + 1][0] != p[0]]
    return SearchResult(best.arch, best.loss, best.latency_ms, history, curve, counter.evaluations)


def random_search(budget: int, space: DesignSpace, predictor, fitness: Callable[[ArchConfig], float],
                  constraint: float, rng: np.random.Generator) -> SearchResult:
    """Score ``budget`` constrained uniform samples and keep the best."""
    if budget < 1:
        raise ValidationError("budget must be >= 1")
    latency = LatencyOracle(predictor)
    counter = _Counter(fitness)
    best: Scored | None = None
    history, curve = [], []
    for i in range(budget):
        arch = constrained_sample(space, latency, constraint, rng)
        s = Scored(arch, latency(arch), counter(arch))
        if best is None or s.rank_key() < best.rank_key():
            best = s
        history.append({"sample": i, "loss": s.loss, "latency_ms": s.latency_ms, "best_loss": best.loss})
        curve.append((counter.evaluations, best.loss))
    return SearchResult(best.arch, best.loss, best.latency_ms, history, curve, counter.evaluations)


class _Counter:
    """Counts distinct architectures scored within one search, even over a shared memo."""

    def __init__(self, fitness):
        self.fitness = fitness
        self.seen: set[tuple] = set()

    @property
    def evaluations(self) -> int:
        return len(self.seen)

    def __call__(self, arch: ArchConfig) -> float:
        self.seen.add(arch.key())
        return float(self.fitness(arch))


def write_search_report(path: str | Path, params: EvoParams, evo: SearchResult,
                        baseline: SearchResult | None = None, extra: dict | None = None) -> dict:
    report = {"version": REPORT_VERSION, "params": asdict(params), "evolution": evo.to_dict()}
    if baseline is not None:
        report["random"] = baseline.to_dict()
    report.update(extra or {})
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
