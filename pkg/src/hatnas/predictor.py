"""Offline latency predictor: min-max normalized MLP over architecture features."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .container import ArtifactError, read_container, write_container
from .design_space import ValidationError
from .numerics import AdamState, Tensor

PRED_MAGIC = b"HATPRED"
N_FEATURES = 10
HIDDEN = 400
LAYERS = ("w1", "b1", "w2", "b2", "w3", "b3")


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        return cls(np.min(x, axis=0), np.max(x, axis=0))

    @property
    def span(self) -> np.ndarray:
        s = self.hi - self.lo
        # constant columns map to 0
        return np.where(s > 0, s, 1.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.hi > self.lo, (x - self.lo) / self.span, 0.0)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.span + self.lo


@dataclass
class LatencyPredictor:
    params: dict[str, np.ndarray]
    x_norm: Normalizer
    y_norm: Normalizer
    metrics: dict = field(default_factory=dict)

    def _forward(self, z: np.ndarray, P: dict[str, Tensor] | None = None) -> Tensor:
        P = P or {k: Tensor(v) for k, v in self.params.items()}
        h = nx.relu(nx.add_bias(nx.matmul(Tensor(z), P["w1"]), P["b1"]))
        h = nx.relu(nx.add_bias(nx.matmul(h, P["w2"]), P["b2"]))
        return nx.add_bias(nx.matmul(h, P["w3"]), P["b3"])

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise ValidationError(f"expected feature rows of length {N_FEATURES}, got shape {x.shape}")
        with nx.no_grad():
            z = self._forward(self.x_norm.forward(x)).data[:, 0]
        return np.maximum(self.y_norm.inverse(z), 0.0)

    def save(self, path: str | Path) -> None:
        meta = {"n_features": N_FEATURES, "hidden": HIDDEN,
                "x_lo": self.x_norm.lo.tolist(), "x_hi": self.x_norm.hi.tolist(),
                "y_lo": float(self.y_norm.lo), "y_hi": float(self.y_norm.hi), "metrics": self.metrics}
        write_container(path, PRED_MAGIC, meta, self.params, float64=True)

    @classmethod
    def load(cls, path: str | Path) -> "LatencyPredictor":
        meta, blocks = read_container(path, PRED_MAGIC)
        if sorted(blocks) != sorted(LAYERS):
            raise ArtifactError(f"{path}: predictor blocks {sorted(blocks)} != {sorted(LAYERS)}")
        x_norm = Normalizer(np.array(meta["x_lo"]), np.array(meta["x_hi"]))
        y_norm = Normalizer(np.float64(meta["y_lo"]), np.float64(meta["y_hi"]))
        return cls(dict(blocks), x_norm, y_norm, meta.get("metrics", {}))


def predict(pred: LatencyPredictor, features: Sequence[float]) -> float:
    """Predicted latency in ms for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise ValidationError(f"feature vector must have length {N_FEATURES}, got {x.size}")
    return float(pred.predict_many(x[None, :])[0])


def rmse(pred, records) -> float:
    """RMSE in ms; ``pred`` is a predictor or an array of predictions, ``records`` a list or array."""
    if len(records) == 0:
        raise ValidationError("rmse of an empty set")
    if isinstance(records, np.ndarray):
        truth = records
    else:
        truth = np.array([r.latency_ms for r in records])
    if isinstance(pred, LatencyPredictor):
        guess = pred.predict_many(np.array([r.features for r in records]))
    else:
        guess = np.asarray(pred, dtype=np.float64)
    return float(np.sqrt(np.mean((guess - truth) ** 2)))


def init_mlp(seed: int, n_in: int = N_FEATURES, hidden: int = HIDDEN) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (a, b) in enumerate([(n_in, hidden), (hidden, hidden), (hidden, 1)], start=1):
        bound = 1.0 / np.sqrt(a)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return params


def fit_mlp(x_train: np.ndarray, y_train: np.ndarray, x_valid: np.ndarray | None = None,
            y_valid: np.ndarray | None = None, epochs: int = 400, lr: float = 1e-3,
            seed: int = 0) -> tuple[LatencyPredictor, dict]:
    """Full-batch Adam on normalized MSE; keeps the epoch with the best validation RMSE."""
    if len(x_train) == 0:
        raise ValidationError("empty training split")
    x_norm = Normalizer.fit(x_train)
    flat = [i for i in range(x_train.shape[1]) if x_norm.hi[i] == x_norm.lo[i]]
    if flat:
        warnings.warn(f"constant feature columns {flat} map to 0", DegenerateFeatureWarning, stacklevel=2)
    y_norm = Normalizer(np.float64(np.min(y_train)), np.float64(np.max(y_train)))
    z_train = x_norm.forward(x_train)
    t_train = y_norm.forward(y_train)[:, None]
    if x_valid is None or len(x_valid) == 0:
        x_valid, y_valid = x_train, y_train
    model = LatencyPredictor(init_mlp(seed), x_norm, y_norm)
    state = AdamState()
    best = (np.inf, -1, {k: v.copy() for k, v in model.params.items()})
    history = []
    for epoch in range(epochs):
        P = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
        loss = nx.mean_squared_error(model._forward(z_train, P), t_train)
        loss.backward()
        nx.adam_step(model.params, {k: t.grad for k, t in P.items()}, state, lr)
        val = rmse(model.predict_many(x_valid), y_valid)
        history.append((epoch, loss.item(), val))
        if val < best[0]:
            best = (val, epoch, {k: v.copy() for k, v in model.params.items()})
    final_params = model.params
    model.params = best[2]
    info = {"best_epoch": best[1], "best_valid_rmse": best[0], "history": history,
            "final_params": final_params}
    return model, info


def train_predictor(dataset, epochs: int = 400, lr: float = 1e-3, seed: int = 0) -> tuple[LatencyPredictor, dict]:
    """Fit on the train split, select on valid, report test RMSE in ms."""
    x_tr, y_tr = dataset.arrays("train")
    x_va, y_va = dataset.arrays("valid")
    x_te, y_te = dataset.arrays("test")
    model, info = fit_mlp(x_tr, y_tr, x_va, y_va, epochs, lr, seed)
    final = LatencyPredictor(info["final_params"], model.x_norm, model.y_norm)
    metrics = {
        "best_epoch": info["best_epoch"],
        "valid_rmse_ms": info["best_valid_rmse"],
        "train_rmse_ms": rmse(model.predict_many(x_tr), y_tr),
        "test_rmse_ms": rmse(model.predict_many(x_te), y_te) if len(x_te) else float("nan"),
        "final_epoch_test_rmse_ms": rmse(final.predict_many(x_te), y_te) if len(x_te) else float("nan"),
        "test_mean_latency_ms": float(np.mean(y_te)) if len(y_te) else float("nan"),
        "n_train": len(y_tr), "n_valid": len(y_va), "n_test": len(y_te),
    }
    model.metrics = metrics
    return model, {**metrics, "history": info["history"]}
