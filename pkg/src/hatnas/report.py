"""Figures and CSV tables for search, proxy, predictor and training artifacts."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
WIDTH_IN = 6.0

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (WIDTH_IN, WIDTH_IN * GOLDEN),
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def _step_curve(curve: list, budget: int) -> np.ndarray:
    """Best-so-far loss at every evaluation count 1..budget."""
    out = np.full(budget, np.nan)
    for n, best in curve:
        if 1 <= n <= budget:
            out[n - 1:] = best
    return out


def search_figure(report: dict, out_dir: Path) -> list[Path]:
    evo = report["evolution"]
    rnd = report.get("random")
    budget = evo["evaluations"]
    evo_curve = _step_curve(evo["curve"], budget)
    rows = [[i + 1, repr(float(evo_curve[i]))] for i in range(budget)]
    header = ["evaluations", "evolution_best_loss"]
    fig, ax = plt.subplots()
    ax.plot(np.arange(1, budget + 1), evo_curve, label="evolutionary", color="C0")
    if rnd is not None:
        rnd_curve = _step_curve(rnd["curve"], budget)
        for i, row in enumerate(rows):
            row.append(repr(float(rnd_curve[i])))
        header.append("random_best_loss")
        ax.plot(np.arange(1, budget + 1), rnd_curve, label="random", color="C1", ls="--")
    ax.set_xlabel("fitness evaluations")
    ax.set_ylabel("best validation loss")
    c = report.get("params", {}).get("latency_constraint_ms")
    if c is not None:
        ax.set_title(f"latency constraint {c:g} ms")
    ax.legend(frameon=False)
    csv_path = out_dir / "search_curves.csv"
    _write_csv(csv_path, header, rows)
    return [_save(fig, out_dir / "search_curves.png"), csv_path]


def proxy_figure(report: dict, out_dir: Path) -> list[Path]:
    entries = report["entries"]
    x = [e["inherited_val_loss"] for e in entries]
    y = [e["scratch_val_loss"] for e in entries]
    fig, ax = plt.subplots()
    ax.scatter(x, y, color="C2")
    for e in entries:
        ax.annotate(f"{e['params'] / 1e3:.0f}k", (e["inherited_val_loss"], e["scratch_val_loss"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel("inherited-weight validation loss")
    ax.set_ylabel("from-scratch validation loss")
    ax.set_title(f"Kendall tau-b = {report['tau']:.3f}")
    csv_path = out_dir / "proxy.csv"
    _write_csv(csv_path, ["params", "inherited_val_loss", "scratch_val_loss", "scratch_token_acc"],
               [[e["params"], repr(e["inherited_val_loss"]), repr(e["scratch_val_loss"]),
                 repr(e["scratch_token_acc"])] for e in entries])
    return [_save(fig, out_dir / "proxy_scatter.png"), csv_path]


def predictor_figure(predictor, dataset, out_dir: Path) -> list[Path]:
    rows = []
    fig, ax = plt.subplots()
    for i, split in enumerate(("train", "valid", "test")):
        x, y = dataset.arrays(split)
        if not len(y):
            continue
        p = predictor.predict_many(x)
        rows += [[split, repr(float(a)), repr(float(b))] for a, b in zip(y, p)]
        ax.scatter(y, p, s=6, alpha=0.6, color=f"C{i}", label=split)
    lo = min(float(r[1]) for r in rows)
    hi = max(float(r[1]) for r in rows)
    ax.plot([lo, hi], [lo, hi], color="0.4", lw=0.8)
    ax.set_xlabel("measured latency (ms)")
    ax.set_ylabel("predicted latency (ms)")
    ax.legend(frameon=False)
    csv_path = out_dir / "predictor_fit.csv"
    _write_csv(csv_path, ["split", "measured_ms", "predicted_ms"], rows)
    return [_save(fig, out_dir / "predictor_fit.png"), csv_path]


def training_figure(trace_csv: Path, out_dir: Path) -> list[Path]:
    steps, train, vsteps, val = [], [], [], []
    with open(trace_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            train.append(float(row["train_loss"]))
            if row["val_loss"]:
                vsteps.append(int(row["step"]))
                val.append(float(row["val_loss"]))
    fig, ax = plt.subplots()
    k = max(1, len(train) // 100)
    smooth = np.convolve(train, np.ones(k) / k, mode="valid")
    ax.plot(steps[k - 1:], smooth, label="train (smoothed)", color="C0")
    if val:
        ax.plot(vsteps, val, "o-", label="validation", color="C3", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.legend(frameon=False)
    return [_save(fig, out_dir / f"{Path(trace_csv).stem}.png")]
