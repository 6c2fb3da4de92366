"""Command-line pipeline: data, supernet, latency, predictor, search, training, quantization, reports.

Every numeric knob has a default in RunConfig; ``--config`` loads a JSON run
config and explicit flags override it.  HAT_SEED overrides the config seed.
Progress and results are printed as ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import ArtifactError
from .design_space import ArchConfig, DesignSpace, ValidationError

QUIET = False


def emit(event: str, progress: bool = False, **kv) -> None:
    if progress and QUIET:
        return
    parts = [f"event={event}"]
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, (dict, list, tuple)):
            v = json.dumps(v, separators=(",", ":"))
        parts.append(f"{k}={v}")
    print(" ".join(parts), flush=True)


def progress_logger(event: str):
    return lambda row: emit(event, progress=True, **row)


@dataclass
class RunConfig:
    workdir: str = "."
    paths: dict = field(default_factory=lambda: dict(corpus="corpus.txt", supernet="supernet.ckpt",
                                                     dataset="latency.jsonl", predictor="predictor.bin",
                                                     search="search.json", proxy="proxy.json",
                                                     reports="reports"))
    seed: int = 0
    space: dict = field(default_factory=lambda: DesignSpace().to_dict())
    data: dict = field(default_factory=lambda: dict(task="reverse", n_train=20000, n_valid=1000, n_test=1000,
                                                    min_len=4, max_len=16))
    supernet_train: dict = field(default_factory=lambda: dict(total_steps=8000, warmup_steps=400))
    scratch_train: dict = field(default_factory=lambda: dict(total_steps=8000, warmup_steps=400))
    finetune_train: dict = field(default_factory=lambda: dict(total_steps=2000, warmup_steps=100))
    measure: dict = field(default_factory=lambda: dict(n_samples=2000, n_runs=300, warmup=20, trim=0.1,
                                                       src_len=16, tgt_len=16, block=1))
    predictor: dict = field(default_factory=lambda: dict(epochs=400, lr=1e-3))
    evo: dict = field(default_factory=lambda: dict(iterations=30, population=125, parents=25,
                                                   mutation_size=50, mutation_prob=0.3, crossover_size=50))
    fitness_limit: int | None = None

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        cfg = cls()
        if path:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ArtifactError(f"{path}: cannot read run config ({exc})") from None
            unknown = set(raw) - set(cls.__dataclass_fields__)
            if unknown:
                raise ValidationError(f"unknown run-config keys {sorted(unknown)}")
            for k, v in raw.items():
                if isinstance(getattr(cfg, k), dict):
                    v = {**getattr(cfg, k), **v}
                setattr(cfg, k, v)
        if os.environ.get("HAT_SEED"):
            cfg.seed = int(os.environ["HAT_SEED"])
        return cfg

    def design_space(self) -> DesignSpace:
        return DesignSpace.from_dict(self.space)

    def train_config(self, which: str, args, seed_offset: int = 0):
        from .trainer import TrainConfig
        d = dict(getattr(self, which))
        for name in ("total_steps", "warmup_steps", "lr_max", "batch_size", "schedule", "label_smoothing"):
            v = getattr(args, name, None)
            if v is not None:
                d[name] = v
        return TrainConfig(**{**d, "seed": self.seed + seed_offset})

    def path(self, key: str, given: str | None = None) -> str:
        """An explicit flag value, else the configured artifact path under workdir."""
        if given:
            return given
        return str(Path(self.workdir) / self.paths[key])


# ----------------------------------------------------------------- helpers

def _arch(text: str, space: DesignSpace) -> ArchConfig:
    """'largest', 'smallest', a JSON file, or inline JSON."""
    if text == "largest":
        return space.largest()
    if text == "smallest":
        return space.smallest()
    p = Path(text)
    raw = p.read_text() if p.exists() else text
    try:
        d = json.loads(raw)
    except json.JSONDecodeError:
        raise ValidationError(f"arch {text!r} is neither a file nor JSON") from None
    if "evolution" in d:          # accept a search report directly
        d = d["evolution"]
    if "best_arch" in d:
        d = d["best_arch"]
    return space.check(ArchConfig.from_dict(d))


def _load_corpus(path: str):
    from .task_data import Corpus
    return Corpus.load(path)


def _require(path: str | None, what: str) -> str:
    # loaders report missing files together with the expected magic/version
    if not path:
        raise ValidationError(f"--{what} is required")
    return path


def _write_json(path: str, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> None:
    from .task_data import generate_corpus
    d = dict(cfg.data)
    for k in ("task", "n_train", "n_valid", "n_test", "min_len", "max_len"):
        if getattr(args, k) is not None:
            d[k] = getattr(args, k)
    space = cfg.design_space()
    corpus = generate_corpus(d["task"], d["n_train"], d["n_valid"], d["n_test"], d["min_len"], d["max_len"],
                             space.vocab_size, cfg.seed, space.max_seq_len)
    out = cfg.path("corpus", args.out)
    corpus.save(out)
    emit("gen-data", out=out, **corpus.header())


def cmd_train_supernet(args, cfg: RunConfig) -> None:
    from .supernet import init_super, save_weights
    from .trainer import train_supernet, validate
    space = cfg.design_space()
    corpus = _load_corpus(_require(cfg.path("corpus", args.corpus), "corpus"))
    tc = cfg.train_config("supernet_train", args)
    t0 = time.perf_counter()
    weights = init_super(space, tc.seed)
    result = train_supernet(weights, space, corpus, tc, log=progress_logger("train"))
    out = cfg.path("supernet", args.out)
    save_weights(out, result.weights)
    if args.trace:
        result.write_trace(args.trace)
    emit("train-supernet", out=out, steps=tc.total_steps,
         val_loss_largest=validate(result.weights, space.largest(), corpus.valid),
         val_loss_smallest=validate(result.weights, space.smallest(), corpus.valid),
         seconds=round(time.perf_counter() - t0, 1))


def cmd_collect_latency(args, cfg: RunConfig) -> None:
    from .latency_lab import collect_dataset
    from .supernet import load_weights
    weights = load_weights(_require(cfg.path("supernet", args.checkpoint), "checkpoint"))
    m = dict(cfg.measure)
    for k in ("n_samples", "n_runs", "warmup"):
        if getattr(args, k) is not None:
            m[k] = getattr(args, k)

    def progress(i, rec):
        if i % 50 == 0:
            emit("measure", progress=True, index=i, latency_ms=rec.latency_ms)
    ds = collect_dataset(weights, weights.space, seed=cfg.seed, progress=progress, **m)
    out = cfg.path("dataset", args.out)
    ds.save(out)
    lat = [r.latency_ms for r in ds.records]
    emit("collect-latency", out=out, records=len(lat), min_ms=min(lat), max_ms=max(lat),
         coarse_timer=sum(r.coarse_timer for r in ds.records))


def cmd_train_predictor(args, cfg: RunConfig) -> None:
    from .latency_lab import LatencyDataset
    from .predictor import train_predictor
    ds = LatencyDataset.load(_require(cfg.path("dataset", args.dataset), "dataset"))
    p = dict(cfg.predictor)
    if args.epochs is not None:
        p["epochs"] = args.epochs
    model, metrics = train_predictor(ds, p["epochs"], p["lr"], cfg.seed)
    out = cfg.path("predictor", args.out)
    model.save(out)
    emit("train-predictor", out=out, **{k: v for k, v in metrics.items() if k != "history"})


def cmd_evo_search(args, cfg: RunConfig) -> None:
    from .evolution import EvoParams, evolutionary_search, make_fitness, random_search, write_search_report
    from .predictor import LatencyPredictor
    from .supernet import load_weights
    weights = load_weights(_require(cfg.path("supernet", args.checkpoint), "checkpoint"))
    predictor = LatencyPredictor.load(_require(cfg.path("predictor", args.predictor), "predictor"))
    corpus = _load_corpus(_require(cfg.path("corpus", args.corpus), "corpus"))
    e = dict(cfg.evo)
    for k in ("iterations", "population", "parents", "mutation_size", "crossover_size", "mutation_prob"):
        if getattr(args, k) is not None:
            e[k] = getattr(args, k)
    params = EvoParams(latency_constraint_ms=args.constraint_ms, seed=cfg.seed, **e)
    limit = args.fitness_limit if args.fitness_limit is not None else cfg.fitness_limit
    fitness = make_fitness(weights, corpus, limit=limit)
    t0 = time.perf_counter()
    evo = evolutionary_search(params, weights.space, predictor, fitness, log=progress_logger("generation"))
    baseline = random_search(evo.evaluations, weights.space, predictor, fitness, params.latency_constraint_ms,
                             np.random.default_rng([cfg.seed, 1]))
    out = cfg.path("search", args.out)
    write_search_report(out, params, evo, baseline, {"fitness_limit": limit})
    emit("evo-search", out=out, evo_best_loss=evo.best_loss, random_best_loss=baseline.best_loss,
         evaluations=evo.evaluations, predicted_latency_ms=evo.best_latency_ms,
         seconds=round(time.perf_counter() - t0, 1))


def cmd_train_sub(args, cfg: RunConfig) -> None:
    from .supernet import load_weights, save_weights
    from .trainer import finetune_inherited, train_from_scratch
    space = cfg.design_space()
    corpus = _load_corpus(_require(cfg.path("corpus", args.corpus), "corpus"))
    if args.mode == "finetune":
        sup = load_weights(_require(cfg.path("supernet", args.checkpoint), "checkpoint"))
        arch = _arch(args.arch, sup.space)
        tc = cfg.train_config("finetune_train", args, seed_offset=1)
        result = finetune_inherited(sup, arch, corpus, tc, log=progress_logger("train"))
    else:
        arch = _arch(args.arch, space)
        tc = cfg.train_config("scratch_train", args, seed_offset=1)
        result = train_from_scratch(space, arch, corpus, tc, log=progress_logger("train"))
    save_weights(args.out, result.weights)
    if args.trace:
        result.write_trace(args.trace)
    if args.metrics:
        _write_json(args.metrics, {"arch": arch.to_dict(), "mode": args.mode, "train": tc.to_dict(),
                                   "metrics": result.metrics})
    emit("train-sub", out=args.out, mode=args.mode, **result.metrics)


def cmd_quantize(args, cfg: RunConfig) -> None:
    from .quantize import quantize_model
    from .supernet import extract_sub, load_weights
    weights = load_weights(_require(args.weights, "weights"))
    if args.arch:
        weights = extract_sub(weights, _arch(args.arch, weights.space))
    valid = _load_corpus(_require(args.corpus, "corpus")).valid if args.corpus else None
    qm, rep = quantize_model(weights, args.bits, valid)
    qm.save(args.out)
    if args.report:
        _write_json(args.report, rep)
    emit("quantize", out=args.out, **rep)


def cmd_eval(args, cfg: RunConfig) -> None:
    from .supernet import load_weights
    from .task_data import make_decoder, sequence_accuracy
    from .trainer import validate
    weights = load_weights(_require(args.weights, "weights"))
    if args.arch:
        arch = _arch(args.arch, weights.space)
    elif weights.arch is not None:
        arch = weights.arch
    else:
        raise ValidationError("--arch is required for SuperTransformer checkpoints")
    corpus = _load_corpus(_require(cfg.path("corpus", args.corpus), "corpus"))
    pairs = corpus.split(args.split)[:args.limit]
    acc = sequence_accuracy(make_decoder(weights, arch, args.beam, args.length_penalty), pairs)
    emit("eval", split=args.split, beam=args.beam, n=len(pairs), loss=validate(weights, arch, pairs), **acc)


def cmd_proxy_study(args, cfg: RunConfig) -> None:
    from .proxy_eval import run_proxy_study
    from .supernet import load_weights
    weights = load_weights(_require(cfg.path("supernet", args.checkpoint), "checkpoint"))
    corpus = _load_corpus(_require(cfg.path("corpus", args.corpus), "corpus"))
    tc = cfg.train_config("scratch_train", args, seed_offset=1)
    rep = run_proxy_study(weights, weights.space, corpus, args.n, tc, cfg.seed, log=progress_logger("proxy"))
    out = cfg.path("proxy", args.out)
    rep.save(out)
    emit("proxy-study", out=out, tau=rep.tau, n=len(rep.entries))


def cmd_report(args, cfg: RunConfig) -> None:
    from . import report
    out = Path(cfg.path("reports", args.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.search:
        made += report.search_figure(json.loads(Path(_require(args.search, "search")).read_text()), out)
    if args.proxy:
        made += report.proxy_figure(json.loads(Path(_require(args.proxy, "proxy")).read_text()), out)
    if args.predictor or args.dataset:
        from .latency_lab import LatencyDataset
        from .predictor import LatencyPredictor
        made += report.predictor_figure(LatencyPredictor.load(_require(cfg.path("predictor", args.predictor), "predictor")),
                                        LatencyDataset.load(_require(cfg.path("dataset", args.dataset), "dataset")), out)
    for trace in args.trace or []:
        made += report.training_figure(Path(_require(trace, "trace")), out)
    if not made:
        raise ValidationError("nothing to report; pass --search, --proxy, --predictor/--dataset or --trace")
    emit("report", files=[str(p) for p in made])


# ------------------------------------------------------------------ parser

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--total-steps", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--lr-max", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--schedule", choices=["cosine", "inv_sqrt"])
    p.add_argument("--label-smoothing", type=float)
    p.add_argument("--trace", help="write the loss trace CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hatnas", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="run-config JSON")
    parser.add_argument("--seed", type=int, help="overrides config and HAT_SEED")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--task", choices=["copy", "reverse", "sort"])
    for k in ("n-train", "n-valid", "n-test", "min-len", "max-len"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-supernet", help="train the weight-shared SuperTransformer")
    p.add_argument("--corpus")
    p.add_argument("--out")
    _train_flags(p)
    p.set_defaults(fn=cmd_train_supernet)

    p = sub.add_parser("collect-latency", help="measure sampled SubTransformers on this host")
    p.add_argument("--checkpoint")
    p.add_argument("--n", dest="n_samples", type=int)
    p.add_argument("--runs", dest="n_runs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_collect_latency)

    p = sub.add_parser("train-predictor", help="fit the latency MLP")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("evo-search", help="latency-constrained evolutionary search plus random baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--predictor")
    p.add_argument("--corpus")
    p.add_argument("--constraint-ms", type=float, required=True)
    for k in ("iterations", "population", "parents", "mutation-size", "crossover-size"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--mutation-prob", type=float)
    p.add_argument("--fitness-limit", type=int, help="score on the first N validation pairs")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evo_search)

    p = sub.add_parser("train-sub", help="train one SubTransformer from scratch or from inherited weights")
    p.add_argument("--arch", required=True, help="JSON file, inline JSON, search report, largest or smallest")
    p.add_argument("--mode", choices=["scratch", "finetune"], default="scratch")
    p.add_argument("--checkpoint", help="SuperTransformer checkpoint (finetune mode)")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="write final metrics JSON here")
    _train_flags(p)
    p.set_defaults(fn=cmd_train_sub)

    p = sub.add_parser("quantize", help="k-means quantize a checkpoint")
    p.add_argument("--weights", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--arch", help="extract this SubTransformer first")
    p.add_argument("--corpus", help="report validation loss before/after")
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="decode a split and report accuracy")
    p.add_argument("--weights", required=True)
    p.add_argument("--arch")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--length-penalty", type=float, default=0.6)
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("proxy-study", help="inherited vs from-scratch ranking study")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--out")
    _train_flags(p)
    p.set_defaults(fn=cmd_proxy_study)

    p = sub.add_parser("report", help="render figures and CSV tables")
    p.add_argument("--search")
    p.add_argument("--proxy")
    p.add_argument("--predictor")
    p.add_argument("--dataset")
    p.add_argument("--trace", action="append")
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    global QUIET
    args = build_parser().parse_args(argv)
    QUIET = args.quiet
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        args.fn(args, cfg)
    except (ArtifactError, ValidationError, OSError) as exc:
        kind = type(exc).__name__
        print(f"event=error command={args.command} kind={kind} message={json.dumps(str(exc))}",
              file=sys.stderr, flush=True)
        return 2
    except Exception as exc:  # training divergence, infeasible constraints, ...
        print(f"event=error command={args.command} kind={type(exc).__name__} message={json.dumps(str(exc))}",
              file=sys.stderr, flush=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
