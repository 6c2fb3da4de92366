import contextlib
import io
import json
import re

import pytest

from hatnas import cli
from hatnas.design_space import DesignSpace
from hatnas.supernet import load_weights
from hatnas.task_data import Corpus, greedy_decode, score_predictions

# the tiny space fixes the encoder depth, so that feature is constant by design
pytestmark = pytest.mark.filterwarnings("ignore::hatnas.predictor.DegenerateFeatureWarning")

TINY = DesignSpace(embed_choices=(8, 16), hidden_choices=(8, 16), head_choices=(1, 2),
                   decoder_layer_choices=(1, 2), encoder_layer_count=2, attend_span_choices=(1, 2),
                   qkv_dim=8, vocab_size=32, max_seq_len=16)

CONFIG = {
    "space": TINY.to_dict(),
    "seed": 3,
    "data": {"n_train": 120, "n_valid": 30, "n_test": 30, "min_len": 3, "max_len": 6},
    "supernet_train": {"total_steps": 12, "warmup_steps": 2, "batch_size": 16},
    "scratch_train": {"total_steps": 6, "warmup_steps": 1, "batch_size": 16},
    "finetune_train": {"total_steps": 3, "warmup_steps": 1, "batch_size": 16},
    "measure": {"n_samples": 20, "n_runs": 3, "warmup": 1, "src_len": 5, "tgt_len": 5},
    "predictor": {"epochs": 15},
    "evo": {"iterations": 2, "population": 8, "parents": 2, "mutation_size": 3, "crossover_size": 3},
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def parse(line):
    return dict(kv.split("=", 1) for kv in line.split(" "))


def last_event(out, event):
    rows = [parse(line) for line in out.splitlines() if line.startswith(f"event={event} ")]
    return rows[-1]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    (d / "run.json").write_text(json.dumps({**CONFIG, "workdir": str(d)}))
    return d


@pytest.fixture(scope="module")
def pipeline(workdir):
    """Run every stage once; returns the config path and each stage's stdout."""
    cfg = str(workdir / "run.json")
    outs = {}

    def go(name, *argv):
        buf, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(err):
            code = cli.main(["--config", cfg, *[str(a) for a in argv]])
        assert code == 0, (name, err.getvalue())
        outs[name] = buf.getvalue()

    go("gen", "gen-data")
    go("super", "train-supernet", "--trace", workdir / "super_trace.csv")
    go("lat", "collect-latency")
    go("pred", "train-predictor")
    go("evo", "evo-search", "--constraint-ms", 1e6)
    go("scratch", "train-sub", "--arch", workdir / "search.json", "--out", workdir / "scratch.ckpt",
       "--metrics", workdir / "scratch.json")
    go("finetune", "train-sub", "--mode", "finetune", "--arch", workdir / "search.json",
       "--out", workdir / "ft.ckpt", "--metrics", workdir / "ft.json")
    go("quant", "quantize", "--weights", workdir / "scratch.ckpt", "--bits", 4, "--corpus",
       workdir / "corpus.txt", "--out", workdir / "q4.ckpt", "--report", workdir / "q4.json")
    go("eval", "eval", "--weights", workdir / "scratch.ckpt", "--beam", 1, "--limit", 10)
    go("proxy", "proxy-study", "--n", 2)
    go("report", "report", "--search", workdir / "search.json", "--proxy", workdir / "proxy.json",
       "--predictor", workdir / "predictor.bin", "--trace", workdir / "super_trace.csv")
    return cfg, outs


def test_pipeline_artifacts(pipeline, workdir):
    _, outs = pipeline
    for name in ("corpus.txt", "supernet.ckpt", "latency.jsonl", "predictor.bin", "search.json",
                 "scratch.ckpt", "ft.ckpt", "q4.ckpt", "proxy.json"):
        assert (workdir / name).stat().st_size > 0, name
    assert (workdir / "corpus.txt").read_text().startswith("HATCORP 1\n")
    assert (workdir / "supernet.ckpt").read_bytes()[:8] == b"HATCKPT\x01"
    assert (workdir / "predictor.bin").read_bytes()[:8] == b"HATPRED\x01"
    assert json.loads((workdir / "latency.jsonl").read_text().splitlines()[0])["magic"] == "HATLAT"
    reports = sorted(p.name for p in (workdir / "reports").iterdir())
    assert reports == ["predictor_fit.csv", "predictor_fit.png", "proxy.csv", "proxy_scatter.png",
                       "search_curves.csv", "search_curves.png", "super_trace.png"]


def test_output_lines_are_key_value(pipeline):
    _, outs = pipeline
    for text in outs.values():
        for line in text.splitlines():
            assert re.fullmatch(r"event=[\w-]+( [\w]+=\S*)*", line), line


def test_search_report_has_matched_baseline(pipeline, workdir):
    rep = json.loads((workdir / "search.json").read_text())
    assert rep["evolution"]["evaluations"] >= rep["random"]["evaluations"] >= 1
    assert len(rep["random"]["history"]) == rep["evolution"]["evaluations"]
    assert all(h["max_latency_ms"] < 1e6 for h in rep["evolution"]["history"])


def test_eval_beam_one_matches_greedy_harness(pipeline, workdir):
    _, outs = pipeline
    row = last_event(outs["eval"], "eval")
    w = load_weights(workdir / "scratch.ckpt")
    pairs = Corpus.load(workdir / "corpus.txt").test[:10]
    hyps = [greedy_decode(w, w.arch, list(s)) for s, _ in pairs]
    ref = score_predictions(hyps, [list(t) for _, t in pairs])
    assert float(row["token_acc"]) == pytest.approx(ref["token_acc"], abs=1e-6)
    assert float(row["exact_match"]) == pytest.approx(ref["exact_match"], abs=1e-6)


def _rerun(cfg, tmp, *argv):
    assert cli.main(["--config", cfg, *[str(a) for a in argv]]) == 0
    return (tmp).read_bytes()


def test_reruns_are_byte_identical(pipeline, workdir, tmp_path, capsys):
    cfg, _ = pipeline
    same = {
        "corpus": (["gen-data", "--out", tmp_path / "c.txt"], workdir / "corpus.txt", tmp_path / "c.txt"),
        "supernet": (["train-supernet", "--out", tmp_path / "s.ckpt"], workdir / "supernet.ckpt",
                     tmp_path / "s.ckpt"),
        "predictor": (["train-predictor", "--out", tmp_path / "p.bin"], workdir / "predictor.bin",
                      tmp_path / "p.bin"),
        "search": (["evo-search", "--constraint-ms", 1e6, "--out", tmp_path / "s.json"], workdir / "search.json",
                   tmp_path / "s.json"),
        "scratch": (["train-sub", "--arch", workdir / "search.json", "--out", tmp_path / "x.ckpt"],
                    workdir / "scratch.ckpt", tmp_path / "x.ckpt"),
        "finetune": (["train-sub", "--mode", "finetune", "--arch", workdir / "search.json", "--out",
                      tmp_path / "f.ckpt"], workdir / "ft.ckpt", tmp_path / "f.ckpt"),
        "quantize": (["quantize", "--weights", workdir / "scratch.ckpt", "--bits", 4, "--out", tmp_path / "q.ckpt"],
                     workdir / "q4.ckpt", tmp_path / "q.ckpt"),
        "proxy": (["proxy-study", "--n", 2, "--out", tmp_path / "p.json"], workdir / "proxy.json",
                  tmp_path / "p.json"),
        "report": (["report", "--search", workdir / "search.json", "--out-dir", tmp_path / "r"],
                   workdir / "reports" / "search_curves.png", tmp_path / "r" / "search_curves.png"),
    }
    for name, (argv, original, fresh) in same.items():
        assert _rerun(cfg, fresh, *argv) == original.read_bytes(), name
    capsys.readouterr()


def test_hat_seed_env_overrides_config(pipeline, workdir, tmp_path, monkeypatch, capsys):
    cfg, _ = pipeline
    monkeypatch.setenv("HAT_SEED", "9")
    assert cli.main(["--config", cfg, "gen-data", "--out", str(tmp_path / "a.txt")]) == 0
    monkeypatch.delenv("HAT_SEED")
    assert cli.main(["--config", cfg, "--seed", "9", "gen-data", "--out", str(tmp_path / "b.txt")]) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() != (workdir / "corpus.txt").read_bytes()
    assert Corpus.load(tmp_path / "a.txt").seed == 9
    capsys.readouterr()


def test_missing_artifact_error_line(capsys, tmp_path):
    code, out, err = run(capsys, "train-predictor", "--dataset", tmp_path / "nope.jsonl", "--out", tmp_path / "p")
    assert code == 2 and out == ""
    row = parse(err.strip().split(" message=")[0])
    assert row == {"event": "error", "command": "train-predictor", "kind": "ArtifactError"}
    assert "nope.jsonl" in err and "HATLAT" in err


def test_corrupt_checkpoint_error_line(capsys, tmp_path, pipeline, workdir):
    (tmp_path / "bad.ckpt").write_bytes(b"HATPRED\x01junk")
    code, _, err = run(capsys, "eval", "--weights", tmp_path / "bad.ckpt", "--corpus", workdir / "corpus.txt")
    assert code == 2 and "kind=ArtifactError" in err and "HATCKPT" in err


def test_infeasible_constraint_exit_code(capsys, pipeline, workdir):
    cfg, _ = pipeline
    code, _, err = run(capsys, "--config", cfg, "evo-search", "--constraint-ms", 1e-9,
                       "--out", workdir / "never.json")
    assert code == 1 and "kind=InfeasibleConstraint" in err
    assert not (workdir / "never.json").exists()


def test_bad_config_key(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"sed": 1}))
    code, _, err = run(capsys, "--config", tmp_path / "c.json", "gen-data", "--out", tmp_path / "x")
    assert code == 2 and "unknown run-config keys" in err


def test_quiet_suppresses_progress(capsys, pipeline, workdir, tmp_path):
    cfg, outs = pipeline
    assert "event=train " in outs["super"]
    code, out, _ = run(capsys, "--quiet", "--config", cfg, "train-supernet", "--total-steps", 3,
                       "--warmup-steps", 1, "--out", tmp_path / "s.ckpt")
    assert code == 0
    assert [line.split(" ")[0] for line in out.splitlines()] == ["event=train-supernet"]
