import json
import subprocess
import sys
import warnings
from pathlib import Path

import pytest

from groundgen.cli import main
from groundgen.kb import load_kb, load_queries
from groundgen.synth import SynthConfig, synth_fixture

SMALL = ["--n-entities", "40", "--n-train", "200", "--n-eval", "60", "--n-clusters", "8"]


def run(*args) -> int:
    return main([str(a) for a in args])


def pipeline(d: Path, jobs: int = 1, steps: int = 40) -> Path:
    assert run("synth", "--out-dir", d, *SMALL) == 0
    assert run("build-index", "--kb", d / "entities.jsonl", "--out", d / "index.bin", "--jobs", jobs) == 0
    assert run("train-toy", "--kb", d / "entities.jsonl", "--queries", d / "train.jsonl",
               "--out", d / "params.bin", "--steps", steps, "--figures", d / "train_fig") == 0
    assert run("decode", "--index", d / "index.bin", "--kb", d / "entities.jsonl", "--queries", d / "eval.jsonl",
               "--scorer", d / "params.bin", "--k", 3, "--out", d / "preds.jsonl", "--jobs", jobs) == 0
    assert run("eval", "--preds", d / "preds.jsonl", "--queries", d / "eval.jsonl", "--kb", d / "entities.jsonl",
               "--out", d / "report.json", "--figures", d / "fig") == 0
    return d


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_outputs(base_run):
    rep = json.loads((base_run / "report.json").read_text())
    assert set(rep["acc"]) == {"entity/seen", "entity/unseen", "query/seen", "query/unseen"}
    assert rep["n_queries"] == 60
    for name in ("cells.tsv", "accuracy_cells.png", "recall_at_k.png"):
        assert (base_run / "fig" / name).stat().st_size > 0
    for name in ("history.tsv", "loss_curve.png"):
        assert (base_run / "train_fig" / name).stat().st_size > 0
    row = json.loads((base_run / "preds.jsonl").read_text().splitlines()[0])
    assert set(row) >= {"query_id", "identifier", "entity_ids", "retrieved_ids", "logprob", "retrieval_miss"}
    assert len(row["retrieved_ids"]) == 3


def test_pipeline_is_byte_identical_with_jobs(base_run, tmp_path):
    other = pipeline(tmp_path, jobs=3)
    for name in ("entities.jsonl", "train.jsonl", "eval.jsonl", "index.bin", "params.bin", "preds.jsonl",
                 "report.json", "fig/cells.tsv", "fig/accuracy_cells.png", "train_fig/loss_curve.png"):
        assert (other / name).read_bytes() == (base_run / name).read_bytes(), name


def test_full_kb_mode_equals_large_k(base_run, tmp_path):
    common = ["--index", base_run / "index.bin", "--kb", base_run / "entities.jsonl",
              "--queries", base_run / "eval.jsonl", "--scorer", base_run / "params.bin"]
    assert run("decode", *common, "--k", 1000, "--out", tmp_path / "wide.jsonl") == 0
    assert run("decode", *common, "--mode", "constrained-full-kb", "--out", tmp_path / "full.jsonl") == 0
    assert (tmp_path / "wide.jsonl").read_bytes() == (tmp_path / "full.jsonl").read_bytes()


def test_unconstrained_and_retrieve(base_run, tmp_path):
    common = ["--index", base_run / "index.bin", "--kb", base_run / "entities.jsonl",
              "--queries", base_run / "eval.jsonl", "--scorer", base_run / "params.bin"]
    assert run("decode", *common, "--mode", "unconstrained", "--max-len", 24, "--out", tmp_path / "u.jsonl") == 0
    rows = [json.loads(x) for x in (tmp_path / "u.jsonl").read_text().splitlines()]
    assert len(rows) == 60 and all("grounded" in r for r in rows)
    assert run("retrieve", *common, "--k", 5, "--out", tmp_path / "r.jsonl") == 0
    first = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert len(first["retrieved_ids"]) == 5


def test_eval_without_kb(base_run, tmp_path):
    assert run("eval", "--preds", base_run / "preds.jsonl", "--queries", base_run / "eval.jsonl",
               "--out", tmp_path / "r.json") == 0
    with_kb = json.loads((base_run / "report.json").read_text())
    without = json.loads((tmp_path / "r.json").read_text())
    assert without["acc"] == with_kb["acc"]


def test_config_file_and_override(base_run, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 3, "lr": 0.5, "batch_size": 8}))
    assert run("train-toy", "--kb", base_run / "entities.jsonl", "--queries", base_run / "train.jsonl",
               "--out", tmp_path / "p.bin", "--config", cfg, "--steps", 2, "--log-level", "INFO") == 0
    resolved = [r.getMessage() for r in caplog.records if "resolved config" in r.getMessage()]
    cfg_logged = json.loads(resolved[-1].split(": ", 1)[1])
    assert cfg_logged["steps"] == 2 and cfg_logged["lr"] == 0.5 and cfg_logged["batch_size"] == 8


def test_bad_config_key(base_run, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"momentum": 0.9}))
    assert run("train-toy", "--kb", base_run / "entities.jsonl", "--queries", base_run / "train.jsonl",
               "--out", tmp_path / "p.bin", "--config", cfg) == 1


def test_dump_trie(base_run, tmp_path, capsys):
    kb = load_kb(base_run / "entities.jsonl")
    a, b = kb.ids[:2]
    assert run("dump-trie", "--kb", base_run / "entities.jsonl", "--ids", f"{a},{b}") == 0
    out = capsys.readouterr().out
    assert f"-> {a}" in out and f"-> {b}" in out
    assert run("dump-trie", "--kb", base_run / "entities.jsonl", "--ids", "nope") == 1


def test_exit_codes(tmp_path, capsys):
    assert run("decode", "--bogus-flag") == 1
    assert run("no-such-command") == 1
    assert run("build-index", "--kb", tmp_path / "missing.jsonl", "--out", tmp_path / "i.bin") == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("build-index", "--kb", bad, "--out", tmp_path / "i.bin") == 2
    assert "kb" in capsys.readouterr().err


def test_divergence_exit_code(base_run, tmp_path):
    code = run("train-toy", "--kb", base_run / "entities.jsonl", "--queries", base_run / "train.jsonl",
               "--out", tmp_path / "p.bin", "--steps", 50, "--lr", 1e300, "--batch-size", 8)
    assert code == 3


def test_synth_bookkeeping():
    fx = synth_fixture(SynthConfig())
    train_golds = {q.gold_entity_id for q in fx.train}
    assert len(train_golds) == 160 and len(fx.unseen_ids) == 40
    assert not train_golds & set(fx.unseen_ids)
    unseen_eval = {q.gold_entity_id for q in fx.eval if q.split_tag == "unseen"}
    assert unseen_eval == set(fx.unseen_ids)
    assert all((q.gold_entity_id in train_golds) == (q.split_tag == "seen") for q in fx.eval)
    assert len(fx.train) == 2000 and len(fx.eval) == 400
    lengths = [len(e.identifier) for e in fx.kb]
    assert min(lengths) >= 3 and max(lengths) <= 20
    assert len({e.identifier for e in fx.kb}) == 200


def test_synth_is_byte_identical_and_loads_cleanly(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--out-dir", tmp_path / d, "--seed", 5) == 0
    for name in ("entities.jsonl", "train.jsonl", "eval.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kb = load_kb(tmp_path / "a" / "entities.jsonl")
        load_queries(tmp_path / "a" / "eval.jsonl", kb)
    assert len(kb) == 200


def test_synth_infeasible(tmp_path):
    assert run("synth", "--out-dir", tmp_path, "--unseen-fraction", "1.0") == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "groundgen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "dump-trie" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "groundgen", "eval", "--nope"], capture_output=True, text=True)
    assert bad.returncode == 1
