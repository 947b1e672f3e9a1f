import json
import math
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from tracenet.cli import main, random_checker
from tracenet.embed import load_vectors
from tracenet.graph import _load_schema
from tracenet.model import load_model, node_token
from tracenet.pipeline import unique_graphs
from tracenet.cli import _read_rows

TRAIN = ["--widths", "2,3", "--filters", "6", "--hidden", "6", "--max-tokens", "40", "--max-nodes", "30",
         "--epochs", "4", "--batch-size", "16", "--lr", "0.005"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert run("gen", "--graphs", 10, "--variants", 3, "--max-depth", 3, "--out-dir", d) == 0
    assert run("embed", "--dim", 8, "--epochs", 2, "--word-epochs", 2, "--out-dir", d) == 0
    assert run("embed", "--mode", "deepwalk", "--no-words", "--dim", 8, "--epochs", 2, "--out-dir", d) == 0
    assert run("train", "--tasks", "all", "--gamma", 0.7, *TRAIN, "--out-dir", d) == 0
    return d


# ---------------------------------------------------------------- gen


def test_gen_manifest_counts(work):
    manifest = json.loads((work / "manifest.json").read_text())
    jsonschema.validate(manifest, _load_schema("manifest.schema.json"))
    assert manifest["base_graphs"] == 10 and manifest["mutated_graphs"] == 30
    lines = (work / "dataset.jsonl").read_text().splitlines()
    assert sum(manifest["label_histogram"]["counts"]) == manifest["pairs"] == len(lines)


def test_gen_is_byte_identical(work, tmp_path):
    assert run("gen", "--graphs", 10, "--variants", 3, "--max-depth", 3, "--out-dir", tmp_path) == 0
    for name in ("dataset.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (work / name).read_bytes()


# ---------------------------------------------------------------- embed


def test_embed_one_vector_per_node_token(work):
    nodes = load_vectors((work / "nodes-tracewalk.vec").read_bytes())
    graphs = unique_graphs(_read_rows(work / "dataset.jsonl"))
    tokens = {node_token(g, n.id) for g in graphs.values() for n in g.nodes}
    assert set(nodes.tokens) == tokens
    assert (work / "nodes-tracewalk.vec").read_text().splitlines()[0] == f"{len(tokens)} 8"


def test_embed_corpus_files(work):
    walk = (work / "corpus-deepwalk.txt").read_text().splitlines()
    trace = (work / "corpus-tracewalk.txt").read_text().splitlines()
    assert walk[0] == trace[0] and len(walk) > 1
    assert walk[1:] != trace[1:]


def test_embed_default_dim_is_100(tmp_path, work):
    rc = run("embed", "--dataset", work / "dataset.jsonl", "--epochs", 1, "--word-epochs", 1,
             "--max-traces", 5, "--out-dir", tmp_path)
    assert rc == 0
    assert (tmp_path / "words.vec").read_text().splitlines()[0].split()[1] == "100"


def test_embed_is_byte_identical(work, tmp_path):
    assert run("embed", "--dataset", work / "dataset.jsonl", "--dim", 8, "--epochs", 2, "--word-epochs", 2,
               "--out-dir", tmp_path) == 0
    for name in ("nodes-tracewalk.vec", "words.vec", "corpus-tracewalk.txt"):
        assert (tmp_path / name).read_bytes() == (work / name).read_bytes()


# ---------------------------------------------------------------- train and eval


def test_train_outputs(work):
    for task in (1, 2, 3):
        model, meta = load_model(work / f"task{task}" / "model")
        assert meta["config"]["gamma"] == 0.7
        history = json.loads((work / f"task{task}" / "history.json").read_text())
        assert 1 <= len(history["epochs"]) <= 4
    assert load_model(work / "task2" / "model")[0].config.task_mode == "gateways"


def test_train_semantic_none(work, tmp_path):
    rc = run("train", "--dataset", work / "dataset.jsonl", "--words", work / "words.vec", "--semantic-mode", "none",
             *TRAIN, "--out-dir", tmp_path)
    assert rc == 0
    model, meta = load_model(tmp_path / "task3" / "model")
    assert model.config.semantic_mode == "none" and meta["vocab_hashes"]["node"] is None


def test_train_is_byte_identical(work, tmp_path):
    rc = run("train", "--dataset", work / "dataset.jsonl", "--words", work / "words.vec",
             "--nodes", work / "nodes-tracewalk.vec", *TRAIN, "--out-dir", tmp_path)
    assert rc == 0
    assert (tmp_path / "task3" / "model.tnk").read_bytes() == (work / "task3" / "model.tnk").read_bytes()


def test_eval_reports_every_task(work, tmp_path, capsys):
    assert run("eval", "--model-dir", work, "--tasks", "all", "--out-dir", tmp_path) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    jsonschema.validate(report, _load_schema("metrics.schema.json"))
    assert [r["task"] for r in report["rows"]] == [1, 2, 3]
    assert all(r["mae"] >= 0 for r in report["rows"])
    assert report["reference"]["tracenet_task3_all_corpora"]["RGG"] == 0.109
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:3] == ["task", "semantic", "split"] and len(table) == 4


def test_eval_on_train_split_matches_history(work, tmp_path):
    assert run("eval", "--model-dir", work, "--split", "train", "--out-dir", tmp_path) == 0
    mae = json.loads((tmp_path / "metrics.json").read_text())["rows"][0]["mae"]
    bound = json.loads((work / "task3" / "history.json").read_text())["train_mae"]
    assert mae <= bound + 1e-12


def test_eval_rejects_other_vectors(work, tmp_path):
    other = tmp_path / "words.vec"
    other.write_text("1 8\nzzz " + " ".join(["0"] * 8) + "\n")
    assert run("eval", "--model-dir", work, "--words", other, "--out-dir", tmp_path) == 2


# ---------------------------------------------------------------- baseline


def test_baseline_single_draw():
    rng = np.random.default_rng(7)
    p, q = rng.random(1), rng.random(1)
    assert random_checker(1, 7)["estimate"] == abs(p[0] - q[0])


def test_baseline_converges(tmp_path):
    assert run("baseline", "--samples", 1_000_000, "--seed", 3, "--out-dir", tmp_path) == 0
    report = json.loads((tmp_path / "baseline.json").read_text())
    jsonschema.validate(report, _load_schema("baseline.schema.json"))
    sigma = math.sqrt(1 / 18)  # Var|p - q| = 1/6 - 1/9
    assert report["distance_from_third"] < 4 * sigma / math.sqrt(1_000_000) < 0.01
    assert report["displayed_partial_sum"] == pytest.approx(0.3333328333, abs=1e-10)


@pytest.mark.parametrize("n", [1, 2, 5, 40])
def test_riemann_sum_matches_brute_force(n):
    brute = sum(abs(i - j) for i in range(1, n + 1) for j in range(1, n + 1)) / n**3
    assert random_checker(1, 0, riemann_n=n)["riemann_sum"] == pytest.approx(brute, rel=1e-12)


# ---------------------------------------------------------------- gradcheck and errors


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seeds", 2) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 7 and all(" ok " in ln for ln in lines)


def test_gradcheck_fault_fails(capsys):
    assert run("gradcheck", "--seeds", 1, "--inject-fault") == 1
    assert "worst offender" in capsys.readouterr().err


def test_usage_and_io_errors(tmp_path):
    assert run("train", "--tasks", "7", "--out-dir", tmp_path) == 2
    assert run("nonsense") == 2
    assert run("embed", "--dataset", tmp_path / "missing.jsonl", "--out-dir", tmp_path) == 3


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"samples": 10, "seed": 4}))
    assert run("baseline", "--config", cfg, "--out-dir", tmp_path) == 0
    report = json.loads((tmp_path / "baseline.json").read_text())
    assert report["n_samples"] == 10 and report["seed"] == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("baseline", "--config", cfg, "--out-dir", tmp_path) == 2


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "tracenet.cli", "baseline", "--samples", "100", "--out-dir", "/tmp"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "E|p-q|" in out.stdout
