import json
import subprocess
import sys

import numpy as np
import pytest

import synth
from ldpo import clustering
from ldpo.cli import main
from ldpo.core import (FeatureMatrix, LabelVector, load_feature_matrix, load_labels,
                       write_feature_matrix, write_labels, write_patches)


@pytest.fixture
def data(tmp_path):
    x, y = synth.gaussian_mixture(0, 3, n_per=20, d=4, sigma=1.0)
    fm = FeatureMatrix.from_array(x)
    write_feature_matrix(fm, tmp_path / "x.ldpo")
    write_labels(LabelVector.from_labels(y, fm.item_ids), tmp_path / "truth.csv")
    return tmp_path, fm, y


def write_config(path, **overrides):
    cfg = {"k": 3, "max_iterations": 4, "pseudotask": {"hidden_dim": 8, "epochs": 20},
           "dataset": {"features": "x.ldpo", "truth": "truth.csv"}}
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def test_cluster_and_metrics(data, capsys):
    d, fm, y = data
    assert main(["cluster", "--method", "kmeans", "--features", str(d / "x.ldpo"), "--k", "3",
                 "--out", str(d / "km.csv")]) == 0
    labels = load_labels(d / "km.csv")
    assert labels.item_ids == fm.item_ids
    assert json.loads((d / "km.json").read_text())
    capsys.readouterr()
    assert main(["metrics", "--a", str(d / "km.csv"), "--b", str(d / "truth.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"nmi": pytest.approx(1.0), "purity": 1.0}
    assert main(["cluster", "--method", "rim", "--features", str(d / "x.ldpo"), "--k", "9",
                 "--out", str(d / "rim.csv")]) == 0
    assert load_labels(d / "rim.csv").k <= 9


def test_tree_and_keywords(data):
    d, fm, y = data
    proba = FeatureMatrix(np.eye(3)[y] * 0.8 + 0.2 / 3, fm.item_ids)
    write_feature_matrix(proba, d / "p.ldpo")
    assert main(["tree", "--proba", str(d / "p.ldpo"), "--labels", str(d / "truth.csv"),
                 "--out", str(d / "tree.json")]) == 0
    assert len(json.loads((d / "tree.json").read_text())["levels"]) >= 1
    docs = d / "docs.tsv"
    docs.write_text("".join(f"{i}\tfinding{c} shared\n" for i, c in zip(fm.item_ids, y)))
    assert main(["keywords", "--docs", str(docs), "--labels", str(d / "truth.csv"),
                 "--commonality", "1.0", "--out", str(d / "kw.json")]) == 0
    kw = json.loads((d / "kw.json").read_text())
    assert kw["removed_common"] == ["shared"]
    assert kw["clusters"]["0"] == [["finding0", 20]]


@pytest.mark.parametrize("method,extra,dim", [
    ("vlad", ["--k", "3"], 36),
    ("fisher", ["--k", "2"], 48),
    ("patch", ["--k", "3", "--k-top", "4", "--min-support", "0.2"], None)])
def test_encode_patches(tmp_path, method, extra, dim):
    ps, _ = synth.planted_patches(1)
    write_patches(ps, tmp_path / "p.ldpp")
    assert main(["encode", "--method", method, "--input", str(tmp_path / "p.ldpp"),
                 "--out", str(tmp_path / "e.ldpo"), *extra]) == 0
    fm = load_feature_matrix(tmp_path / "e.ldpo")
    assert fm.item_ids == ps.image_ids
    if dim is not None:
        assert fm.dim == dim


def test_encode_pca(data):
    d, fm, _ = data
    assert main(["encode", "--method", "pca", "--input", str(d / "x.ldpo"), "--dim", "2",
                 "--out", str(d / "z.ldpo"), "--model-out", str(d / "pca.ldpm")]) == 0
    assert load_feature_matrix(d / "z.ldpo").dim == 2
    assert main(["encode", "--method", "pca", "--input", str(d / "x.ldpo"),
                 "--out", str(d / "z.ldpo")]) == 1


def test_run(data, capsys):
    d, _, _ = data
    cfg = write_config(d / "cfg.json")
    assert main(["run", "--config", str(cfg), "--out", str(d / "out")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["k"] == 3
    for name in ("labels.csv", "report.json", "timing.json", "features.ldpo"):
        assert (d / "out" / name).exists()


def test_validation_errors_exit_1(data):
    d, _, _ = data
    assert main(["cluster", "--method", "kmeans", "--features", str(d / "x.ldpo"),
                 "--out", str(d / "o.csv")]) == 1
    assert main(["cluster", "--method", "kmeans", "--features", str(d / "missing.ldpo"),
                 "--k", "2", "--out", str(d / "o.csv")]) == 1
    assert main(["bogus"]) == 1
    (d / "bad.ldpo").write_bytes(b"not a feature file")
    assert main(["cluster", "--method", "kmeans", "--features", str(d / "bad.ldpo"), "--k", "2",
                 "--out", str(d / "o.csv")]) == 1
    assert main(["run", "--config", str(write_config(d / "c.json", k=None)),
                 "--out", str(d / "o")]) == 1
    assert main(["run", "--config", str(write_config(d / "c.json", k=500)),
                 "--out", str(d / "o")]) == 1


def test_runtime_error_exit_2(data, monkeypatch):
    d, _, _ = data

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(clustering, "kmeans", boom)
    assert main(["cluster", "--method", "kmeans", "--features", str(d / "x.ldpo"), "--k", "2",
                 "--out", str(d / "o.csv")]) == 2
    assert main(["run", "--config", str(write_config(d / "c.json")), "--out", str(d / "o")]) == 2


def test_module_entry_point(data):
    d, _, _ = data
    r = subprocess.run([sys.executable, "-m", "ldpo", "metrics", "--a", str(d / "truth.csv"),
                        "--b", str(d / "truth.csv")], capture_output=True, text=True)
    assert r.returncode == 0
    assert json.loads(r.stdout)["purity"] == 1.0
