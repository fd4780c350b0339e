import csv
import json

import numpy as np
import pytest

from kpeflow import __version__
from kpeflow.cli import main, resolve_config
from kpeflow.errors import ValidationError
from kpeflow.fields import GaussianOTField


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def ot_model(tmp_path):
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 3))
    f = GaussianOTField([1.0, -1.0, 0.5], a @ a.T + np.eye(3))
    p = tmp_path / "ot.json"
    p.write_text(json.dumps(f.to_dict()))
    return p, f.params.expected_kpe()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg = resolve_config("sample", {"n": 50, "steps": 7}, {"n": 60})
        assert cfg["n"] == 60 and cfg["steps"] == 7 and cfg["method"] == "euler"

    def test_unknown_key_named(self, tmp_path, capsys):
        c = tmp_path / "c.json"
        c.write_text('{"stepz": 3}')
        assert run("sample", "--config", c, "--model", "oracle:scaling") == 2
        assert "stepz" in capsys.readouterr().err

    @pytest.mark.parametrize("bad", [{"n": 0}, {"method": "rk4"}, {"guidance": "1,-2"}, {"steps": 2.5}])
    def test_bad_values(self, bad):
        with pytest.raises(ValidationError, match=next(iter(bad))):
            resolve_config("sample", bad)

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            run("sample", "--bogus")
        assert e.value.code == 2

    def test_missing_model(self, tmp_path):
        assert run("sample", "--out", tmp_path) == 2


class TestTrainSample:
    def test_train_writes_model_and_log(self, tmp_path):
        out = tmp_path / "m"
        assert run("train", "--steps", 30, "--batch-size", 16, "--out", out) == 0
        doc = json.loads((out / "model.json").read_text())
        assert doc["kind"] == "model" and doc["config"]["steps"] == 30
        assert doc["tool_version"] == __version__
        assert len(read_csv(out / "train_log.csv")) == 30
        assert run("sample", "--model", out / "model.json", "--n", 20, "--steps", 5, "--out", out) == 0
        assert len(read_csv(out / "energies.csv")) == 20

    def test_gaussian_ot_mean(self, ot_model, tmp_path):
        path, expected = ot_model
        assert run("sample", "--model", path, "--n", 4096, "--steps", 50, "--out", tmp_path) == 0
        (entry,) = json.loads((tmp_path / "sample_summary.json").read_text())["results"]["scales"]
        assert entry["half_w2_squared"] == pytest.approx(expected, rel=1e-12)
        assert entry["relative_error"] < 0.03

    def test_same_seed_identical_bytes(self, ot_model, tmp_path):
        path, _ = ot_model
        for d in ("a", "b"):
            assert run("sample", "--model", path, "--n", 300, "--steps", 20, "--seed", 9, "--out", tmp_path / d) == 0
        assert (tmp_path / "a" / "energies.csv").read_bytes() == (tmp_path / "b" / "energies.csv").read_bytes()
        assert (tmp_path / "a" / "trajectories.jsonl").read_bytes() == (tmp_path / "b" / "trajectories.jsonl").read_bytes()

    def test_guidance_files(self, tmp_path):
        assert run("sample", "--model", "oracle:two-class", "--n", 40, "--steps", 5, "--guidance", "1,1.5,4", "--out", tmp_path) == 0
        for w in ("1", "1.5", "4"):
            assert len(read_csv(tmp_path / f"energies_w{w}.csv")) == 40

    def test_guidance_needs_conditional(self, tmp_path):
        assert run("sample", "--model", "oracle:scaling", "--guidance", "2", "--out", tmp_path) == 2


class TestIngest:
    def test_ok_and_tampered(self, tmp_path, capsys):
        assert run("sample", "--model", "oracle:scaling", "--n", 10, "--steps", 4, "--out", tmp_path) == 0
        path = tmp_path / "trajectories.jsonl"
        assert run("ingest", path, "--out", tmp_path / "ing") == 0
        assert (tmp_path / "ing" / "energies.csv").read_bytes() == (tmp_path / "energies.csv").read_bytes()
        lines = path.read_text().splitlines()
        obj = json.loads(lines[3])
        obj["kpe"] += 1.0
        lines[3] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert run("ingest", path) == 3
        assert "line 4" in capsys.readouterr().err


@pytest.fixture
def scaling_records(tmp_path):
    assert run("sample", "--model", "oracle:scaling", "--n", 400, "--steps", 20, "--dump-states", "--out", tmp_path) == 0
    return tmp_path / "trajectories.jsonl"


class TestAnalyzeDensity:
    def test_analytic_scaling_is_perfectly_anticorrelated(self, scaling_records, tmp_path):
        out = tmp_path / "d"
        assert run("analyze-density", scaling_records, "--density", "analytic", "--model", "oracle:scaling", "--out", out) == 0
        doc = json.loads((out / "density_analytic.json").read_text())
        assert doc["results"]["report"]["spearman_rho"] == -1.0
        assert doc["config"]["density"] == ["analytic"]
        assert len(read_csv(out / "density_analytic_top10.csv")) == 40

    def test_two_methods_share_embedding(self, scaling_records, tmp_path):
        out = tmp_path / "d"
        assert run("analyze-density", scaling_records, "--density", "knn,kde", "--k", 20, "--out", out) == 0
        a, b = read_csv(out / "density_knn_scatter.csv"), read_csv(out / "density_kde_scatter.csv")
        assert [(r["u"], r["v"]) for r in a] == [(r["u"], r["v"]) for r in b]
        assert [r["log_density"] for r in a] != [r["log_density"] for r in b]
        assert len(read_csv(out / "density_kde_grid.csv")) == 40 * 40

    def test_too_few_samples(self, tmp_path):
        assert run("sample", "--model", "oracle:scaling", "--n", 50, "--steps", 3, "--dump-states", "--out", tmp_path) == 0
        assert run("analyze-density", tmp_path / "trajectories.jsonl", "--out", tmp_path) == 2

    def test_no_states(self, tmp_path):
        assert run("sample", "--model", "oracle:scaling", "--n", 150, "--steps", 3, "--out", tmp_path) == 0
        path = tmp_path / "trajectories.jsonl"
        objs = [json.loads(s) for s in path.read_text().splitlines()]
        for o in objs:
            del o["final_features"]
        path.write_text("".join(json.dumps(o) + "\n" for o in objs))
        assert run("analyze-density", path, "--out", tmp_path) == 2


class TestSemanticsAndReport:
    def test_pipeline(self, tmp_path, capsys):
        s = tmp_path / "s"
        assert run("sample", "--model", "oracle:two-class", "--n", 150, "--steps", 10, "--guidance", "1,4", "--dump-states", "--out", s) == 0
        sem = tmp_path / "sem"
        recs = [s / "trajectories_w1.jsonl", s / "trajectories_w4.jsonl"]
        capsys.readouterr()
        assert run("analyze-semantics", *recs, "--mixture", "two-class", "--out", sem) == 0
        table = capsys.readouterr().out
        assert all(col in table for col in ("low mean", "high mean", "delta", "t", "p", "d"))
        tables = json.loads((sem / "semantics.json").read_text())["results"]["tables"]
        assert [t["guidance_scale"] for t in tables] == [1.0, 4.0]
        for t in tables:
            assert np.isfinite([t["low_mean"], t["high_mean"], t["delta_mu"], t["t"], t["p"], t["cohens_d"]]).all()
        rows = read_csv(sem / "margins.csv")
        assert len(rows) == 300 and {r["tercile"] for r in rows} == {"low", "mid", "high"}

        den = tmp_path / "den"
        assert run("analyze-density", recs[0], "--out", den) == 0
        rep = tmp_path / "rep"
        assert run("report", den / "density_kde.json", sem / "semantics.json", "--out", rep) == 0
        doc = json.loads((rep / "report.json").read_text())
        assert set(doc["results"]["sections"]) == {"density", "semantics"}
        summary = (rep / "summary.txt").read_text()
        assert "density" in summary and "w=4" in summary

        single = tmp_path / "single"
        assert run("report", sem / "semantics.json", "--out", single) == 0
        (only,) = json.loads((single / "report.json").read_text())["results"]["sections"]["semantics"]
        assert only["results"] == json.loads((sem / "semantics.json").read_text())["results"]

    def test_unlabeled_records(self, scaling_records, tmp_path):
        assert run("analyze-semantics", scaling_records, "--mixture", "two-class", "--out", tmp_path) == 2

    def test_conflicting_versions(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        a.write_text(json.dumps({"schema_version": 1, "kind": "density", "results": {}}))
        b.write_text(json.dumps({"schema_version": 2, "kind": "semantics", "results": {}}))
        assert run("report", a, b, "--out", tmp_path) == 2
        err = capsys.readouterr().err
        assert "version 1" in err and "version 2" in err
