import csv
import json

import pytest

from adagauss import cli
from adagauss.errors import NotPositiveDefinite, RunFailure

TINY = """
[synthetic]
input_dim = 8
classes_per_task = 2
num_tasks = {tasks}
samples_per_class = 60
cluster_separation = 2.0

[hyperparams]
latent_dim = 4
hidden_dims = [16]
projector_factor = 16
epochs = 3
lr_milestones = [2]
batch_size = 16
lr = 0.01
adapter_epochs = 3
adapter_milestones = [2]
n_samples = 500
lam = 1.0
head_samples = 50
head_epochs = 2

[run]
seeds = {seeds}
"""


def write_config(tmp_path, tasks=2, seeds="[0]", extra="", name="config.toml"):
    path = tmp_path / name
    path.write_text(TINY.format(tasks=tasks, seeds=seeds) + extra)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRun:
    def test_minimal_writes_three_artifacts(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", str(write_config(tmp_path)), "--out", str(out)]) == 0
        for name in cli.RUN_ARTIFACTS:
            assert (out / name).is_file()

    def test_metrics_schema(self, tmp_path):
        out = tmp_path / "out"
        cli.main(["run", str(write_config(tmp_path)), "--out", str(out)])
        rows = read_csv(out / "metrics.csv")
        assert tuple(rows[0]) == cli.METRICS_HEADER
        body = rows[1:]
        keys = [(int(r[0]), int(r[1]), r[3]) for r in body]
        assert keys == sorted(keys)
        assert all(float(r[4]) == float(f"{float(r[4]):.17g}") for r in body)

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        path = write_config(tmp_path, extra="")
        path.write_text(path.read_text().replace("lam = 1.0", "lamda = 1.0"))
        assert cli.main(["run", str(path), "--out", str(tmp_path / "out")]) == 2
        assert "lamda" in capsys.readouterr().err

    def test_two_seeds_report_stats(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", str(write_config(tmp_path, seeds="[0, 1]")), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["per_seed"]) == {"0", "1"}
        per_seed = [report["per_seed"][s]["a_last"] for s in ("0", "1")]
        summary = report["summary"]["a_last"]
        assert summary["mean"] == pytest.approx(sum(per_seed) / 2)
        assert summary["std"] == pytest.approx(abs(per_seed[0] - per_seed[1]) / 2 ** 0.5)
        for entry in report["aggregate"].values():
            assert entry["n"] == 2 and entry["std"] is not None
        assert set(report["per_seed"]["0"]["wall_time"]["1"]) >= {"train", "eval"}

    def test_overwrite_guard(self, tmp_path, capsys):
        config, out = write_config(tmp_path), tmp_path / "out"
        assert cli.main(["run", str(config), "--out", str(out)]) == 0
        before = (out / "metrics.csv").read_bytes()
        assert cli.main(["run", str(config), "--out", str(out)]) == 2
        assert "--overwrite" in capsys.readouterr().err
        assert (out / "metrics.csv").read_bytes() == before
        assert cli.main(["run", str(config), "--out", str(out), "--overwrite"]) == 0

    def test_resolved_config_reproduces_metrics(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", str(write_config(tmp_path)), "--out", str(first)]) == 0
        assert cli.main(["run", str(first / "resolved_config.toml"), "--out", str(second)]) == 0
        assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()

    def test_runtime_failure_exit_1(self, tmp_path, monkeypatch, capsys):
        def failing(*args, **kwargs):
            raise RunFailure(2, "eval", NotPositiveDefinite("pivot 3"))

        monkeypatch.setattr(cli, "run", failing)
        assert cli.main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "out")]) == 1
        err = capsys.readouterr().err
        assert "task 2" in err and "phase eval" in err
        assert not (tmp_path / "out" / "metrics.csv").exists()

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("ADAGAUSS_THREADS", "1")
        assert cli.worker_count(5) == 1
        monkeypatch.setenv("ADAGAUSS_THREADS", "4")
        assert cli.worker_count(2) == 2
        monkeypatch.setenv("ADAGAUSS_THREADS", "zero")
        with pytest.raises(cli.InvalidConfig):
            cli.worker_count(2)


class TestAblate:
    def test_two_by_two_grid(self, tmp_path):
        extra = '\n[grid]\nclassifier = ["bayes_full", "nmc"]\nadapt_mode = ["full", "none"]\n'
        out = tmp_path / "out"
        assert cli.main(["ablate", str(write_config(tmp_path, extra=extra)), "--out", str(out)]) == 0
        rows = read_csv(out / "ablation.csv")
        assert [(r[1], r[2]) for r in rows[1:]] == [("bayes_full", "full"), ("bayes_full", "none"),
                                                    ("nmc", "full"), ("nmc", "none")]
        assert all(r[-1] == "ok" and 0.0 <= float(r[7]) <= 1.0 for r in rows[1:])
        assert len(read_csv(out / "ablation_runs.csv")) == 5

    def test_components_eight_rows(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["ablate", str(write_config(tmp_path, extra='\n[grid]\npreset = "components"\n')), "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "ablation.csv")[1:]
        assert len(rows) == 8
        assert [(r[1], r[2], r[3]) for r in rows] == [
            ("nmc", "mean_only", "on"), ("nmc", "full", "on"), ("bayes_diag", "full", "on"),
            ("bayes_full", "none", "off"), ("bayes_full", "cov_only", "on"), ("bayes_full", "mean_only", "on"),
            ("bayes_full", "full", "off"), ("bayes_full", "full", "on")]

    def test_empty_dimension_exit_2(self, tmp_path, capsys):
        path = write_config(tmp_path, extra="\n[grid]\nclassifier = []\n")
        assert cli.main(["ablate", str(path), "--out", str(tmp_path / "out")]) == 2
        assert "grid.classifier" in capsys.readouterr().err

    def test_requires_grid(self, tmp_path):
        assert cli.main(["ablate", str(write_config(tmp_path)), "--out", str(tmp_path / "out")]) == 2


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("diag")
    out = base / "out"
    assert cli.main(["run", str(write_config(base, tasks=3)), "--out", str(out)]) == 0
    return out


class TestDiagnose:
    def test_series_per_task(self, run_dir):
        assert cli.main(["diagnose", str(run_dir)]) == 0
        rows = read_csv(run_dir / "diagnostics" / "representation_strength.csv")
        assert [int(r[1]) for r in rows[1:]] == [1, 2, 3]
        cov = read_csv(run_dir / "diagnostics" / "cov_rank.csv")[1:]
        assert sorted({int(r[1]) for r in cov}) == [1, 2, 3]
        assert all(float(r[3]) == 4.0 for r in cov)

    def test_idempotent(self, run_dir):
        assert cli.main(["diagnose", str(run_dir)]) == 0
        first = {p.name: p.read_bytes() for p in (run_dir / "diagnostics").iterdir()}
        assert cli.main(["diagnose", str(run_dir)]) == 0
        second = {p.name: p.read_bytes() for p in (run_dir / "diagnostics").iterdir()}
        assert first == second and len(first) == 6

    @pytest.mark.parametrize("name", ["extractor_task002.agnet", "memory_task002.agmem"])
    def test_tampered_magic(self, tmp_path, name, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", str(write_config(tmp_path)), "--out", str(out)]) == 0
        target = out / "checkpoints" / "seed_0" / name
        raw = bytearray(target.read_bytes())
        raw[:6] = b"XXXXXX"
        target.write_bytes(bytes(raw))
        assert cli.main(["diagnose", str(out)]) != 0
        assert "bad magic" in capsys.readouterr().err

    def test_not_a_run_dir(self, tmp_path):
        assert cli.main(["diagnose", str(tmp_path)]) == 1
