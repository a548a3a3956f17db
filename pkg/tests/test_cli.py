import csv

import pytest
import yaml

from iap import checkpoint as ckpt
from iap.cli import build_parser, main, resolve_config
from iap.config import RunConfig, dump_config, replace

TINY = """\
encoder: {vision_depth: 2, text_depth: 2, width: 16, heads: 2}
stream: {num_domains: 4, classes_per_domain: 4, train_per_class: 8, test_per_class: 8, pretrain_domains: 2}
optim: {epochs: 2}
pretrain: {steps: 20, batch_size: 32}
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def run_dir(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    assert main(["--config", str(tiny_cfg), "--output", str(out), "-q"]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _write_fixture_run(path, A, few_shot=None):
    path.mkdir()
    cfg = replace(RunConfig(), **{"stream.few_shot": few_shot})
    (path / "config.yaml").write_text(dump_config(cfg))
    names = [f"d{j}" for j in range(len(A))]
    (path / "accuracy_matrix.csv").write_text(
        "session," + ",".join(names) + "\n" + "".join(f"{s}," + ",".join(map(str, r)) + "\n" for s, r in enumerate(A)))
    (path / "metrics.csv").write_text("task,name,transfer,average,last,zero_shot,open_layers\n"
                                      + "".join(f"{j},{n},,,,0.1,\n" for j, n in enumerate(names)))
    (path / "gate_usage.csv").write_text("task,name,mean_open_layers\n"
                                         + "".join(f"{j},{n},{j + 1}.0\n" for j, n in enumerate(names)))


class TestFlags:
    def _resolve(self, *argv):
        return resolve_config(build_parser().parse_args(list(argv)))

    def test_each_flag_maps_to_one_field(self):
        base = self._resolve()
        cases = {
            ("--seed", "4"): ("seed", 4),
            ("--order", "order-2"): ("stream.order", "order-2"),
            ("--few-shot", "16"): ("stream.few_shot", 16),
            ("--gate-mode", "random"): ("gate.mode", "random"),
            ("--ablate", "ia_gp"): ("gate.mode", "always_on"),
            ("--ablate", "ia_cddp"): ("routing.use_cddp", False),
            ("--output", "x/y"): ("output_dir", "x/y"),
        }
        for argv, (field, value) in cases.items():
            assert self._resolve(*argv) == replace(base, **{field: value})

    def test_conflicting_ablation(self):
        assert main(["--ablate", "ia_gp", "--gate-mode", "hard"]) == 2


class TestRun:
    def test_files(self, run_dir):
        for name in ("config.yaml", "checkpoint.iap", "accuracy_matrix.csv", "metrics.csv", "gate_usage.csv",
                     "routing_telemetry.csv"):
            assert (run_dir / name).is_file(), name
        assert not [p for p in run_dir.iterdir() if p.name.endswith(".tmp")]

    def test_accuracy_grid(self, run_dir):
        rows = _rows(run_dir / "accuracy_matrix.csv")
        assert rows[0] == ["session", "domain0", "domain1", "domain2", "domain3"]
        assert len(rows) == 5 and all(len(r) == 5 for r in rows)

    def test_metrics_layout(self, run_dir):
        rows = _rows(run_dir / "metrics.csv")
        assert rows[0][:5] == ["task", "name", "transfer", "average", "last"]
        assert rows[1][2] == "" and rows[-1][0] == "mean"

    def test_checkpoint_contents(self, run_dir):
        tensors, meta = ckpt.load(run_dir / "checkpoint.iap")
        assert meta["task_names"] == ["domain0", "domain1", "domain2", "domain3"]
        assert {n.split("/")[0] for n in tensors} == {"backbone", "prompt", "gate", "stats"}
        assert "stats/3/3/sigma" in tensors

    def test_snapshot_reruns_identically(self, run_dir, tmp_path):
        snap = yaml.safe_load((run_dir / "config.yaml").read_text())
        snap["output_dir"] = str(tmp_path / "again")
        snap["pretrain"]["cache_dir"] = str(run_dir)
        path = tmp_path / "snap.yaml"
        path.write_text(yaml.safe_dump(snap))
        assert main(["--config", str(path), "-q"]) == 0
        assert (tmp_path / "again" / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()

    def test_ablation_recorded(self, tiny_cfg, run_dir, tmp_path):
        cfg_text = TINY + f"pretrain: {{steps: 20, batch_size: 32, cache_dir: {run_dir}}}\n"
        cfg_text = cfg_text.replace("pretrain: {steps: 20, batch_size: 32}\n", "")
        path = tmp_path / "c.yaml"
        path.write_text(cfg_text)
        out = tmp_path / "abl"
        assert main(["--config", str(path), "--ablate", "ia_gp", "--output", str(out), "-q"]) == 0
        assert yaml.safe_load((out / "config.yaml").read_text())["gate"]["mode"] == "always_on"
        opens = [float(r[2]) for r in _rows(out / "gate_usage.csv")[1:]]
        assert opens == [2.0] * 4

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("optim: {epochs: -1}\n")
        assert main(["--config", str(path)]) == 2
        assert "optim" in capsys.readouterr().err
        path.write_text("routing: {colour: 1}\n")
        assert main(["--config", str(path)]) == 2
        assert "routing: unknown key(s) colour" in capsys.readouterr().err


class TestReport:
    def test_real_run(self, run_dir, capsys):
        assert main(["--report", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "Transfer" in out and "Last" in out and "full-shot" in out
        assert (run_dir / "gate_usage_bars.csv").is_file()

    def test_hand_matrix(self, tmp_path, capsys):
        _write_fixture_run(tmp_path / "r", [[.9, .5, .4], [.8, .9, .5], [.7, .8, .9]])
        assert main(["--report", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert "Transfer 47.500  Avg 71.111  Last 80.000" in out
        bars = _rows(tmp_path / "r" / "gate_usage_bars.csv")
        assert [r[2] for r in bars[1:]] == ["1.000000", "2.000000", "3.000000"]

    def test_saturated(self, tmp_path, capsys):
        _write_fixture_run(tmp_path / "r", [[1, 1], [1, 1]])
        assert main(["--report", str(tmp_path / "r")]) == 0
        assert "Transfer 100.000  Avg 100.000  Last 100.000" in capsys.readouterr().out

    def test_few_shot_flag(self, tmp_path, capsys):
        _write_fixture_run(tmp_path / "r", [[.5]], few_shot=16)
        assert main(["--report", str(tmp_path / "r")]) == 0
        assert "16-shot" in capsys.readouterr().out

    @pytest.mark.parametrize("missing", ["accuracy_matrix.csv", "metrics.csv", "gate_usage.csv", "config.yaml"])
    def test_missing_file_named(self, tmp_path, capsys, missing):
        _write_fixture_run(tmp_path / "r", [[.5]])
        (tmp_path / "r" / missing).unlink()
        assert main(["--report", str(tmp_path / "r")]) != 0
        assert missing in capsys.readouterr().err
