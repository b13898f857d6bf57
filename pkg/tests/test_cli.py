import csv
import hashlib
import json

import pytest

from isdlab.cli import main
from isdlab.data import read_manifest
from isdlab.experiments import ReportError, load_results, markdown_table, summarize

CONFIG = """
[data]
image_size = 32
size_range = [0.3, 0.5]
seed = 4
n_labeled = 6
n_unlabeled = 8
n_eval = 4

[train]
batch_size = 4
max_iterations = 4
ramp_up = 2
eval_every = 2
checkpoint_every = 4
lr = 0.01

[arch]
channels = [4, 4, 4, 4]
groups = 2
scales = [0.3, 0.6]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.toml").write_text(CONFIG)
    assert main(["generate", "--config", str(root / "cfg.toml"), "--out", str(root / "ds")]) == 0
    return root


def _hashes(d):
    return {p.relative_to(d): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.rglob("*")) if p.is_file()}


def test_generate_is_reproducible(workspace, tmp_path):
    assert main(["generate", "--config", str(workspace / "cfg.toml"), "--out", str(tmp_path / "again")]) == 0
    assert _hashes(workspace / "ds") == _hashes(tmp_path / "again")


def test_generate_refuses_non_empty(workspace, capsys):
    assert main(["generate", "--config", str(workspace / "cfg.toml"), "--out", str(workspace / "ds")]) == 2
    assert "force" in capsys.readouterr().err


def test_generate_n_labeled(workspace, tmp_path):
    out = tmp_path / "small"
    assert main(["generate", "--config", str(workspace / "cfg.toml"), "--out", str(out), "--n-labeled", "3"]) == 0
    assert len(read_manifest(out).labeled) == 3


def _train(workspace, out, *flags):
    argv = ["train", "--config", str(workspace / "cfg.toml"), "--data", str(workspace / "ds"), "--out", str(out)]
    return main(argv + list(flags))


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_supervised_has_no_unsupervised_terms(workspace, tmp_path):
    assert _train(workspace, tmp_path / "sup", "--mode", "supervised") == 0
    rows = _rows(tmp_path / "sup" / "train_metrics.csv")
    assert len(rows) == 4
    for r in rows:
        for k in ("l_csd_cls", "l_csd_loc", "l_type1", "l_type2_cls", "l_type2_loc", "l_isd"):
            assert float(r[k]) == 0.0


def test_train_type2_only(workspace, tmp_path):
    assert _train(workspace, tmp_path / "t2", "--mode", "isd", "--types", "type2") == 0
    assert all(float(r["l_type1"]) == 0.0 for r in _rows(tmp_path / "t2" / "train_metrics.csv"))


def test_train_config_error(workspace, tmp_path, capsys):
    assert _train(workspace, tmp_path / "bad", "--alpha", "-1") == 2
    assert "alpha" in capsys.readouterr().err


def test_eval_report(workspace, tmp_path):
    assert _train(workspace, tmp_path / "run", "--mode", "csd+isd") == 0
    ckpt = tmp_path / "run" / "checkpoint_000004.pt"
    reports = []
    for name in ("a.json", "b.json"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(workspace / "ds"),
                     "--out", str(tmp_path / name)]) == 0
        reports.append(json.loads((tmp_path / name).read_text()))
    assert reports[0] == reports[1]
    assert reports[0]["iou_threshold"] == 0.5 and reports[0]["iteration"] == 4
    assert set(reports[0]["ap"]) <= {"ellipse", "rectangle", "triangle"}


def test_eval_missing_checkpoint(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(workspace / "ds")]) == 2


def _fake_run(path, mode, seed, final, alpha=100.0):
    path.mkdir(parents=True)
    with open(path / "eval_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mode", "types", "alpha", "seed", "ap_1", "map"])
        w.writerow([5, mode, "both", alpha, seed, 0.1, 0.1])
        w.writerow([10, mode, "both", alpha, seed, final, final])
    return path


class TestReport:
    def test_single_supervised(self, tmp_path):
        run = _fake_run(tmp_path / "s", "supervised", 0, 0.5)
        table = markdown_table(summarize(load_results([run])))
        assert table.count("\n") == 3 and "+0.00" in table

    def test_delta_and_std(self, tmp_path, capsys):
        runs = [_fake_run(tmp_path / f"s{i}", "supervised", i, v) for i, v in enumerate((0.5, 0.6, 0.7))]
        runs += [_fake_run(tmp_path / f"c{i}", "csd+isd", i, v) for i, v in enumerate((0.6, 0.7, 0.8))]
        summary = summarize(load_results(runs))
        sup, ssl = summary
        assert sup.mean == pytest.approx(0.6) and ssl.delta == pytest.approx(0.1)
        assert ssl.std == pytest.approx((2 / 3) ** 0.5 * 0.1)
        assert main(["report", *map(str, runs), "--out", str(tmp_path / "rep")]) == 0
        assert "+10.00" in (tmp_path / "rep" / "report.md").read_text()
        assert (tmp_path / "rep" / "map_curves.png").stat().st_size > 0

    def test_schema_mismatch(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,map\n1,0.5\n")
        with pytest.raises(ReportError):
            load_results([bad])
        assert main(["report", str(bad), "--out", str(tmp_path / "rep")]) == 2

    def test_report_from_real_run(self, workspace, tmp_path):
        assert _train(workspace, tmp_path / "r", "--mode", "isd") == 0
        assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "loss_curves.png").exists()


def test_sweep(workspace, tmp_path):
    argv = ["sweep", "--config", str(workspace / "cfg.toml"), "--data", str(workspace / "ds"),
            "--modes", "supervised", "csd+isd", "--alphas", "1", "100", "--seeds", "0", "--out", str(tmp_path)]
    assert main(argv) == 0
    names = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert names == ["csd-isd_both_a100_s0", "csd-isd_both_a1_s0", "supervised_both_a1_s0"]
    before = (tmp_path / "csd-isd_both_a1_s0" / "train_metrics.csv").stat().st_mtime_ns
    assert main(argv + ["--resume"]) == 0
    assert (tmp_path / "csd-isd_both_a1_s0" / "train_metrics.csv").stat().st_mtime_ns == before
    assert (tmp_path / "report.md").exists()
