import json

import pytest

from ccalab.cli import main
from ccalab.config import parse_config
from ccalab.io import read_jsonl
from ccalab.pipeline import run_pipeline

SMALL = """
[run]
out_dir = {out}
seed = 3
record_every = 50
data_mode = {mode}
dataset_size = 2000
[spec]
family = random-dirichlet
seed = 2
V = 2
N = 2
C = 2
[pretrain]
steps = 300
lr = {pre_lr}
batch_size = 64
[align]
loss = cca
beta = 0.5
lam = 1.0
steps = {align_steps}
lr = 0.5
lr_scale = inv_beta_sq
batch_size = 64
[guidance]
kind = cfg
s = 1.0
[sweep]
axis = cfg_s, cca_lambda, cca_cfg_s
grid_cfg_s = 0, 1, 2
grid_cca_lambda = 0, 1, 10
grid_cca_cfg_s = 0, 1
"""


def small_cfg(out, mode="exact", align_steps=100):
    return parse_config(SMALL.format(out=out, mode=mode, align_steps=align_steps,
                                     pre_lr=4.0 if mode == "exact" else 1.0))


def metrics(out):
    return {r["run_id"]: r for r in read_jsonl(out / "metrics.jsonl")}


class TestPipeline:
    def test_outputs_and_manifest(self, tmp_path):
        assert run_pipeline(small_cfg(tmp_path / "a")) == 0
        m = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert all(m["stages"][s]["status"] == "done" for s in ("spec", "pretrain", "align", "eval", "sweep"))
        for f in ("pretrained.model", "aligned.model", "align_trajectory.jsonl", "metrics.csv", "sweep.csv",
                  "comparison.csv"):
            assert (tmp_path / "a" / f).is_file()
        assert set(metrics(tmp_path / "a")) == {"pretrained", "aligned", "guided"}

    def test_zero_align_steps_matches_baseline(self, tmp_path):
        run_pipeline(small_cfg(tmp_path / "a", align_steps=0), until="eval")
        m = metrics(tmp_path / "a")
        assert m["aligned"]["kl_to_target"] == m["pretrained"]["kl_to_target"]

    @pytest.mark.parametrize("mode", ["exact", "empirical"])
    def test_deterministic_and_resumable(self, tmp_path, mode):
        run_pipeline(small_cfg(tmp_path / "a", mode))
        run_pipeline(small_cfg(tmp_path / "b", mode), jobs=2)
        assert run_pipeline(small_cfg(tmp_path / "c", mode), stop_after="pretrain") == 0
        assert not (tmp_path / "c" / "metrics.jsonl").exists()
        run_pipeline(small_cfg(tmp_path / "c", mode))
        for f in ("metrics.jsonl", "sweep.jsonl", "aligned.model", "align_trajectory.jsonl"):
            ref = (tmp_path / "a" / f).read_bytes()
            assert (tmp_path / "b" / f).read_bytes() == ref
            assert (tmp_path / "c" / f).read_bytes() == ref

    def test_completed_stages_are_skipped(self, tmp_path):
        cfg = small_cfg(tmp_path / "a")
        run_pipeline(cfg, until="align")
        stamp = (tmp_path / "a" / "aligned.model").stat().st_mtime_ns
        run_pipeline(cfg, until="eval")
        assert (tmp_path / "a" / "aligned.model").stat().st_mtime_ns == stamp

    def test_failure_recorded(self, tmp_path):
        cfg = small_cfg(tmp_path / "a")
        run_pipeline(cfg, until="pretrain")
        (tmp_path / "a" / "pretrained.model").write_text("garbage\n")
        m = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert run_pipeline(cfg) == 1
        m = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert m["stages"]["align"]["status"] == "failed"
        assert "model" in m["stages"]["align"]["diagnostics"]

    def test_config_change_reruns(self, tmp_path):
        run_pipeline(small_cfg(tmp_path / "a"), until="eval")
        before = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        cfg = parse_config(SMALL.format(out=tmp_path / "a", mode="exact", align_steps=5, pre_lr=4.0))
        run_pipeline(cfg, until="eval")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != before


class TestCLI:
    def test_verify_passes_and_is_deterministic(self, capsys):
        assert main(["verify"]) == 0
        first = capsys.readouterr().out
        assert main(["verify"]) == 0
        assert capsys.readouterr().out == first
        assert "FAIL" not in first

    def test_verify_corrupt_logit(self, capsys):
        assert main(["verify", "--corrupt-logit"]) == 1
        out = capsys.readouterr().out
        assert "FAIL" in out and "slot (row=0, position=2, prefix=0)" in out

    def test_run_subcommands(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text(SMALL.format(out="unused", mode="exact", align_steps=20, pre_lr=4.0))
        out = tmp_path / "out"
        assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
        assert (out / "pretrained.model").exists() and not (out / "aligned.model").exists()
        assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "9", "--record-every", "5"]) == 0
        steps = [r["step"] for r in read_jsonl(out / "align_trajectory.jsonl")]
        assert steps == [0, 5, 10, 15, 20]
        csv_path = tmp_path / "plot.csv"
        assert main(["emit-plot-data", str(out / "sweep.jsonl"), "--kind", "tradeoff_curve", "-o", str(csv_path)]) == 0
        assert csv_path.read_text().startswith("axis_value,fidelity,diversity")

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[align]\ndropout_prob = 2\n")
        assert main(["run", "--config", str(cfg)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_emit_missing_file(self, tmp_path, capsys):
        assert main(["emit-plot-data", str(tmp_path / "missing.jsonl")]) == 2
        assert "missing.jsonl" in capsys.readouterr().err
