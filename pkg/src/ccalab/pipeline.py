"""Staged experiment runner with an on-disk manifest.

Stages: spec -> pretrain -> align -> eval -> sweep. Each stage reads its
inputs from the output directory and writes its outputs atomically, so a
rerun skips finished stages and an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .alignment import Objective, Oracle, train
from .config import AXES, ExperimentConfig, serialize_config
from .guidance import CFGV2_SCHEDULE, GuidanceSpec, classifier_guided_sequence_distribution, train_classifier, train_classifier_exact
from .io import atomic_write_text, dumps_row, write_jsonl
from .metrics import CSV_COLUMNS, MetricsRecord, evaluate_policy
from .model import MODEL_FORMAT_VERSION, TabularARModel
from .oracle import SPEC_FORMAT_VERSION, TrueDistributionSpec, make_spec
from .plotdata import emit_plot_data
from .seeding import STAGE_ALIGN, STAGE_DATA, STAGE_EVAL, STAGE_PRETRAIN, derive_rng, derive_seed
from .space import SequenceSpace
from .sweep import align_objective, best_by_kind, frontier_gap, guidance_for, guided_tables, tradeoff_sweep

log = logging.getLogger(__name__)

STAGES = ("spec", "pretrain", "align", "eval", "sweep")
MANIFEST = "manifest.json"
FORMAT_VERSIONS = {"model": MODEL_FORMAT_VERSION, "spec": SPEC_FORMAT_VERSION, "metrics": 1, "manifest": 1}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def records_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = r.to_row()
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    return buf.getvalue()


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        self.out = Path(cfg.run.out_dir)
        self.manifest_path = self.out / MANIFEST
        self.diagnostics = ""

    # manifest

    def _load_manifest(self) -> dict:
        fresh = {"config_hash": self.cfg.hash(), "format_versions": FORMAT_VERSIONS, "revision": self.cfg.run.revision,
                 "started_at": _now(), "finished_at": None, "stages": {}}
        if self.manifest_path.is_file():
            with open(self.manifest_path) as fh:
                old = json.load(fh)
            if old.get("config_hash") == fresh["config_hash"] and old.get("format_versions") == FORMAT_VERSIONS:
                old["started_at"] = fresh["started_at"]
                return old
            log.info("config changed since the last run in %s; starting over", self.out)
        return fresh

    def _save_manifest(self, m: dict) -> None:
        atomic_write_text(self.manifest_path, json.dumps(m, indent=2, sort_keys=True) + "\n")

    def _done(self, m: dict, stage: str) -> bool:
        st = m["stages"].get(stage)
        return bool(st) and st["status"] == "done" and all((self.out / p).is_file() for p in st["outputs"])

    # shared inputs

    def spec(self) -> TrueDistributionSpec:
        return TrueDistributionSpec.load(self.out / "spec.txt")

    def data(self, spec: TrueDistributionSpec):
        """Exact spec or a deterministic sampled dataset, per ``run.data_mode``."""
        if self.cfg.run.data_mode == "exact":
            return spec
        return spec.sample_pairs(self.cfg.run.dataset_size, derive_rng(self.cfg.run.seed, STAGE_DATA))

    def oracle(self, spec) -> Oracle:
        return Oracle(spec, self.cfg.run.target_s)

    # stages

    def stage_spec(self) -> list[str]:
        s = self.cfg.spec
        spec = make_spec(s.family, SequenceSpace(s.V, s.N, s.C), s.seed, concentration=s.concentration)
        spec.save(self.out / "spec.txt")
        atomic_write_text(self.out / "config.ini", serialize_config(self.cfg))
        return ["spec.txt", "config.ini"]

    def stage_pretrain(self) -> list[str]:
        spec = self.spec()
        p = self.cfg.pretrain
        rng = derive_rng(self.cfg.run.seed, STAGE_PRETRAIN)
        model, traj = train(TabularARModel(spec.space), Objective("mle", dropout_prob=p.dropout_prob), self.data(spec),
                            p.steps, p.lr, rng=rng, batch_size=p.batch_size, record_every=self.cfg.run.record_every,
                            oracle=self.oracle(spec))
        model.save(self.out / "pretrained.model")
        write_jsonl(self.out / "pretrain_trajectory.jsonl", traj.to_rows())
        return ["pretrained.model", "pretrain_trajectory.jsonl"]

    def stage_align(self) -> list[str]:
        spec = self.spec()
        pre = TabularARModel.load(self.out / "pretrained.model")
        steps = self.cfg.align_steps()
        rows = []
        if self.cfg.align.loss == "none" or steps == 0:
            model = pre
        else:
            obj, lr = align_objective(self.cfg, spec)
            rng = derive_rng(self.cfg.run.seed, STAGE_ALIGN)
            model, traj = train(pre, obj, self.data(spec), steps, lr, rng=rng, ref=pre,
                                batch_size=self.cfg.align.batch_size, record_every=self.cfg.run.record_every,
                                oracle=self.oracle(spec))
            rows = traj.to_rows()
        model.save(self.out / "aligned.model")
        write_jsonl(self.out / "align_trajectory.jsonl", rows)
        return ["aligned.model", "align_trajectory.jsonl"]

    def stage_eval(self) -> list[str]:
        cfg, spec = self.cfg, self.spec()
        pre = TabularARModel.load(self.out / "pretrained.model")
        aligned = TabularARModel.load(self.out / "aligned.model")
        seed = derive_seed(cfg.run.seed, STAGE_EVAL)
        ts = cfg.run.target_s
        records = [evaluate_policy(pre, spec, ts, run_id="pretrained", loss_kind="pretrained", seed=seed)]
        if cfg.align.loss != "none":
            obj, _ = align_objective(cfg, spec)
            records.append(evaluate_policy(
                aligned, spec, ts, run_id="aligned", loss_kind=cfg.align.loss, seed=seed, beta=obj.cca.beta,
                lam=obj.cca.lam if obj.cca.lambda_c is None else float("nan"),
                lambda_u=cfg.align.lambda_u if cfg.align.loss == "unlearn" else float("nan"),
                beta_d=cfg.align.beta_d if cfg.align.loss == "dpo" else float("nan")))
        g = cfg.guidance
        if g.kind in ("cfg", "cfgv2"):
            gs = GuidanceSpec(g.kind, g.s, g.s_max)
            records.append(evaluate_policy(guided_tables(pre, gs), spec, ts, run_id="guided", loss_kind=g.kind,
                                           seed=seed, s=g.s if g.kind == "cfg" else g.s_max, guidance_kind=g.kind,
                                           cfgv2_schedule=CFGV2_SCHEDULE if g.kind == "cfgv2" else ""))
        elif g.kind == "classifier":
            data = self.data(spec)
            clf = (train_classifier_exact(spec, g.classifier_steps) if cfg.run.data_mode == "exact"
                   else train_classifier(data, g.classifier_steps, space=spec.space))
            Q = np.stack([classifier_guided_sequence_distribution(pre, clf, g.s, c).probs
                          for c in range(spec.space.num_conditions)])
            records.append(evaluate_policy(Q, spec, ts, run_id="guided", loss_kind="classifier", seed=seed,
                                           s=g.s, guidance_kind="classifier"))
        write_jsonl(self.out / "metrics.jsonl", [r.to_row() for r in records])
        atomic_write_text(self.out / "metrics.csv", records_csv(records))
        return ["metrics.jsonl", "metrics.csv"]

    def stage_sweep(self) -> list[str]:
        cfg = self.cfg
        if not cfg.sweep.axis:
            write_jsonl(self.out / "sweep.jsonl", [])
            atomic_write_text(self.out / "sweep.csv", emit_plot_data([self.out / "sweep.jsonl"], "tradeoff_curve"))
            return ["sweep.jsonl", "sweep.csv"]
        spec = self.spec()
        pre = TabularARModel.load(self.out / "pretrained.model")
        data = None if cfg.run.data_mode == "exact" else self.data(spec)
        records: list[MetricsRecord] = []
        timings = []
        for axis in sorted(cfg.sweep.axis, key=AXES.index):
            recs = tradeoff_sweep(cfg, axis, cfg.sweep.grid_for(axis), spec, pre, data, jobs=self.jobs)
            records.extend(recs)
            timings.extend({"run_id": r.run_id, "wall_clock_s": r.wall_clock_s} for r in recs)
        write_jsonl(self.out / "sweep.jsonl", [r.to_row() for r in records])
        atomic_write_text(self.out / "sweep.csv", emit_plot_data([self.out / "sweep.jsonl"], "tradeoff_curve"))
        atomic_write_text(self.out / "comparison.csv", comparison_table(records))
        atomic_write_text(self.out / "timings.jsonl", "".join(dumps_row(t) + "\n" for t in timings))
        failed = [r for r in records if r.status != "ok"]
        if failed:
            self.diagnostics = f"{len(failed)} of {len(records)} sweep points failed; first: {failed[0].run_id}: {failed[0].error}"
            log.warning("%s", self.diagnostics)
        return ["sweep.jsonl", "sweep.csv", "comparison.csv", "timings.jsonl"]

    # driver

    def run(self, until: str = "sweep", stop_after: str | None = None) -> int:
        """Run stages up to ``until``; returns a process exit status."""
        self.out.mkdir(parents=True, exist_ok=True)
        m = self._load_manifest()
        self._save_manifest(m)
        last = STAGES.index(until)
        for stage in STAGES[: last + 1]:
            if self._done(m, stage):
                log.info("stage %s: already complete, skipping", stage)
                continue
            log.info("stage %s: running", stage)
            t0 = time.perf_counter()
            self.diagnostics = ""
            try:
                outputs = getattr(self, f"stage_{stage}")()
            except Exception as e:
                m["stages"][stage] = {"status": "failed", "outputs": [], "diagnostics": f"{type(e).__name__}: {e}"}
                self._save_manifest(m)
                log.error("stage %s failed: %s", stage, e)
                return 1
            m["stages"][stage] = {"status": "done", "outputs": outputs, "diagnostics": self.diagnostics,
                                  "seconds": round(time.perf_counter() - t0, 3)}
            # downstream outputs were computed from stale inputs
            for later in STAGES[STAGES.index(stage) + 1 :]:
                m["stages"].pop(later, None)
            self._save_manifest(m)
            if stage == stop_after:
                return 0
        m["finished_at"] = _now()
        self._save_manifest(m)
        return 0


def comparison_table(records: list[MetricsRecord]) -> str:
    """Best KL per method family plus the frontier gap of each CCA family against CFG."""
    best = best_by_kind(records)
    by_kind: dict[str, list] = {}
    for r in records:
        by_kind.setdefault(r.loss_kind, []).append(r)
    cfg_kind = next((k for k in ("cfg", "cfgv2") if k in by_kind), None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "best_axis", "best_axis_value", "best_kl_to_target", "fidelity", "diversity",
                "frontier_gap_vs_cfg"))
    for kind in sorted(best):
        r = best[kind]
        gap = frontier_gap(by_kind[kind], by_kind[cfg_kind]) if cfg_kind and kind != cfg_kind else float("nan")
        w.writerow((kind, r.axis, repr(r.axis_value), repr(r.kl_to_target), repr(r.fidelity), repr(r.diversity),
                    repr(gap)))
    return buf.getvalue()


def run_pipeline(cfg: ExperimentConfig, until: str = "sweep", jobs: int = 1, stop_after: str | None = None) -> int:
    return Pipeline(cfg, jobs=jobs).run(until=until, stop_after=stop_after)
