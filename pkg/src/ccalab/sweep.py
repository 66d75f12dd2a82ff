"""Fidelity/diversity trade-off sweeps over CCA and guidance hyperparameters."""
from __future__ import annotations

import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .alignment import CCAHyperparams, Objective, train
from .config import AXES, ExperimentConfig
from .guidance import CFGV2_SCHEDULE, GuidanceSpec, guided_sequence_distribution
from .metrics import MetricsRecord, evaluate_policy
from .model import TabularARModel
from .oracle import TrueDistributionSpec, lambda_vector
from .seeding import STAGE_SWEEP, derive_rng, derive_seed


def align_objective(cfg: ExperimentConfig, spec: TrueDistributionSpec, kind: str | None = None,
                    beta: float | None = None, lam: float | None = None,
                    dropout_prob: float | None = None) -> tuple[Objective, float]:
    """Objective and effective learning rate for the align settings of ``cfg``."""
    a = cfg.align
    kind = a.loss if kind is None else kind
    beta = a.beta if beta is None else beta
    lam = a.lam if lam is None else lam
    lambda_c = None
    if a.lambda_mode == "exact" and kind == "cca":
        s = cfg.run.target_s
        if s <= 0:
            raise ValueError("lambda_mode = exact needs run.target_s > 0")
        beta, lambda_c = 1.0 / s, tuple(lambda_vector(spec, s))
    hp = CCAHyperparams(beta=beta, lam=lam, lambda_c=lambda_c)
    q = a.dropout_prob if dropout_prob is None else dropout_prob
    obj = Objective(kind=kind, cca=hp, beta_d=a.beta_d, lambda_u=a.lambda_u, dropout_prob=q)
    lr = a.lr
    if a.lr_scale == "inv_beta_sq":
        lr = lr / (beta if kind == "cca" else a.beta_d if kind == "dpo" else 1.0) ** 2
    return obj, lr


def guidance_for(cfg: ExperimentConfig, s: float) -> GuidanceSpec:
    if cfg.guidance.kind == "cfgv2":
        return GuidanceSpec("cfgv2", s=0.0, s_max=s)
    return GuidanceSpec("cfg", s=s)


def guided_tables(model: TabularARModel, guidance: GuidanceSpec) -> np.ndarray:
    C = model.space.num_conditions
    return np.stack([guided_sequence_distribution(model, None, guidance, c).probs for c in range(C)])


def _fine_tune(cfg, spec, pretrained, data, rng, **kw) -> TabularARModel:
    obj, lr = align_objective(cfg, spec, kind="cca", **kw)
    model, _ = train(pretrained, obj, spec if data is None else data, cfg.align_steps(), lr, rng=rng,
                     batch_size=cfg.align.batch_size, record_every=max(cfg.align_steps(), 1))
    return model


def _point(args) -> MetricsRecord:
    cfg, axis, i, value, spec, pretrained, data, cca_cfg_model = args
    seed = derive_seed(cfg.run.seed, STAGE_SWEEP, AXES.index(axis), i)
    rng = derive_rng(cfg.run.seed, STAGE_SWEEP, AXES.index(axis), i)
    a = cfg.align
    base = dict(run_id=f"{axis}-{i:03d}", seed=seed, axis=axis, axis_value=float(value))
    t0 = time.perf_counter()
    try:
        if axis == "cfg_s":
            g = guidance_for(cfg, value)
            policy = guided_tables(pretrained, g)
            extra = dict(loss_kind=g.kind, s=float(value), guidance_kind=g.kind)
        elif axis == "cca_cfg_s":
            g = guidance_for(cfg, value)
            policy = guided_tables(cca_cfg_model, g)
            extra = dict(loss_kind="cca+" + g.kind, s=float(value), guidance_kind=g.kind, beta=a.beta,
                         lam=cfg.sweep.cca_cfg_lambda)
        else:
            kw = {"lam": value} if axis == "cca_lambda" else {"beta": value}
            model = _fine_tune(cfg, spec, pretrained, data, rng, **kw)
            policy = model
            extra = dict(loss_kind="cca", beta=kw.get("beta", a.beta), lam=kw.get("lam", a.lam))
        if extra.get("guidance_kind") == "cfgv2":
            extra["cfgv2_schedule"] = CFGV2_SCHEDULE
        rec = evaluate_policy(policy, spec, cfg.run.target_s, **base, **extra)
    except Exception as e:  # a failed point is recorded; the sweep goes on
        rec = MetricsRecord(loss_kind="cca" if axis.startswith("cca_") and axis != "cca_cfg_s" else axis, **base,
                            target_s=cfg.run.target_s, status="failed", error="".join(traceback.format_exception_only(type(e), e)).strip())
    rec.wall_clock_s = time.perf_counter() - t0
    return rec


def tradeoff_sweep(cfg: ExperimentConfig, axis: str, grid, spec: TrueDistributionSpec,
                   pretrained: TabularARModel, data=None, jobs: int = 1) -> list[MetricsRecord]:
    """One record per grid value, each point with its own derived seed.

    ``cfg_s`` points guide the pretrained model; ``cca_lambda``/``cca_beta``
    points fine-tune a fresh copy; ``cca_cfg_s`` guides a single CCA model
    trained with ``sweep.cca_cfg_lambda`` and condition dropout.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    cca_cfg_model = None
    if axis == "cca_cfg_s":
        q = cfg.align.dropout_prob if cfg.align.dropout_prob > 0 else 0.1
        rng = derive_rng(cfg.run.seed, STAGE_SWEEP, AXES.index(axis), len(grid))
        cca_cfg_model = _fine_tune(cfg, spec, pretrained, data, rng, lam=cfg.sweep.cca_cfg_lambda, dropout_prob=q)
    work = [(cfg, axis, i, v, spec, pretrained, data, cca_cfg_model) for i, v in enumerate(grid)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_point, work))
    return [_point(w) for w in work]


def best_by_kind(records: list[MetricsRecord]) -> dict[str, MetricsRecord]:
    """Lowest-KL successful record per loss kind."""
    best: dict[str, MetricsRecord] = {}
    for r in records:
        if r.status != "ok":
            continue
        if r.loss_kind not in best or r.kl_to_target < best[r.loss_kind].kl_to_target:
            best[r.loss_kind] = r
    return best


def pareto_front(records: list[MetricsRecord]) -> list[MetricsRecord]:
    """Records not dominated in (higher fidelity, higher diversity)."""
    ok = [r for r in records if r.status == "ok"]
    return [r for r in ok if not any((o.fidelity >= r.fidelity and o.diversity >= r.diversity)
                                     and (o.fidelity > r.fidelity or o.diversity > r.diversity) for o in ok)]


def frontier_gap(candidate: list[MetricsRecord], reference: list[MetricsRecord]) -> float:
    """Largest diversity shortfall of ``candidate``'s Pareto points versus the reference curve.

    The reference frontier is linearly interpolated in fidelity; candidate points
    outside its fidelity range are ignored. Positive means the candidate is worse.
    """
    ref = sorted(pareto_front(reference), key=lambda r: r.fidelity)
    if len(ref) < 2:
        return float("nan")
    fx = np.array([r.fidelity for r in ref])
    dy = np.array([r.diversity for r in ref])
    gaps = [float(np.interp(r.fidelity, fx, dy) - r.diversity)
            for r in pareto_front(candidate) if fx[0] <= r.fidelity <= fx[-1]]
    return max(gaps) if gaps else float("nan")
