"""Exact distributional metrics: divergences and the fidelity/diversity analogs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, InputError
from .oracle import TrueDistributionSpec, posterior_table, residual_table, target_distribution
from .space import SequenceDistribution


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, SequenceDistribution) else np.asarray(p, dtype=np.float64)


def _check_pair(p, q):
    if isinstance(p, SequenceDistribution) and isinstance(q, SequenceDistribution) and p.space != q.space:
        raise InputError(f"distributions live in different spaces: {p.space} vs {q.space}")
    a, b = _probs(p), _probs(q)
    if a.shape != b.shape:
        raise InputError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    return a, b


def kl_divergence(p, q) -> float:
    """``KL(p || q) = sum p log(p/q)`` in nats."""
    a, b = _check_pair(p, q)
    on = a > 0
    bad = on & (b <= 0)
    if bad.any():
        i = int(np.argmax(bad))
        where = p.space.sequence_at(i) if isinstance(p, SequenceDistribution) else i
        raise DomainError(f"q=0 where p>0 at sequence {where}")
    return max(float(np.sum(a[on] * (np.log(a[on]) - np.log(b[on])))), 0.0)


def tv_distance(p, q) -> float:
    a, b = _check_pair(p, q)
    return float(min(0.5 * np.abs(a - b).sum(), 1.0))


def model_tables(model) -> np.ndarray:
    """``(C, V^N)`` conditional distributions of a tabular model (mask row dropped)."""
    C = model.space.num_conditions
    return np.exp(model.log_prob_table()[:C])


def fidelity_and_diversity(policy, spec: TrueDistributionSpec) -> tuple[float, float, float]:
    """``(fidelity, toy_is, diversity)`` of a policy, computed by enumeration.

    ``policy`` is a tabular model or a ``(C, V^N)`` table of conditional
    distributions. Fidelity is the expected conditional residual, toy_is the
    exponentiated mean KL between the oracle posterior and ``p(c)`` under the
    policy's sequence mixture, diversity the mean conditional entropy.
    """
    Q = policy if isinstance(policy, np.ndarray) else model_tables(policy)
    r = residual_table(spec)
    pc = spec.p_c
    with np.errstate(invalid="ignore"):
        contrib = np.where(Q > 0, Q * r, 0.0)
    fidelity = float(pc @ contrib.sum(axis=1))
    mixture = pc @ Q
    post = posterior_table(spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_rows = np.where(post > 0, post * (np.log(post) - np.log(pc)[None, :]), 0.0).sum(axis=1)
    on = mixture > 0
    toy_is = float(np.exp(np.sum(mixture[on] * kl_rows[on])))
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(Q > 0, Q * np.log(Q), 0.0).sum(axis=1)
    diversity = float(pc @ ent)
    return fidelity, toy_is, diversity


def target_tables(spec: TrueDistributionSpec, s: float) -> np.ndarray:
    return np.stack([target_distribution(spec, c, s)[0].probs for c in range(spec.space.num_conditions)])


def kl_to_target(policy, spec: TrueDistributionSpec, s: float) -> np.ndarray:
    """Per-condition ``KL(policy(.|c) || target(.|c, s))``."""
    Q = policy if isinstance(policy, np.ndarray) else model_tables(policy)
    T = target_tables(spec, s)
    return np.array([kl_divergence(Q[c], T[c]) for c in range(len(T))])


def tv_to_target(policy, spec: TrueDistributionSpec, s: float) -> np.ndarray:
    Q = policy if isinstance(policy, np.ndarray) else model_tables(policy)
    T = target_tables(spec, s)
    return np.array([tv_distance(Q[c], T[c]) for c in range(len(T))])


@dataclass
class MetricsRecord:
    """One evaluated policy. ``kl_to_target``/``tv_to_target`` average uniformly over conditions."""

    run_id: str
    loss_kind: str
    seed: int
    axis: str = ""
    axis_value: float = math.nan
    beta: float = math.nan
    lam: float = math.nan
    s: float = math.nan
    lambda_u: float = math.nan
    beta_d: float = math.nan
    guidance_kind: str = "none"
    cfgv2_schedule: str = ""
    target_s: float = math.nan
    kl_per_condition: list = field(default_factory=list)
    kl_to_target: float = math.nan
    tv_to_target: float = math.nan
    fidelity: float = math.nan
    toy_is: float = math.nan
    diversity: float = math.nan
    wall_clock_s: float = 0.0
    status: str = "ok"
    error: str = ""

    def to_row(self, include_timing: bool = False) -> dict:
        row = asdict(self)
        if not include_timing:
            row.pop("wall_clock_s")
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        return cls(**row)


CSV_COLUMNS = ("run_id", "loss_kind", "seed", "axis", "axis_value", "beta", "lam", "s", "lambda_u", "beta_d",
               "guidance_kind", "target_s", "kl_to_target", "tv_to_target", "fidelity", "toy_is", "diversity",
               "status")


def evaluate_policy(policy, spec: TrueDistributionSpec, target_s: float, **fields) -> MetricsRecord:
    """Fill a :class:`MetricsRecord` with exact metrics of ``policy`` against the target at ``target_s``."""
    Q = policy if isinstance(policy, np.ndarray) else model_tables(policy)
    kl = kl_to_target(Q, spec, target_s)
    tv = tv_to_target(Q, spec, target_s)
    fid, tis, div = fidelity_and_diversity(Q, spec)
    return MetricsRecord(target_s=target_s, kl_per_condition=[float(v) for v in kl], kl_to_target=float(kl.mean()),
                         tv_to_target=float(tv.mean()), fidelity=fid, toy_is=tis, diversity=div, **fields)
