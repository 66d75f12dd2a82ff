"""Ground-truth quantities by brute-force enumeration.

Every ratio is a difference of logs and every normalizer a log-sum-exp, so
guidance scales up to ~10 stay finite on large spaces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError
from .model import TabularARModel
from .space import SequenceDistribution, SequenceSpace

SPEC_FORMAT = "ccalab-spec"
SPEC_FORMAT_VERSION = 1
FAMILIES = ("random-dirichlet", "needle", "independent")


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return out.squeeze() if axis is None else np.squeeze(out, axis=axis)


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True, eq=False)
class TrueDistributionSpec:
    """Ground-truth ``p(c)`` and ``p(x|c)`` over a small sequence space."""

    space: SequenceSpace
    p_c: np.ndarray
    p_x_given_c: np.ndarray  # (C, V^N)

    def __post_init__(self):
        C, M = self.space.num_conditions, self.space.num_sequences
        pc = np.array(self.p_c, dtype=np.float64)
        px = np.array(self.p_x_given_c, dtype=np.float64)
        if pc.shape != (C,) or px.shape != (C, M):
            raise InputError(f"expected p_c of shape {(C,)} and p_x_given_c of shape {(C, M)}, got {pc.shape}, {px.shape}")
        if not (np.all(np.isfinite(pc)) and np.all(np.isfinite(px))) or pc.min() < 0 or px.min() < 0:
            raise InputError("probabilities must be finite and non-negative")
        if abs(pc.sum() - 1) > 1e-12:
            raise InputError(f"p_c sums to {pc.sum()!r}")
        sums = px.sum(axis=1)
        if np.any(np.abs(sums - 1) > 1e-12):
            c = int(np.argmax(np.abs(sums - 1)))
            raise InputError(f"p(x|c={c}) sums to {sums[c]!r}")
        pc.setflags(write=False)
        px.setflags(write=False)
        object.__setattr__(self, "p_c", pc)
        object.__setattr__(self, "p_x_given_c", px)

    def conditional(self, c: int) -> SequenceDistribution:
        c = self.space.check_condition(c, allow_mask=False)
        return SequenceDistribution(self.space, self.p_x_given_c[c])

    def joint(self) -> np.ndarray:
        """``(C, V^N)`` table of ``p(x, c)``."""
        return self.p_c[:, None] * self.p_x_given_c

    def sample_pairs(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``size`` pairs ``(x, c) ~ p(x, c)``; returns ``(tokens, conds)``."""
        flat = self.joint().ravel()
        idx = rng.choice(flat.size, size=size, p=flat / flat.sum())
        conds, seq = np.divmod(idx, self.space.num_sequences)
        return self.space.all_tokens[seq], conds.astype(np.int64)

    def to_text(self) -> str:
        s = self.space
        lines = [f"{SPEC_FORMAT} {SPEC_FORMAT_VERSION}", f"V {s.vocab_size}", f"N {s.seq_len}", f"C {s.num_conditions}"]
        lines.append("p_c " + " ".join(repr(float(v)) for v in self.p_c))
        for c in range(s.num_conditions):
            lines.append(f"p_x_given_c {c} " + " ".join(repr(float(v)) for v in self.p_x_given_c[c]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrueDistributionSpec":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0][0] != SPEC_FORMAT or int(lines[0][1]) != SPEC_FORMAT_VERSION:
            raise InputError("not a ccalab spec file (or unsupported version)")
        head = {ln[0]: ln[1:] for ln in lines[1:4]}
        space = SequenceSpace(int(head["V"][0]), int(head["N"][0]), int(head["C"][0]))
        p_c = [float(v) for v in lines[4][1:]]
        rows = {int(ln[1]): [float(v) for v in ln[2:]] for ln in lines[5:]}
        return cls(space, np.array(p_c), np.array([rows[c] for c in range(space.num_conditions)]))

    def save(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "TrueDistributionSpec":
        with open(path) as fh:
            return cls.from_text(fh.read())


# built-in spec families


def _condition_weights(C: int, rng: np.random.Generator, uniform: bool) -> np.ndarray:
    return np.full(C, 1.0 / C) if uniform else rng.dirichlet(np.full(C, 4.0))


def _smoothed_dirichlet(rng, M: int, concentration: float, floor: float) -> np.ndarray:
    p = rng.dirichlet(np.full(M, concentration))
    return (1 - floor) * p + floor / M


def random_dirichlet_spec(space: SequenceSpace, seed: int, concentration: float = 1.0,
                          floor: float = 0.05, uniform_conditions: bool = True) -> TrueDistributionSpec:
    """Independent Dirichlet draw per condition, mixed with ``floor`` of the uniform distribution."""
    rng = np.random.default_rng(seed)
    C, M = space.num_conditions, space.num_sequences
    p_c = _condition_weights(C, rng, uniform_conditions)
    rows = np.stack([_smoothed_dirichlet(rng, M, concentration, floor) for _ in range(C)])
    return TrueDistributionSpec(space, p_c, rows)


def needle_spec(space: SequenceSpace, seed: int, concentration: float = 1.0, floor: float = 0.05,
                needle_mass: float = 0.5, uniform_conditions: bool = True) -> TrueDistributionSpec:
    """Shared background plus one high-residual sequence per condition."""
    rng = np.random.default_rng(seed)
    C, M = space.num_conditions, space.num_sequences
    p_c = _condition_weights(C, rng, uniform_conditions)
    background = _smoothed_dirichlet(rng, M, concentration, floor)
    needles = rng.choice(M, size=C, replace=C > M)
    rows = np.tile((1 - needle_mass) * background, (C, 1))
    rows[np.arange(C), needles] += needle_mass
    return TrueDistributionSpec(space, p_c, rows)


def independent_spec(space: SequenceSpace, seed: int, concentration: float = 1.0,
                     floor: float = 0.05, uniform_conditions: bool = True) -> TrueDistributionSpec:
    """``p(x|c) = p(x)`` for every condition."""
    rng = np.random.default_rng(seed)
    C, M = space.num_conditions, space.num_sequences
    p_c = _condition_weights(C, rng, uniform_conditions)
    row = _smoothed_dirichlet(rng, M, concentration, floor)
    return TrueDistributionSpec(space, p_c, np.tile(row, (C, 1)))


def make_spec(family: str, space: SequenceSpace, seed: int, concentration: float = 1.0, **kw) -> TrueDistributionSpec:
    builders = {"random-dirichlet": random_dirichlet_spec, "needle": needle_spec, "independent": independent_spec}
    if family not in builders:
        raise InputError(f"unknown spec family {family!r}; choose from {', '.join(FAMILIES)}")
    return builders[family](space, seed, concentration=concentration, **kw)


def fixture_spec() -> TrueDistributionSpec:
    """V=2, N=1, C=2 hand fixture: p(c) uniform, p(x=0|c=0)=0.8, p(x=0|c=1)=0.3."""
    return TrueDistributionSpec(SequenceSpace(2, 1, 2), np.array([0.5, 0.5]), np.array([[0.8, 0.2], [0.3, 0.7]]))


# oracle quantities


def marginal_x(spec: TrueDistributionSpec) -> SequenceDistribution:
    """``p(x) = sum_c p(c) p(x|c)``."""
    px = spec.p_c @ spec.p_x_given_c
    return SequenceDistribution(spec.space, px / px.sum())


def residual_table(spec: TrueDistributionSpec) -> np.ndarray:
    """``(C, V^N)`` table of ``log p(x|c) - log p(x)``; ``-inf`` where ``p(x|c)=0``.

    Raises DomainError if some ``p(x)=0`` while the row is positive there.
    """
    px = spec.p_c @ spec.p_x_given_c
    bad = (px <= 0) & (spec.p_x_given_c > 0).any(axis=0)
    if bad.any():
        raise DomainError(f"p(x)=0 but p(x|c)>0 at sequence {spec.space.sequence_at(int(np.argmax(bad)))}")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = _safe_log(spec.p_x_given_c) - _safe_log(px)[None, :]
    return np.where(spec.p_x_given_c > 0, r, -np.inf)


def conditional_residual(spec: TrueDistributionSpec, c: int, x) -> float:
    """``log p(x|c) - log p(x)`` in nats.

    Returns ``-inf`` when ``p(x|c)=0`` (callers must treat it as a sentinel);
    raises DomainError when ``p(x)=0``.
    """
    c = spec.space.check_condition(c, allow_mask=False)
    i = spec.space.sequence_index(x)
    px = float(spec.p_c @ spec.p_x_given_c[:, i])
    if px <= 0:
        raise DomainError(f"p(x)=0 for x={tuple(x)}; conditional residual undefined")
    pxc = spec.p_x_given_c[c, i]
    if pxc == 0:
        return float("-inf")
    return float(np.log(pxc) - np.log(px))


def log_target_unnormalized(spec: TrueDistributionSpec, c: int, s: float) -> np.ndarray:
    """``log p(x|c) + s * residual(x, c)``; ``-inf`` off the support of ``p(.|c)``."""
    if not np.isfinite(s):
        raise InputError(f"guidance scale must be finite, got {s!r}")
    c = spec.space.check_condition(c, allow_mask=False)
    r = residual_table(spec)[c]
    lp = _safe_log(spec.p_x_given_c[c])
    on = spec.p_x_given_c[c] > 0
    out = np.full_like(lp, -np.inf)
    out[on] = lp[on] + s * r[on]
    return out


def target_distribution(spec: TrueDistributionSpec, c: int, s: float) -> tuple[SequenceDistribution, float]:
    """Guided target ``p(x|c) (p(x|c)/p(x))^s / Z(c)`` and its normalizer ``Z(c)``."""
    lu = log_target_unnormalized(spec, c, s)
    log_z = float(_logsumexp(lu))
    probs = np.exp(lu - log_z)
    probs /= probs.sum()
    return SequenceDistribution(spec.space, probs), float(np.exp(log_z))


def log_normalizer(spec: TrueDistributionSpec, c: int, s: float) -> float:
    return float(_logsumexp(log_target_unnormalized(spec, c, s)))


def lambda_c(spec: TrueDistributionSpec, c: int, s: float) -> float:
    """Per-condition negative weight ``Z(c)^(1/s)`` that makes contrastive recovery exact."""
    if not s > 0:
        raise InputError(f"lambda_c needs s > 0, got {s!r}")
    return float(np.exp(log_normalizer(spec, c, s) / s))


def lambda_vector(spec: TrueDistributionSpec, s: float) -> np.ndarray:
    return np.array([lambda_c(spec, c, s) for c in range(spec.space.num_conditions)])


def posterior(spec: TrueDistributionSpec, x) -> np.ndarray:
    """Bayes posterior ``p(c|x)`` over conditions."""
    i = spec.space.sequence_index(x)
    joint = spec.p_c * spec.p_x_given_c[:, i]
    tot = joint.sum()
    if tot <= 0:
        raise DomainError(f"p(x)=0 for x={tuple(x)}; posterior undefined")
    return joint / tot


def posterior_table(spec: TrueDistributionSpec) -> np.ndarray:
    """``(V^N, C)`` posterior for every sequence; rows with ``p(x)=0`` are NaN."""
    joint = spec.joint().T
    with np.errstate(invalid="ignore", divide="ignore"):
        return joint / joint.sum(axis=1, keepdims=True)


def mutual_information(spec: TrueDistributionSpec) -> float:
    """``I(x; c)`` in nats."""
    r = residual_table(spec)
    joint = spec.joint()
    on = joint > 0
    return float((joint[on] * r[on]).sum())


def true_model(spec: TrueDistributionSpec, with_unconditional: bool = True) -> TabularARModel:
    """Tabular model whose rows reproduce ``p(x|c)`` and, in the mask row, ``p(x)``."""
    rows = {c: spec.p_x_given_c[c] for c in range(spec.space.num_conditions)}
    if with_unconditional:
        rows[spec.space.mask_id] = marginal_x(spec).probs
    return TabularARModel.from_distributions(spec.space, rows)


def target_model(spec: TrueDistributionSpec, s: float) -> TabularARModel:
    """Tabular model whose conditional rows are the guided targets at scale ``s``."""
    rows = {c: target_distribution(spec, c, s)[0].probs for c in range(spec.space.num_conditions)}
    rows[spec.space.mask_id] = marginal_x(spec).probs
    return TabularARModel.from_distributions(spec.space, rows)
