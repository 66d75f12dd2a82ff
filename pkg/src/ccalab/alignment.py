"""Contrastive alignment losses, preference/unlearning baselines, and the training loop.

Batch losses are written as functions of per-item log-likelihoods so that
:func:`ccalab.model.loss_gradient` can differentiate them; exact-expectation
losses act on the full ``(C+1, V^N)`` log-likelihood table instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError, NumericalError
from .metrics import kl_to_target
from .model import TabularARModel, dense_loss_gradient, loss_gradient
from .oracle import TrueDistributionSpec, marginal_x

LOSS_KINDS = ("mle", "cca", "dpo", "unlearn")


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    return np.exp(log_sigmoid(z))


# batches


@dataclass(frozen=True, eq=False)
class AlignmentBatch:
    """Items ``(x_k, c_pos_k, c_neg_k)``; flagged items use the mask row as ``c_pos``."""

    tokens: np.ndarray
    c_pos: np.ndarray
    c_neg: np.ndarray
    unconditional: np.ndarray | None = None

    def __post_init__(self):
        K = len(self.c_pos)
        uncond = np.zeros(K, dtype=bool) if self.unconditional is None else np.asarray(self.unconditional, dtype=bool)
        object.__setattr__(self, "unconditional", uncond)
        object.__setattr__(self, "c_pos", np.asarray(self.c_pos, dtype=np.int64))
        object.__setattr__(self, "c_neg", np.asarray(self.c_neg, dtype=np.int64))
        if not (len(self.tokens) == K == len(self.c_neg) == len(uncond)):
            raise InputError("batch fields have mismatched lengths")

    def __len__(self):
        return len(self.c_pos)

    def validate(self, space) -> None:
        space.as_token_array(self.tokens)
        if len(self) and (self.c_neg.min() < 0 or self.c_neg.max() >= space.num_conditions):
            raise InputError(f"negative conditions must lie in 0..{space.num_conditions - 1} (never the mask row)")
        cp = self.c_pos
        ok = np.where(self.unconditional, cp == space.mask_id, (cp >= 0) & (cp < space.num_conditions))
        if not ok.all():
            k = int(np.argmax(~ok))
            raise InputError(f"batch element {k}: positive condition {cp[k]} inconsistent with its flag")

    def collision_fraction(self) -> float:
        keep = ~self.unconditional
        return float(np.mean(self.c_pos[keep] == self.c_neg[keep])) if keep.any() else 0.0


def _pairs_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return np.asarray(pairs[0], dtype=np.int64), np.asarray(pairs[1], dtype=np.int64)
    pairs = list(pairs)
    return (np.array([tuple(x) for x, _ in pairs], dtype=np.int64).reshape(len(pairs), -1),
            np.array([c for _, c in pairs], dtype=np.int64))


def make_negative_batch(pairs, rng: np.random.Generator) -> AlignmentBatch:
    """Pair each ``x`` with a condition drawn by shuffling the batch's conditions.

    Fixed points of the permutation (``c_neg == c``) are kept.
    """
    tokens, conds = _pairs_arrays(pairs)
    if len(conds) < 2:
        raise InputError(f"negative pairing needs at least 2 items, got {len(conds)}")
    return AlignmentBatch(tokens, conds, conds[rng.permutation(len(conds))])


def mask_dropout(batch, p_drop: float, rng: np.random.Generator, mask_id: int | None = None) -> AlignmentBatch:
    """Independently flag items as unconditional with probability ``p_drop``.

    Accepts an :class:`AlignmentBatch` or plain ``(x, c)`` pairs (then ``mask_id`` is required
    and ``c_neg`` is set equal to ``c``, unused for flagged items).
    """
    if not 0.0 <= p_drop <= 1.0:
        raise InputError(f"dropout probability must lie in [0, 1], got {p_drop!r}")
    if not isinstance(batch, AlignmentBatch):
        tokens, conds = _pairs_arrays(batch)
        batch = AlignmentBatch(tokens, conds, conds.copy())
    if mask_id is None:
        raise InputError("mask_id is required")
    flags = rng.random(len(batch)) < p_drop
    flags |= batch.unconditional
    c_pos = np.where(flags, mask_id, batch.c_pos)
    return AlignmentBatch(batch.tokens, c_pos, batch.c_neg, flags)


@dataclass(frozen=True)
class DPOPairs:
    """Preference pairs: ``(x_w | c_w)`` preferred over ``(x_l | c_l)``."""

    c_w: np.ndarray
    x_w: np.ndarray
    c_l: np.ndarray
    x_l: np.ndarray

    @classmethod
    def from_triples(cls, triples) -> "DPOPairs":
        """Classic ``(c, x_w, x_l)`` triples sharing one condition."""
        triples = list(triples)
        c = np.array([t[0] for t in triples], dtype=np.int64)
        return cls(c, np.array([tuple(t[1]) for t in triples]), c.copy(), np.array([tuple(t[2]) for t in triples]))

    @classmethod
    def from_batch(cls, batch: AlignmentBatch) -> "DPOPairs":
        """Matched pair preferred over the same ``x`` under its shuffled condition."""
        keep = ~batch.unconditional
        t = np.asarray(batch.tokens)[keep]
        return cls(batch.c_pos[keep], t, batch.c_neg[keep], t)


# hyperparameters


@dataclass(frozen=True)
class CCAHyperparams:
    beta: float = 0.02
    lam: float = 1.0
    lambda_c: tuple | None = None
    dropout_prob: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise InputError(f"beta must be finite and > 0, got {self.beta!r}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise InputError(f"lambda must be finite and >= 0, got {self.lam!r}")
        if self.lambda_c is not None:
            lc = tuple(float(v) for v in self.lambda_c)
            if not all(np.isfinite(v) and v > 0 for v in lc):
                raise InputError("per-condition lambdas must be finite and > 0")
            object.__setattr__(self, "lambda_c", lc)
        if not 0 <= self.dropout_prob <= 1:
            raise InputError(f"dropout_prob must lie in [0, 1], got {self.dropout_prob!r}")

    def neg_weights(self, conds: np.ndarray) -> np.ndarray:
        if self.lambda_c is None:
            return np.full(len(conds), self.lam)
        return np.asarray(self.lambda_c)[conds]


@dataclass(frozen=True)
class Objective:
    """Loss kind plus every hyperparameter a training run may need."""

    kind: str = "cca"
    cca: CCAHyperparams = field(default_factory=CCAHyperparams)
    beta_d: float = 0.1
    lambda_u: float = 0.05
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InputError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0 <= self.dropout_prob <= 1:
            raise InputError(f"dropout_prob must lie in [0, 1], got {self.dropout_prob!r}")


def _same_space(theta: TabularARModel, ref: TabularARModel):
    if theta.space != ref.space:
        raise InputError(f"model spaces differ: {theta.space} vs {ref.space}")


# batch losses: each returns (conds, tokens, fn) where fn(logp) -> (value, dvalue/dlogp)


def _cca_terms(ref, batch: AlignmentBatch, hp: CCAHyperparams):
    K = len(batch)
    keep = ~batch.unconditional
    tokens = np.concatenate([batch.tokens, np.asarray(batch.tokens)[keep]])
    conds = np.concatenate([batch.c_pos, batch.c_neg[keep]])
    ref_lp = ref.log_prob_batch(conds, tokens)
    lam = hp.neg_weights(batch.c_neg[keep])
    beta = hp.beta

    def fn(lp):
        d = lp - ref_lp
        dp, dn = d[:K], d[K:]
        value = (np.sum(-log_sigmoid(beta * dp)) + np.sum(lam * -log_sigmoid(-beta * dn))) / K
        grad = np.concatenate([-beta * sigmoid(-beta * dp), lam * beta * sigmoid(beta * dn)]) / K
        return value, grad

    return conds, tokens, fn


def _dpo_terms(ref, pairs: DPOPairs, beta_d: float):
    K = len(pairs.c_w)
    conds = np.concatenate([pairs.c_w, pairs.c_l])
    tokens = np.concatenate([pairs.x_w, pairs.x_l])
    ref_lp = ref.log_prob_batch(conds, tokens)

    def fn(lp):
        d = lp - ref_lp
        m = beta_d * (d[:K] - d[K:])
        value = np.sum(-log_sigmoid(m)) / K
        g = beta_d * sigmoid(-m) / K
        return value, np.concatenate([-g, g])

    return conds, tokens, fn


def _unlearn_terms(batch: AlignmentBatch, lambda_u: float):
    K = len(batch)
    keep = ~batch.unconditional
    tokens = np.concatenate([batch.tokens, np.asarray(batch.tokens)[keep]])
    conds = np.concatenate([batch.c_pos, batch.c_neg[keep]])
    w = np.concatenate([np.full(K, -1.0), np.full(int(keep.sum()), lambda_u)]) / K

    def fn(lp):
        return float(w @ lp), w

    return conds, tokens, fn


def _mle_terms(batch: AlignmentBatch):
    K = len(batch)
    w = np.full(K, -1.0 / K)

    def fn(lp):
        return float(w @ lp), w

    return batch.c_pos, batch.tokens, fn


def _value(model, terms) -> float:
    conds, tokens, fn = terms
    return float(fn(model.log_prob_batch(conds, tokens))[0])


def cca_loss(theta, ref, batch: AlignmentBatch, hp: CCAHyperparams) -> float:
    """Batch-averaged ``-log s(b D_pos) - lam log s(-b D_neg)`` with ``D = log p_theta - log p_ref``."""
    _same_space(theta, ref)
    batch.validate(theta.space)
    return _value(theta, _cca_terms(ref, batch, hp))


def dpo_loss(theta, ref, pairs, beta_d: float) -> float:
    """Batch-averaged ``-log s(beta_d (D_w - D_l))``; ``pairs`` is DPOPairs or ``(c, x_w, x_l)`` triples."""
    _same_space(theta, ref)
    if not isinstance(pairs, DPOPairs):
        pairs = DPOPairs.from_triples(pairs)
    return _value(theta, _dpo_terms(ref, pairs, beta_d))


def unlearn_loss(theta, batch: AlignmentBatch, lambda_u: float) -> float:
    """Batch-averaged ``-log p(x|c_pos) + lambda_u log p(x|c_neg)``."""
    batch.validate(theta.space)
    return _value(theta, _unlearn_terms(batch, lambda_u))


def mle_loss(theta, batch: AlignmentBatch) -> float:
    return _value(theta, _mle_terms(batch))


def batch_loss_and_grad(theta, ref, batch: AlignmentBatch, objective: Objective) -> tuple[float, np.ndarray]:
    if objective.kind == "cca":
        terms = _cca_terms(ref, batch, objective.cca)
    elif objective.kind == "dpo":
        terms = _dpo_terms(ref, DPOPairs.from_batch(batch), objective.beta_d)
    elif objective.kind == "unlearn":
        terms = _unlearn_terms(batch, objective.lambda_u)
    else:
        terms = _mle_terms(batch)
    conds, tokens, fn = terms
    return loss_gradient(theta, fn, conds, tokens)


# exact-expectation losses over the (C+1, V^N) table


def _exact_weights(spec: TrueDistributionSpec):
    joint = spec.joint()  # p(x, c)
    prod = spec.p_c[:, None] * marginal_x(spec).probs[None, :]  # p(x) p(c)
    return joint, prod


def _exact_cca_fn(ref, spec, hp: CCAHyperparams):
    C = spec.space.num_conditions
    joint, prod = _exact_weights(spec)
    lam = np.asarray(hp.lambda_c if hp.lambda_c is not None else [hp.lam] * C)[:, None]
    ref_lp = ref.log_prob_table()
    q, beta = hp.dropout_prob, hp.beta
    px = marginal_x(spec).probs

    def fn(lp):
        d = lp - ref_lp
        dc = d[:C]
        value = -(1 - q) * np.sum(joint * log_sigmoid(beta * dc) + lam * prod * log_sigmoid(-beta * dc))
        grad = np.zeros_like(lp)
        grad[:C] = (1 - q) * beta * (-joint * sigmoid(-beta * dc) + lam * prod * sigmoid(beta * dc))
        if q > 0:
            dm = d[C]
            value -= q * np.sum(px * log_sigmoid(beta * dm))
            grad[C] = -q * beta * px * sigmoid(-beta * dm)
        return float(value), grad

    return fn


def _exact_linear_fn(spec, objective: Objective):
    C = spec.space.num_conditions
    joint, prod = _exact_weights(spec)
    q = objective.dropout_prob
    W = np.zeros((C + 1, spec.space.num_sequences))
    W[:C] = -(1 - q) * joint
    if objective.kind == "unlearn":
        W[:C] += (1 - q) * objective.lambda_u * prod
    W[C] = -q * marginal_x(spec).probs

    def fn(lp):
        return float(np.sum(W * lp)), W

    return fn


def _exact_dpo_fn(ref, spec, beta_d: float):
    C = spec.space.num_conditions
    joint = spec.joint()  # (C, M), winner condition c with x ~ p(x|c)
    pc = spec.p_c
    ref_lp = ref.log_prob_table()

    def fn(lp):
        d = (lp - ref_lp)[:C]  # (C, M)
        m = beta_d * (d[:, None, :] - d[None, :, :])  # (c_w, c_l, M)
        w = joint[:, None, :] * pc[None, :, None]
        value = float(np.sum(w * -log_sigmoid(m)))
        g = w * beta_d * sigmoid(-m)
        grad = np.zeros_like(lp)
        grad[:C] = -g.sum(axis=1) + g.sum(axis=0)
        return value, grad

    return fn


def exact_loss_fn(theta, ref, spec: TrueDistributionSpec, objective: Objective):
    if objective.kind == "cca":
        hp = replace(objective.cca, dropout_prob=objective.dropout_prob)
        return _exact_cca_fn(ref, spec, hp)
    if objective.kind == "dpo":
        return _exact_dpo_fn(ref, spec, objective.beta_d)
    return _exact_linear_fn(spec, objective)


def cca_expectation_loss(theta, ref, spec: TrueDistributionSpec, hp: CCAHyperparams) -> float:
    """Exact ``-E_{p(x,c)} log s(b D) - E_{p(c)} lam_c E_{p(x)} log s(-b D)`` by enumeration."""
    _same_space(theta, ref)
    return _exact_cca_fn(ref, spec, hp)(theta.log_prob_table())[0]


def exact_loss_and_grad(theta, ref, spec, objective: Objective) -> tuple[float, np.ndarray]:
    return dense_loss_gradient(theta, exact_loss_fn(theta, ref, spec, objective))


# the free-form residual estimator


class ResidualEstimator:
    """Free tabular ``r(x, c)`` trained by binary noise-contrastive classification."""

    def __init__(self, space, table: np.ndarray | None = None):
        self.space = space
        shape = (space.num_conditions, space.num_sequences)
        self.table = np.zeros(shape) if table is None else np.array(table, dtype=np.float64)

    def __call__(self, c: int, x) -> float:
        return float(self.table[c, self.space.sequence_index(x)])


def nce_loss(r: ResidualEstimator, data, lam=None) -> float:
    """Exact NCE loss when ``data`` is a spec, batch average when it is an AlignmentBatch."""
    return nce_loss_and_grad(r, data, lam)[0]


def nce_loss_and_grad(r: ResidualEstimator, data, lam=None) -> tuple[float, np.ndarray]:
    t = r.table
    if isinstance(data, TrueDistributionSpec):
        joint, prod = _exact_weights(data)
        lc = np.ones((t.shape[0], 1)) if lam is None else np.broadcast_to(np.asarray(lam, dtype=float).reshape(-1, 1), (t.shape[0], 1))
        value = -np.sum(joint * log_sigmoid(t)) - np.sum(lc * prod * log_sigmoid(-t))
        grad = -joint * sigmoid(-t) + lc * prod * sigmoid(t)
        return float(value), grad
    batch = data
    idx = r.space.as_token_array(batch.tokens) @ (r.space.vocab_size ** np.arange(r.space.seq_len - 1, -1, -1))
    K = len(batch)
    lc = np.ones(K) if lam is None else np.broadcast_to(np.asarray(lam, dtype=float), (r.space.num_conditions,))[batch.c_neg]
    rp, rn = t[batch.c_pos, idx], t[batch.c_neg, idx]
    value = (np.sum(-log_sigmoid(rp)) + np.sum(lc * -log_sigmoid(-rn))) / K
    grad = np.zeros_like(t)
    np.add.at(grad, (batch.c_pos, idx), -sigmoid(-rp) / K)
    np.add.at(grad, (batch.c_neg, idx), lc * sigmoid(rn) / K)
    return float(value), grad


def train_nce(space, data, steps: int, lr: float, rng: np.random.Generator | None = None,
              batch_size: int = 256, lam=None, tol: float = 0.0) -> ResidualEstimator:
    """Gradient descent on the NCE loss; exact when ``data`` is a spec, minibatch otherwise.

    Exact training stops early once the max-abs gradient drops below ``tol``.
    """
    r = ResidualEstimator(space)
    if isinstance(data, TrueDistributionSpec):
        for _ in range(steps):
            _, g = nce_loss_and_grad(r, data, lam)
            if np.max(np.abs(g)) < tol:
                break
            r.table -= lr * g
        return r
    tokens, conds = data
    for _ in range(steps):
        pick = rng.integers(0, len(conds), size=batch_size)
        batch = make_negative_batch((tokens[pick], conds[pick]), rng)
        r.table -= lr * nce_loss_and_grad(r, batch, lam)[1]
    return r


# training loop


@dataclass
class TrajectoryRecord:
    step: int
    loss: float
    mean_logp_pos: float
    mean_logp_neg: float
    kl_to_target: float = math.nan
    collision_fraction: float = math.nan

    def to_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainTrajectory:
    loss_kind: str
    records: list = field(default_factory=list)

    def append(self, rec: TrajectoryRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise InputError(f"trajectory steps must increase: {rec.step} after {self.records[-1].step}")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_rows(self) -> list[dict]:
        return [dict(r.to_row(), loss_kind=self.loss_kind) for r in self.records]


@dataclass(frozen=True)
class Oracle:
    """Attach to training to track ``KL(model || target)`` at guidance scale ``s``."""

    spec: TrueDistributionSpec
    s: float


class _Batches:
    """Epoch-wise shuffled minibatches over a finite dataset."""

    def __init__(self, tokens, conds, batch_size: int, rng: np.random.Generator):
        self.tokens, self.conds, self.rng = tokens, conds, rng
        self.K = min(batch_size, len(conds))
        if self.K < 2:
            raise InputError("empirical training needs at least 2 data pairs")
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self):
        if self.pos + self.K > len(self.order):
            self.order = self.rng.permutation(len(self.conds))
            self.pos = 0
        sel = self.order[self.pos : self.pos + self.K]
        self.pos += self.K
        return self.tokens[sel], self.conds[sel]


def train(model: TabularARModel, objective: Objective, data, steps: int, lr: float,
          rng: np.random.Generator | None = None, ref: TabularARModel | None = None,
          batch_size: int = 256, record_every: int = 1, oracle: Oracle | None = None):
    """Plain fixed-step gradient descent from a copy of ``model``.

    ``data`` is a :class:`TrueDistributionSpec` (exact expectations) or a
    ``(tokens, conds)`` dataset (shuffled minibatches, negatives by shuffling,
    mask dropout). Returns ``(trained_model, TrainTrajectory)``.
    """
    if steps < 0:
        raise InputError(f"steps must be >= 0, got {steps}")
    if record_every < 1:
        raise InputError(f"record_every must be >= 1, got {record_every}")
    theta = model.copy()
    ref = model.copy() if ref is None else ref
    _same_space(theta, ref)
    exact = isinstance(data, TrueDistributionSpec)
    if exact:
        joint, prod = _exact_weights(data)
        C = data.space.num_conditions
        fn = exact_loss_fn(theta, ref, data, objective)
    else:
        if rng is None:
            raise InputError("empirical training requires an rng")
        tokens, conds = data
        batches = _Batches(np.asarray(tokens, dtype=np.int64), np.asarray(conds, dtype=np.int64), batch_size, rng)

    traj = TrainTrajectory(objective.kind)
    ref.logits.flags.writeable = False
    try:
        for t in range(steps + 1):
            if exact:
                lp = theta.log_prob_table()
                value, dlp = fn(lp)
                if not np.isfinite(value) or not np.all(np.isfinite(dlp)):
                    raise NumericalError(f"non-finite loss {value!r} at step {t}")
                pos, neg, coll = float(np.sum(joint * lp[:C])), float(np.sum(prod * lp[:C])), math.nan
            else:
                batch = make_negative_batch(batches.next(), rng)
                if objective.dropout_prob > 0:
                    batch = mask_dropout(batch, objective.dropout_prob, rng, theta.space.mask_id)
                keep = ~batch.unconditional
                try:
                    value, grad = batch_loss_and_grad(theta, ref, batch, objective)
                except NumericalError as e:
                    raise NumericalError(f"step {t}: {e}") from e
                bt = np.asarray(batch.tokens)
                pos = float(theta.log_prob_batch(batch.c_pos, bt).mean())
                neg = float(theta.log_prob_batch(batch.c_neg[keep], bt[keep]).mean()) if keep.any() else math.nan
                coll = batch.collision_fraction()
            if t % record_every == 0 or t == steps:
                kl = float(kl_to_target(theta, oracle.spec, oracle.s).mean()) if oracle is not None else math.nan
                traj.append(TrajectoryRecord(t, float(value), pos, neg, kl, coll))
            if t == steps:
                break
            if exact:
                grad = theta.grad_from_table(dlp)
            theta.logits -= lr * grad
            if not np.all(np.isfinite(theta.logits)):
                raise NumericalError(f"parameters became non-finite after step {t}")
    finally:
        ref.logits.flags.writeable = True
    return theta, traj
