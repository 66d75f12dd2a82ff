"""Full-context tabular autoregressive models.

Each (condition row, position, prefix) slot owns its own logit vector, so the
model can represent any distribution over sequences. Logits live in one flat
float64 array; position ``n`` (1-based) is a C-ordered ``(C+1, V^(n-1), V)``
block starting at ``offsets[n-1]``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .errors import InputError, NumericalError
from .space import SequenceDistribution, SequenceSpace

MODEL_FORMAT = "ccalab-model"
MODEL_FORMAT_VERSION = 1


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis=axis))


def logit_offsets(space: SequenceSpace) -> np.ndarray:
    V, R = space.vocab_size, space.num_rows
    sizes = [R * V**i * V for i in range(space.seq_len)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


class TabularARModel:
    """Softmax-logit AR model with one logit vector per (row, position, prefix)."""

    def __init__(self, space: SequenceSpace, logits: np.ndarray | None = None):
        self.space = space
        self.offsets = logit_offsets(space)
        size = int(self.offsets[-1])
        if logits is None:
            logits = np.zeros(size)
        logits = np.ascontiguousarray(logits, dtype=np.float64)
        if logits.shape != (size,):
            raise InputError(f"expected flat logits of length {size}, got shape {logits.shape}")
        self.logits = logits

    @classmethod
    def random(cls, space: SequenceSpace, rng: np.random.Generator, scale: float = 1.0) -> "TabularARModel":
        return cls(space, scale * rng.standard_normal(int(logit_offsets(space)[-1])))

    def copy(self) -> "TabularARModel":
        return TabularARModel(self.space, self.logits.copy())

    def block(self, position: int) -> np.ndarray:
        """Writable view of the ``(C+1, V^(n-1), V)`` logits for 1-based ``position``."""
        self.space._check_position(position)
        V, i = self.space.vocab_size, position - 1
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.logits[lo:hi].reshape(self.space.num_rows, V**i, V)

    def slot_logits(self, c: int, prefix) -> np.ndarray:
        c = self.space.check_condition(c)
        prefix = tuple(int(t) for t in prefix)
        if len(prefix) >= self.space.seq_len or any(not 0 <= t < self.space.vocab_size for t in prefix):
            raise InputError(f"invalid prefix {prefix}")
        idx = 0
        for t in prefix:
            idx = idx * self.space.vocab_size + t
        return self.block(len(prefix) + 1)[c, idx]

    def next_token_probs(self, c: int, prefix) -> np.ndarray:
        return softmax(self.slot_logits(c, prefix))

    # likelihoods

    def log_prob(self, c: int, x) -> float:
        """Log-likelihood of sequence ``x`` under condition row ``c`` (nats)."""
        c = self.space.check_condition(c)
        x = self.space.check_sequence(x)
        return float(self.log_prob_batch(np.array([c]), np.array([x]))[0])

    def log_prob_batch(self, conds, tokens) -> np.ndarray:
        conds, tokens = self._check_batch(conds, tokens)
        return kernels.impl.batch_log_prob(self.logits, self.offsets, self.space.vocab_size, conds, tokens)

    def log_prob_table(self) -> np.ndarray:
        """``(C+1, V^N)`` log-likelihood of every (row, sequence) pair."""
        V, N, R = self.space.vocab_size, self.space.seq_len, self.space.num_rows
        out = np.zeros((R, V**N))
        for n in range(1, N + 1):
            lsm = log_softmax(self.block(n)).reshape(R, V**n)
            out += np.repeat(lsm, V ** (N - n), axis=1)
        return out

    def distribution(self, c: int) -> SequenceDistribution:
        c = self.space.check_condition(c)
        lp = self.log_prob_table()[c]
        return SequenceDistribution(self.space, np.exp(lp))

    # sampling

    def sample(self, conds, rng: np.random.Generator) -> np.ndarray:
        """Ancestral samples, one per entry of ``conds``; returns ``(K, N)`` tokens."""
        conds = np.ascontiguousarray(conds, dtype=np.int64)
        for c in np.unique(conds):
            self.space.check_condition(int(c))
        u = rng.random((conds.shape[0], self.space.seq_len))
        return kernels.impl.batch_sample(self.logits, self.offsets, self.space.vocab_size, conds, u)

    def sample_sequence(self, c: int, rng: np.random.Generator) -> tuple[int, ...]:
        c = self.space.check_condition(c)
        return tuple(int(t) for t in self.sample(np.array([c]), rng)[0])

    # gradients

    def grad_from_terms(self, conds, tokens, weights) -> np.ndarray:
        """Gradient of ``sum_k w_k log p(x_k | c_k)`` w.r.t. the flat logits."""
        conds, tokens = self._check_batch(conds, tokens)
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        out = np.zeros_like(self.logits)
        kernels.impl.batch_grad(self.logits, self.offsets, self.space.vocab_size, conds, tokens, weights, out)
        return out

    def grad_from_table(self, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_{c,x} W[c, x] log p(x | c)`` for a dense ``(C+1, V^N)`` weight table."""
        V, N, R = self.space.vocab_size, self.space.seq_len, self.space.num_rows
        if weights.shape != (R, V**N):
            raise InputError(f"weight table must have shape {(R, V**N)}, got {weights.shape}")
        out = np.empty_like(self.logits)
        for n in range(1, N + 1):
            i = n - 1
            w = weights.reshape(R, V**i, V, V ** (N - n)).sum(axis=3)
            g = w - w.sum(axis=2, keepdims=True) * softmax(self.block(n))
            out[self.offsets[i] : self.offsets[i + 1]] = g.ravel()
        return out

    def _check_batch(self, conds, tokens):
        tokens = np.ascontiguousarray(self.space.as_token_array(tokens))
        conds = np.ascontiguousarray(conds, dtype=np.int64).reshape(-1)
        if conds.shape[0] != tokens.shape[0]:
            raise InputError(f"{conds.shape[0]} conditions for {tokens.shape[0]} sequences")
        if conds.size and (conds.min() < 0 or conds.max() > self.space.mask_id):
            bad = int(np.argmax((conds < 0) | (conds > self.space.mask_id)))
            raise InputError(f"condition {conds[bad]} in batch element {bad} outside 0..{self.space.mask_id}")
        return conds, tokens

    # validation

    def normalization_errors(self, tol: float = 1e-12) -> list[tuple[int, int, int, float]]:
        """Slots whose softmax fails to sum to 1; entries are ``(row, position, prefix, sum)``."""
        bad = []
        for n in range(1, self.space.seq_len + 1):
            with np.errstate(invalid="ignore", over="ignore"):
                sums = softmax(self.block(n)).sum(axis=2)
            err = ~(np.abs(sums - 1.0) <= tol)
            for c, p in zip(*np.nonzero(err)):
                bad.append((int(c), n, int(p), float(sums[c, p])))
        return bad

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.logits)):
            i = int(np.argmax(~np.isfinite(self.logits)))
            raise NumericalError(f"non-finite logit at flat index {i}: {self.logits[i]}")

    # persistence

    def to_text(self) -> str:
        V, N, C = self.space.vocab_size, self.space.seq_len, self.space.num_conditions
        lines = [f"{MODEL_FORMAT} {MODEL_FORMAT_VERSION}", f"V {V}", f"N {N}", f"C {C}", f"logits {self.logits.size}"]
        lines.extend(float(v).hex() for v in self.logits)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularARModel":
        lines = text.splitlines()
        head = lines[0].split()
        if len(head) != 2 or head[0] != MODEL_FORMAT:
            raise InputError("not a ccalab model file")
        if int(head[1]) != MODEL_FORMAT_VERSION:
            raise InputError(f"unsupported model format version {head[1]}")
        fields = dict(line.split() for line in lines[1:5])
        space = SequenceSpace(int(fields["V"]), int(fields["N"]), int(fields["C"]))
        count = int(fields["logits"])
        values = np.array([float.fromhex(s) for s in lines[5 : 5 + count]])
        if values.size != count:
            raise InputError(f"model file truncated: expected {count} logits, found {values.size}")
        return cls(space, values)

    def save(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "TabularARModel":
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_distributions(cls, space: SequenceSpace, rows: dict[int, np.ndarray], floor: float = -700.0) -> "TabularARModel":
        """Materialize explicit sequence distributions into the rows they key.

        Slot logits are the log next-token conditionals; zero-probability
        tokens get logit ``floor`` and unreachable prefixes stay uniform.
        """
        V, N = space.vocab_size, space.seq_len
        model = cls(space)
        for c, probs in rows.items():
            c = space.check_condition(c)
            probs = np.asarray(probs, dtype=np.float64)
            for n in range(1, N + 1):
                joint = probs.reshape(V ** (n - 1), V, V ** (N - n)).sum(axis=2)
                tot = joint.sum(axis=1, keepdims=True)
                with np.errstate(divide="ignore", invalid="ignore"):
                    lg = np.log(joint) - np.log(tot)
                lg = np.where(tot > 0, np.maximum(lg, floor), 0.0)
                model.block(n)[c] = lg
        return model


def model_distribution(model: TabularARModel, c: int) -> SequenceDistribution:
    return model.distribution(c)


def sample_sequence(model: TabularARModel, c: int, rng: np.random.Generator) -> tuple[int, ...]:
    return model.sample_sequence(c, rng)


def loss_gradient(
    model: TabularARModel,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    conds,
    tokens,
) -> tuple[float, np.ndarray]:
    """Differentiate a scalar function of per-item log-likelihoods.

    ``loss`` maps the vector ``log p(x_k | c_k)`` to ``(value, dvalue/dlogp)``;
    the chain rule through the softmax conditionals gives the logit gradient.
    """
    lp = model.log_prob_batch(conds, tokens)
    value, dlp = loss(lp)
    if not np.isfinite(value) or not np.all(np.isfinite(dlp)):
        bad = np.nonzero(~np.isfinite(lp) | ~np.isfinite(dlp))[0]
        where = f"batch element {int(bad[0])}" if bad.size else "reduction"
        raise NumericalError(f"non-finite loss {value!r} at {where}")
    return float(value), model.grad_from_terms(conds, tokens, dlp)


def dense_loss_gradient(
    model: TabularARModel,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
) -> tuple[float, np.ndarray]:
    """Like :func:`loss_gradient` but over the full ``(C+1, V^N)`` log-likelihood table."""
    lp = model.log_prob_table()
    value, dlp = loss(lp)
    if not np.isfinite(value) or not np.all(np.isfinite(dlp)):
        bad = np.argwhere(~np.isfinite(dlp))
        where = f"(row, sequence) {tuple(int(v) for v in bad[0])}" if bad.size else "reduction"
        raise NumericalError(f"non-finite loss {value!r} at {where}")
    return float(value), model.grad_from_table(dlp)
