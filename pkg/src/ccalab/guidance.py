"""Guided sampling policies: CFG, the linear CFGv2 schedule, classifier guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import InputError
from .model import TabularARModel, log_softmax, softmax
from .space import SequenceDistribution, SequenceSpace

GUIDANCE_KINDS = ("none", "cfg", "cfgv2", "classifier")
CFGV2_SCHEDULE = "s_n = s_max * n / N"

UncondSource = Union[None, TabularARModel, "tuple[TabularARModel, int]"]


@dataclass(frozen=True)
class GuidanceSpec:
    kind: str = "none"
    s: float = 0.0
    s_max: float = 0.0

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise InputError(f"guidance kind must be one of {GUIDANCE_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.s) or self.s < 0:
            raise InputError(f"guidance scale must be finite and >= 0, got {self.s!r}")
        if not np.isfinite(self.s_max) or self.s_max < 0:
            raise InputError(f"s_max must be finite and >= 0, got {self.s_max!r}")

    def scale_at(self, position: int, seq_len: int) -> float:
        if self.kind == "cfgv2":
            return cfgv2_scale(self.s_max, position, seq_len)
        if self.kind == "cfg":
            return self.s
        return 0.0


def cfg_logits(l_cond, l_uncond, s: float) -> np.ndarray:
    """Extrapolated logits ``l_cond + s * (l_cond - l_uncond)``."""
    l_cond = np.asarray(l_cond, dtype=np.float64)
    l_uncond = np.asarray(l_uncond, dtype=np.float64)
    if l_cond.shape != l_uncond.shape:
        raise InputError(f"logit shapes differ: {l_cond.shape} vs {l_uncond.shape}")
    return l_cond + s * (l_cond - l_uncond)


def cfgv2_scale(s_max: float, position: int, seq_len: int) -> float:
    """Linearly increasing scale ``s_max * n / N`` for 1-based position ``n``."""
    if not 1 <= position <= seq_len:
        raise InputError(f"position {position} outside 1..{seq_len}")
    return s_max * position / seq_len


def _resolve_uncond(cond_model: TabularARModel, uncond_source: UncondSource) -> tuple[TabularARModel, int]:
    if uncond_source is None:
        return cond_model, cond_model.space.mask_id
    if isinstance(uncond_source, TabularARModel):
        model, row = uncond_source, uncond_source.space.mask_id
    else:
        model, row = uncond_source
    if (model.space.vocab_size, model.space.seq_len) != (cond_model.space.vocab_size, cond_model.space.seq_len):
        raise InputError("conditional and unconditional models live in different sequence spaces")
    return model, model.space.check_condition(row)


def guided_next_token_distribution(cond_model: TabularARModel, uncond_source: UncondSource,
                                   guidance: GuidanceSpec, c: int, prefix, position: int | None = None) -> np.ndarray:
    """Next-token distribution after applying ``guidance`` at one slot."""
    prefix = tuple(prefix)
    if position is None:
        position = len(prefix) + 1
    if position != len(prefix) + 1:
        raise InputError(f"position {position} inconsistent with prefix of length {len(prefix)}")
    lc = cond_model.slot_logits(c, prefix)
    if guidance.kind == "none":
        return softmax(lc)
    if guidance.kind == "classifier":
        raise InputError("classifier guidance scores whole sequences; use classifier_guided_sequence_distribution")
    umodel, row = _resolve_uncond(cond_model, uncond_source)
    s = guidance.scale_at(position, cond_model.space.seq_len)
    return softmax(cfg_logits(lc, umodel.slot_logits(row, prefix), s))


def guided_log_prob_table(cond_model: TabularARModel, uncond_source: UncondSource,
                          guidance: GuidanceSpec, c: int) -> np.ndarray:
    """Per-token-guided sequence log-likelihoods for condition ``c`` over all ``V^N`` sequences."""
    if guidance.kind == "classifier":
        raise InputError("classifier guidance needs a classifier; use classifier_guided_sequence_distribution")
    space = cond_model.space
    c = space.check_condition(c)
    V, N = space.vocab_size, space.seq_len
    if guidance.kind != "none":
        umodel, row = _resolve_uncond(cond_model, uncond_source)
    out = np.zeros(V**N)
    for n in range(1, N + 1):
        lc = cond_model.block(n)[c]
        if guidance.kind != "none":
            lc = cfg_logits(lc, umodel.block(n)[row], guidance.scale_at(n, N))
        out += np.repeat(log_softmax(lc).ravel(), V ** (N - n))
    return out


def guided_sequence_distribution(cond_model: TabularARModel, uncond_source: UncondSource,
                                 guidance: GuidanceSpec, c: int) -> SequenceDistribution:
    """Exact distribution of ancestral sampling with per-token guidance."""
    p = np.exp(guided_log_prob_table(cond_model, uncond_source, guidance, c))
    return SequenceDistribution(cond_model.space, p / p.sum())


def sample_guided(cond_model: TabularARModel, uncond_source: UncondSource, guidance: GuidanceSpec,
                  c: int, rng: np.random.Generator) -> tuple[int, ...]:
    """One ancestral draw with guidance applied at every position."""
    prefix: list[int] = []
    for n in range(1, cond_model.space.seq_len + 1):
        p = guided_next_token_distribution(cond_model, uncond_source, guidance, c, prefix, n)
        cum = np.cumsum(p)
        prefix.append(int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(p) - 1)))
    return tuple(prefix)


class TabularClassifier:
    """Whole-sequence classifier: one condition-logit vector per sequence."""

    def __init__(self, space: SequenceSpace, logits: np.ndarray | None = None):
        self.space = space
        shape = (space.num_sequences, space.num_conditions)
        self.logits = np.zeros(shape) if logits is None else np.array(logits, dtype=np.float64)
        if self.logits.shape != shape:
            raise InputError(f"classifier logits must have shape {shape}, got {self.logits.shape}")

    def log_posterior_table(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def posterior(self, x) -> np.ndarray:
        return softmax(self.logits[self.space.sequence_index(x)])

    @classmethod
    def from_posterior(cls, space: SequenceSpace, post: np.ndarray) -> "TabularClassifier":
        with np.errstate(divide="ignore"):
            return cls(space, np.log(post))


def _train_on_joint(space: SequenceSpace, joint: np.ndarray, steps: int, lr: float | None) -> TabularClassifier:
    """Full-batch gradient descent on ``-sum_{x,c} q(x,c) log p(c|x)`` for a joint table ``q``."""
    clf = TabularClassifier(space)
    qx = joint.sum(axis=1, keepdims=True)
    if lr is None:
        lr = 2.0 / float(qx.max())
    for _ in range(steps):
        clf.logits -= lr * (qx * softmax(clf.logits, axis=1) - joint)
    return clf


def train_classifier(dataset, steps: int, lr: float | None = None, rng: np.random.Generator | None = None,
                     batch_size: int | None = None, space: SequenceSpace | None = None) -> TabularClassifier:
    """Fit ``p(c|x)`` by cross-entropy on ``(tokens, conds)`` or a list of ``(x, c)`` pairs.

    Without ``batch_size`` this is deterministic full-batch descent on the
    empirical joint; with it, minibatches are drawn from ``rng``. The default
    step size is ``2 / max_x q(x)`` for the empirical marginal ``q``.
    """
    tokens, conds = _as_pairs(dataset)
    if len(conds) == 0:
        raise InputError("cannot train a classifier on an empty dataset")
    if space is None:
        raise InputError("space is required")
    tokens = space.as_token_array(tokens)
    for c in np.unique(conds):
        space.check_condition(int(c), allow_mask=False)
    idx = tokens @ (space.vocab_size ** np.arange(space.seq_len - 1, -1, -1))
    if batch_size is None:
        joint = np.zeros((space.num_sequences, space.num_conditions))
        np.add.at(joint, (idx, conds), 1.0 / len(conds))
        return _train_on_joint(space, joint, steps, lr)
    lr = 1.0 if lr is None else lr
    if rng is None:
        raise InputError("minibatch training requires an rng")
    clf = TabularClassifier(space)
    for _ in range(steps):
        pick = rng.integers(0, len(conds), size=batch_size)
        g = softmax(clf.logits[idx[pick]], axis=1)
        g[np.arange(batch_size), conds[pick]] -= 1.0
        np.add.at(clf.logits, idx[pick], -lr * g / batch_size)
    return clf


def train_classifier_exact(spec, steps: int, lr: float | None = None) -> TabularClassifier:
    """Cross-entropy descent on the exact joint ``p(x, c)`` of a true spec."""
    return _train_on_joint(spec.space, spec.joint().T.copy(), steps, lr)


def _as_pairs(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return dataset[0], np.asarray(dataset[1], dtype=np.int64)
    dataset = list(dataset)
    if not dataset:
        return np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64)
    tokens = np.array([tuple(x) for x, _ in dataset], dtype=np.int64)
    conds = np.array([c for _, c in dataset], dtype=np.int64)
    return tokens, conds


def classifier_guided_sequence_distribution(cond_model: TabularARModel, classifier: TabularClassifier,
                                            s: float, c: int) -> SequenceDistribution:
    """Sequence-level policy ``p(x|c) p(c|x)^s`` renormalized over all sequences."""
    c = cond_model.space.check_condition(c, allow_mask=False)
    if classifier.space.num_sequences != cond_model.space.num_sequences:
        raise InputError("classifier and model cover different sequence spaces")
    lp = cond_model.log_prob_table()[c]
    if s != 0:
        lp = lp + s * classifier.log_posterior_table()[:, c]
    lp -= lp.max()
    p = np.exp(lp)
    return SequenceDistribution(cond_model.space, p / p.sum())
