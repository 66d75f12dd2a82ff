"""Discrete sequence spaces and the base-V prefix bijection."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, InputError

ENUMERATION_BUDGET = 10**7


@dataclass(frozen=True)
class SequenceSpace:
    """Token sequences of length ``seq_len`` over ``vocab_size`` symbols.

    Conditions are ``0..num_conditions-1``; ``mask_id == num_conditions`` is
    the reserved unconditional sentinel used only by models and batches.
    """

    vocab_size: int
    seq_len: int
    num_conditions: int

    def __post_init__(self):
        V, N, C = self.vocab_size, self.seq_len, self.num_conditions
        for name, val, lo in (("vocab_size", V, 2), ("seq_len", N, 1), ("num_conditions", C, 1)):
            if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val < lo:
                raise ConfigurationError(f"{name} must be an integer >= {lo}, got {val!r}")
        if V**N > ENUMERATION_BUDGET:
            raise ConfigurationError(
                f"V^N = {V}^{N} = {V**N} exceeds the enumeration budget of {ENUMERATION_BUDGET}"
            )

    @property
    def mask_id(self) -> int:
        return self.num_conditions

    @property
    def num_sequences(self) -> int:
        return self.vocab_size**self.seq_len

    @property
    def num_rows(self) -> int:
        """Model condition rows, including the mask row."""
        return self.num_conditions + 1

    def num_prefixes(self, position: int) -> int:
        """Prefix count ``V^(n-1)`` for 1-based ``position``."""
        self._check_position(position)
        return self.vocab_size ** (position - 1)

    @cached_property
    def all_tokens(self) -> np.ndarray:
        """``(V^N, N)`` int64 array of every sequence in lexicographic order."""
        V, N = self.vocab_size, self.seq_len
        idx = np.arange(V**N, dtype=np.int64)
        powers = V ** np.arange(N - 1, -1, -1, dtype=np.int64)
        return (idx[:, None] // powers[None, :]) % V

    def _check_position(self, position: int) -> None:
        if not 1 <= position <= self.seq_len:
            raise InputError(f"position {position} outside 1..{self.seq_len}")

    def check_condition(self, c: int, allow_mask: bool = True) -> int:
        hi = self.mask_id if allow_mask else self.num_conditions - 1
        if not isinstance(c, (int, np.integer)) or isinstance(c, bool) or not 0 <= c <= hi:
            raise InputError(f"condition {c!r} outside 0..{hi}")
        return int(c)

    def check_sequence(self, x) -> tuple[int, ...]:
        x = tuple(int(t) for t in x)
        if len(x) != self.seq_len:
            raise InputError(f"sequence {x} has length {len(x)}, expected {self.seq_len}")
        for t in x:
            if not 0 <= t < self.vocab_size:
                raise InputError(f"token {t} in {x} outside 0..{self.vocab_size - 1}")
        return x

    def sequence_index(self, x) -> int:
        """Position of ``x`` in :func:`enumerate_sequences` order."""
        return encode_prefix(self.check_sequence(x), self.vocab_size)

    def sequence_at(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.num_sequences:
            raise InputError(f"sequence index {index} outside 0..{self.num_sequences - 1}")
        return decode_prefix(index, self.seq_len, self.vocab_size)

    def as_token_array(self, seqs) -> np.ndarray:
        """Validate a batch of sequences and return an ``(K, N)`` int64 array."""
        arr = np.asarray(seqs, dtype=np.int64)
        if arr.ndim == 1 and self.seq_len == 1 and arr.size and not isinstance(seqs[0], (tuple, list, np.ndarray)):
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] != self.seq_len:
            raise InputError(f"expected sequences of length {self.seq_len}, got array of shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            bad = int(np.argmax((arr < 0).any(axis=1) | (arr >= self.vocab_size).any(axis=1)))
            raise InputError(f"token out of range 0..{self.vocab_size - 1} in batch element {bad}: {arr[bad].tolist()}")
        return arr


def encode_prefix(prefix, vocab_size: int) -> int:
    """Base-V integer of ``prefix`` with the first token most significant."""
    i = 0
    for t in prefix:
        i = i * vocab_size + int(t)
    return i


def decode_prefix(index: int, length: int, vocab_size: int) -> tuple[int, ...]:
    if length == 0:
        return ()
    out = []
    for _ in range(length):
        index, t = divmod(index, vocab_size)
        out.append(t)
    return tuple(reversed(out))


def enumerate_sequences(space: SequenceSpace) -> list[tuple[int, ...]]:
    """All ``V^N`` sequences in lexicographic order."""
    return [tuple(int(t) for t in row) for row in space.all_tokens]


@dataclass(frozen=True, eq=False)
class SequenceDistribution:
    """Explicit probability vector over all sequences of ``space``."""

    space: SequenceSpace
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (self.space.num_sequences,):
            raise InputError(f"expected {self.space.num_sequences} probabilities, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise InputError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-10:
            raise InputError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def prob(self, x) -> float:
        return float(self.probs[self.space.sequence_index(x)])

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())
