import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccalab.errors import InputError
from ccalab.space import (SequenceDistribution, SequenceSpace, decode_prefix, encode_prefix,
                          enumerate_sequences)


class TestSequenceSpace:
    def test_derived_sizes(self):
        sp = SequenceSpace(3, 2, 4)
        assert sp.mask_id == 4
        assert sp.num_sequences == 9
        assert sp.num_rows == 5
        assert [sp.num_prefixes(n) for n in (1, 2)] == [1, 3]

    @pytest.mark.parametrize("args", [(1, 2, 2), (3, 0, 2), (3, 2, 0), (10, 8, 2)])
    def test_rejects_bad_shapes(self, args):
        with pytest.raises(ValueError):
            SequenceSpace(*args)

    def test_enumeration_is_lexicographic(self):
        seqs = enumerate_sequences(SequenceSpace(2, 3, 1))
        assert len(seqs) == 8
        assert seqs == sorted(seqs)
        assert len(set(seqs)) == 8

    def test_sequence_index_round_trip(self, space):
        for i in range(space.num_sequences):
            assert space.sequence_index(space.sequence_at(i)) == i

    def test_condition_checks(self, space):
        assert space.check_condition(space.mask_id) == space.mask_id
        with pytest.raises(InputError):
            space.check_condition(space.mask_id, allow_mask=False)
        with pytest.raises(InputError):
            space.check_condition(-1)

    @pytest.mark.parametrize("x", [(0,), (0, 3), (0, 1, 2)])
    def test_bad_sequences(self, space, x):
        with pytest.raises(InputError):
            space.check_sequence(x)


class TestPrefixEncoding:
    @given(st.integers(2, 6), st.integers(0, 5), st.data())
    def test_bijection(self, V, n, data):
        i = data.draw(st.integers(0, V**n - 1))
        prefix = decode_prefix(i, n, V)
        assert len(prefix) == n
        assert encode_prefix(prefix, V) == i

    def test_empty_prefix(self):
        assert encode_prefix((), 5) == 0
        assert decode_prefix(0, 0, 5) == ()


class TestSequenceDistribution:
    def test_valid(self, small_space):
        d = SequenceDistribution(small_space, np.full(4, 0.25))
        assert d.prob((1, 0)) == 0.25
        assert d.entropy() == pytest.approx(np.log(4))

    def test_rejects_unnormalized(self, small_space):
        with pytest.raises(ValueError):
            SequenceDistribution(small_space, np.full(4, 0.3))

    def test_read_only(self, small_space):
        d = SequenceDistribution(small_space, np.full(4, 0.25))
        with pytest.raises(ValueError):
            d.probs[0] = 1.0
