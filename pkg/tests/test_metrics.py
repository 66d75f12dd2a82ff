import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccalab.errors import DomainError, InputError
from ccalab.metrics import (MetricsRecord, evaluate_policy, fidelity_and_diversity, kl_divergence, kl_to_target,
                            target_tables, tv_distance)
from ccalab.oracle import make_spec, true_model
from ccalab.space import SequenceDistribution, SequenceSpace

probs = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8)


class TestDivergences:
    @settings(max_examples=100)
    @given(probs, st.data())
    def test_kl_properties(self, a, data):
        p = np.array(a) / sum(a)
        b = data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(a), max_size=len(a)))
        q = np.array(b) / sum(b)
        assert kl_divergence(p, q) >= 0
        assert kl_divergence(p, p) == 0.0
        assert 0 <= tv_distance(p, q) <= 1

    def test_known_value(self):
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(
            0.5 * np.log(2) + 0.5 * np.log(2 / 3), abs=1e-15)
        assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_zero_mass_in_p_is_ignored(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))

    def test_support_violation(self):
        sp = SequenceSpace(2, 1, 1)
        with pytest.raises(DomainError, match=r"\(1,\)"):
            kl_divergence(SequenceDistribution(sp, np.array([0.5, 0.5])), SequenceDistribution(sp, np.array([1.0, 0.0])))

    def test_space_mismatch(self):
        a = SequenceDistribution(SequenceSpace(2, 1, 1), np.array([0.5, 0.5]))
        b = SequenceDistribution(SequenceSpace(2, 1, 2), np.array([0.5, 0.5]))
        with pytest.raises(InputError):
            kl_divergence(a, b)


class TestFidelityDiversity:
    def test_independent_has_zero_fidelity(self, space):
        spec = make_spec("independent", space, 0)
        fid, tis, _ = fidelity_and_diversity(true_model(spec), spec)
        assert fid == pytest.approx(0.0, abs=1e-12)
        assert tis == pytest.approx(1.0, abs=1e-12)

    def test_diversity_of_uniform(self, space, family_spec):
        Q = np.full((3, space.num_sequences), 1 / space.num_sequences)
        assert fidelity_and_diversity(Q, family_spec)[2] == pytest.approx(np.log(9))

    def test_fidelity_of_true_model_is_mutual_information(self, family_spec):
        from ccalab.oracle import mutual_information
        fid, _, _ = fidelity_and_diversity(true_model(family_spec), family_spec)
        assert fid == pytest.approx(mutual_information(family_spec), abs=1e-12)

    def test_monotone_in_s(self, family_spec):
        vals = [fidelity_and_diversity(target_tables(family_spec, s), family_spec) for s in (0, 0.5, 1, 2, 3)]
        fids, divs = [v[0] for v in vals], [v[2] for v in vals]
        assert all(b >= a - 1e-12 for a, b in zip(fids, fids[1:]))
        assert all(b <= a + 1e-12 for a, b in zip(divs, divs[1:]))


class TestRecords:
    def test_target_has_zero_kl(self, family_spec):
        T = target_tables(family_spec, 1.5)
        np.testing.assert_allclose(kl_to_target(T, family_spec, 1.5), 0.0, atol=1e-12)

    def test_evaluate_and_round_trip(self, family_spec):
        rec = evaluate_policy(true_model(family_spec), family_spec, 1.0, run_id="a", loss_kind="pretrained", seed=3)
        assert rec.kl_to_target == pytest.approx(np.mean(rec.kl_per_condition))
        assert "wall_clock_s" not in rec.to_row()
        assert MetricsRecord.from_row(rec.to_row(include_timing=True)) == rec
