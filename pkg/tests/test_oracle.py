"""Oracle quantities checked against values worked out by hand on a 2x2 fixture."""
import numpy as np
import pytest

from ccalab.errors import DomainError, InputError
from ccalab.oracle import (FAMILIES, TrueDistributionSpec, conditional_residual, lambda_c, lambda_vector,
                           make_spec, marginal_x, mutual_information, posterior, posterior_table, residual_table,
                           target_distribution, target_model, true_model)
from ccalab.space import SequenceSpace


class TestHandComputed:
    def test_marginal(self, tiny_spec):
        np.testing.assert_allclose(marginal_x(tiny_spec).probs, [0.55, 0.45], atol=1e-15)

    def test_residual(self, tiny_spec):
        assert conditional_residual(tiny_spec, 0, (0,)) == pytest.approx(np.log(0.8 / 0.55), abs=1e-14)
        assert conditional_residual(tiny_spec, 1, (1,)) == pytest.approx(np.log(0.7 / 0.45), abs=1e-14)

    def test_target_at_s1(self, tiny_spec):
        # p(x|c)^2 / p(x): 0.64/0.55 and 0.04/0.45
        a, b = 0.64 / 0.55, 0.04 / 0.45
        dist, Z = target_distribution(tiny_spec, 0, 1.0)
        assert Z == pytest.approx(a + b, abs=1e-14)
        np.testing.assert_allclose(dist.probs, [a / (a + b), b / (a + b)], atol=1e-14)

    def test_lambda_equals_normalizer_power(self, tiny_spec):
        _, Z = target_distribution(tiny_spec, 0, 2.0)
        assert lambda_c(tiny_spec, 0, 2.0) == pytest.approx(Z**0.5, rel=1e-14)

    def test_posterior_bayes(self, tiny_spec):
        np.testing.assert_allclose(posterior(tiny_spec, (0,)), [0.4 / 0.55, 0.15 / 0.55], atol=1e-15)


class TestIdentities:
    def test_s0_gives_conditional(self, family_spec):
        for c in range(3):
            dist, Z = target_distribution(family_spec, c, 0.0)
            np.testing.assert_allclose(dist.probs, family_spec.conditional(c).probs, atol=1e-14)
            assert Z == pytest.approx(1.0, abs=1e-14)

    def test_change_of_measure(self, family_spec):
        px = marginal_x(family_spec).probs
        np.testing.assert_allclose((px * np.exp(residual_table(family_spec))).sum(axis=1), 1.0, atol=1e-12)

    def test_posterior_residual(self, family_spec):
        lhs = np.log(posterior_table(family_spec)).T
        np.testing.assert_allclose(lhs, np.log(family_spec.p_c)[:, None] + residual_table(family_spec), atol=1e-12)

    def test_independent_has_zero_residual(self, space):
        spec = make_spec("independent", space, 3)
        np.testing.assert_allclose(residual_table(spec), 0.0, atol=1e-14)
        assert mutual_information(spec) == pytest.approx(0.0, abs=1e-14)
        for s in (0.5, 2.0):
            np.testing.assert_allclose(lambda_vector(spec, s), 1.0, atol=1e-12)

    @pytest.mark.parametrize("s", [0.5, 1.0, 3.0])
    def test_target_model_materializes_target(self, family_spec, s):
        m = target_model(family_spec, s)
        for c in range(3):
            np.testing.assert_allclose(m.distribution(c).probs, target_distribution(family_spec, c, s)[0].probs,
                                       atol=1e-12)

    def test_true_model_mask_row_is_marginal(self, family_spec):
        m = true_model(family_spec)
        np.testing.assert_allclose(m.distribution(3).probs, marginal_x(family_spec).probs, atol=1e-12)


class TestDomain:
    def test_zero_support_residual(self):
        sp = SequenceSpace(2, 1, 2)
        spec = TrueDistributionSpec(sp, np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.5, 0.5]]))
        r = residual_table(spec)
        assert r[0, 1] == -np.inf
        dist, _ = target_distribution(spec, 0, 2.0)
        assert dist.probs[1] == 0.0

    def test_zero_marginal_rejected(self):
        sp = SequenceSpace(2, 1, 1)
        spec = TrueDistributionSpec(sp, np.array([1.0]), np.array([[1.0, 0.0]]))
        with pytest.raises(DomainError):
            conditional_residual(spec, 0, (1,))

    def test_lambda_requires_positive_s(self, tiny_spec):
        with pytest.raises(InputError):
            lambda_c(tiny_spec, 0, 0.0)

    def test_spec_validation(self):
        sp = SequenceSpace(2, 1, 2)
        with pytest.raises(ValueError):
            TrueDistributionSpec(sp, np.array([0.6, 0.6]), np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            TrueDistributionSpec(sp, np.array([0.5, 0.5]), np.array([[0.9, 0.2], [0.5, 0.5]]))


class TestGenerators:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_seeded(self, family, space):
        a, b = make_spec(family, space, 9), make_spec(family, space, 9)
        assert np.array_equal(a.p_x_given_c, b.p_x_given_c)

    def test_unknown_family(self, space):
        with pytest.raises(ValueError):
            make_spec("gaussian", space, 0)

    def test_needle_has_one_peak_per_condition(self, space):
        spec = make_spec("needle", space, 2)
        r = residual_table(spec)
        assert len(set(np.argmax(r, axis=1))) == 3

    def test_text_round_trip(self, family_spec):
        back = TrueDistributionSpec.from_text(family_spec.to_text())
        assert np.array_equal(back.p_x_given_c, family_spec.p_x_given_c)
        assert np.array_equal(back.p_c, family_spec.p_c)

    def test_sample_pairs_frequencies(self, tiny_spec, rng):
        toks, conds = tiny_spec.sample_pairs(100_000, rng)
        joint = np.zeros((2, 2))
        np.add.at(joint, (conds, toks[:, 0]), 1)
        np.testing.assert_allclose(joint / 100_000, tiny_spec.joint(), atol=5e-3)
