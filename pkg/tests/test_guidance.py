import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccalab.errors import InputError
from ccalab.guidance import (GuidanceSpec, TabularClassifier, cfg_logits, cfgv2_scale,
                             classifier_guided_sequence_distribution, guided_next_token_distribution,
                             guided_sequence_distribution, sample_guided, train_classifier, train_classifier_exact)
from ccalab.metrics import kl_divergence
from ccalab.model import TabularARModel, softmax
from ccalab.oracle import make_spec, posterior_table, target_distribution, true_model
from ccalab.space import SequenceSpace


def reference_cfg(lc, lu, s):
    p = softmax(lc) ** (1 + s) * softmax(lu) ** (-s)
    return p / p.sum()


class TestPerTokenIdentity:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 5.0))
    def test_matches_power_form(self, seed, s):
        rng = np.random.default_rng(seed)
        lc, lu = rng.normal(size=5) * 3, rng.normal(size=5) * 3
        np.testing.assert_allclose(softmax(cfg_logits(lc, lu, s)), reference_cfg(lc, lu, s), atol=1e-12)

    def test_s0_is_conditional(self, space, rng):
        m = TabularARModel.random(space, rng)
        p = guided_next_token_distribution(m, None, GuidanceSpec("cfg", 0.0), 1, (2,))
        np.testing.assert_allclose(p, m.next_token_probs(1, (2,)), atol=1e-15)

    def test_separate_unconditional_model(self, space, rng):
        cm, um = TabularARModel.random(space, rng), TabularARModel.random(space, rng)
        p = guided_next_token_distribution(cm, um, GuidanceSpec("cfg", 1.5), 0, (1,))
        expected = reference_cfg(cm.slot_logits(0, (1,)), um.slot_logits(space.mask_id, (1,)), 1.5)
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            cfg_logits(np.zeros(3), np.zeros(4), 1.0)

    def test_position_must_match_prefix(self, space):
        with pytest.raises(InputError):
            guided_next_token_distribution(TabularARModel(space), None, GuidanceSpec("cfg", 1.0), 0, (1,), 1)


class TestSequenceLevel:
    @pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
    def test_equals_target_when_n1(self, s):
        spec = make_spec("random-dirichlet", SequenceSpace(4, 1, 3), 7)
        tm = true_model(spec)
        for c in range(3):
            got = guided_sequence_distribution(tm, None, GuidanceSpec("cfg", s), c).probs
            np.testing.assert_allclose(got, target_distribution(spec, c, s)[0].probs, atol=1e-10)

    def test_gap_to_target_when_n2(self, space):
        # per-token guidance composes slot-wise powers, which is not the sequence-level power
        spec = make_spec("random-dirichlet", space, 3)
        tm = true_model(spec)
        gaps = [kl_divergence(guided_sequence_distribution(tm, None, GuidanceSpec("cfg", 2.0), c),
                              target_distribution(spec, c, 2.0)[0]) for c in range(3)]
        assert max(gaps) > 1e-4

    def test_sampler_matches_exact(self, small_space, rng):
        m = TabularARModel.random(small_space, rng)
        g = GuidanceSpec("cfg", 1.0)
        n = 20_000
        counts = np.zeros(4)
        for _ in range(n):
            counts[small_space.sequence_index(sample_guided(m, None, g, 1, rng))] += 1
        np.testing.assert_allclose(counts / n, guided_sequence_distribution(m, None, g, 1).probs, atol=0.015)


class TestCFGv2:
    def test_schedule(self):
        assert [cfgv2_scale(3.0, n, 3) for n in (1, 2, 3)] == [1.0, 2.0, 3.0]
        with pytest.raises(InputError):
            cfgv2_scale(1.0, 0, 3)

    def test_final_position_uses_s_max(self, space, rng):
        m = TabularARModel.random(space, rng)
        a = guided_next_token_distribution(m, None, GuidanceSpec("cfgv2", s_max=2.0), 0, (1,))
        b = guided_next_token_distribution(m, None, GuidanceSpec("cfg", 2.0), 0, (1,))
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_rejects_negative_scale(self):
        with pytest.raises(InputError):
            GuidanceSpec("cfg", -1.0)


class TestClassifierGuidance:
    @pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
    def test_oracle_posterior_gives_target(self, family_spec, s):
        clf = TabularClassifier.from_posterior(family_spec.space, posterior_table(family_spec))
        tm = true_model(family_spec)
        for c in range(3):
            got = classifier_guided_sequence_distribution(tm, clf, s, c).probs
            np.testing.assert_allclose(got, target_distribution(family_spec, c, s)[0].probs, atol=1e-10)

    def test_exact_training_converges_to_posterior(self, space):
        spec = make_spec("random-dirichlet", space, 4)
        clf = train_classifier_exact(spec, 3000)
        np.testing.assert_allclose(np.exp(clf.log_posterior_table()), posterior_table(spec), atol=1e-4)

    def test_sampled_training_approaches_posterior(self, space, rng):
        spec = make_spec("needle", space, 4)
        clf = train_classifier(spec.sample_pairs(200_000, rng), 3000, space=space)
        assert np.max(np.abs(np.exp(clf.log_posterior_table()) - posterior_table(spec))) < 0.02

    def test_empty_dataset(self, space):
        with pytest.raises(InputError):
            train_classifier([], 10, space=space)

    def test_mask_row_not_a_class(self, space):
        clf = TabularClassifier(space)
        with pytest.raises(InputError):
            classifier_guided_sequence_distribution(TabularARModel(space), clf, 1.0, space.mask_id)
