import math

import numpy as np
import pytest

from mfdiff import rum
from mfdiff.rum import (
    ChoiceModel,
    FeatureMapSpec,
    FeatureSpecError,
    NeighborComposition,
    PluginKernel,
    StateSpace,
    StateSpaceError,
    TableKernel,
    TransitionRecord,
    UtilityError,
    choice_probs,
    fit_mle,
    fit_plugin,
    sample_next_state,
    softmax,
    utilities,
)
from synth import random_choice_model, sample_records


def intercept_model(values, reference=2):
    space = StateSpace(("T", "H", "D"), reference)
    return ChoiceModel(space, FeatureMapSpec(("const",)), np.asarray(values, dtype=float))


class TestStateSpace:
    def test_defaults(self):
        assert StateSpace().labels == ("T", "H", "D")
        assert StateSpace.two_state().reference_state == 1

    def test_invalid(self):
        with pytest.raises(StateSpaceError):
            StateSpace(("T",), 0)
        with pytest.raises(StateSpaceError):
            StateSpace(("T", "T"), 0)
        with pytest.raises(StateSpaceError):
            StateSpace(("T", "H"), 5)


class TestFeatures:
    def test_unknown_token(self):
        with pytest.raises(FeatureSpecError):
            FeatureMapSpec(("wat",)).validate(StateSpace())

    def test_w_requires_dim(self):
        with pytest.raises(FeatureSpecError):
            FeatureMapSpec(("const", "w"))

    def test_dim_counts_context(self):
        spec = FeatureMapSpec(("const", "w"), context_dim=3)
        assert spec.dim(StateSpace()) == 4

    def test_fraction_zero_when_isolated(self):
        space = StateSpace()
        spec = FeatureMapSpec(("frac:T", "u*frac:T"))
        row = spec.phi(space, 2.0, [0, 0, 0], 0)
        assert row.tolist() == [0.0, 0.0]

    def test_phi_values(self):
        space = StateSpace()
        spec = FeatureMapSpec(("const", "u", "frac:H", "prev:T", "log1p_l"))
        row = spec.phi(space, 0.5, [1, 3, 0], 0)
        assert row == pytest.approx([1.0, 0.5, 0.75, 1.0, math.log(5)])


class TestUtilitiesAndProbs:
    def test_zero_coeffs(self):
        m = intercept_model([0.0, 0.0])
        assert utilities(m, 0.0, [0, 0, 0], None, 0).tolist() == [0.0, 0.0, 0.0]
        assert choice_probs(m, 0.0, [0, 0, 0], None, 0) == pytest.approx([1 / 3] * 3)

    def test_log2_intercept(self):
        # constant feature, theta = (ln 2, 0), reference D
        m = intercept_model([math.log(2), 0.0])
        r = utilities(m, 0.0, [0, 0, 0], None, 0)
        assert r == pytest.approx([math.log(2), 0.0, 0.0])
        assert choice_probs(m, 0.0, [0, 0, 0], None, 0) == pytest.approx([0.5, 0.25, 0.25])

    def test_reference_pinned_for_all_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = random_choice_model(rng)
            k = m.n_states
            counts = rng.multinomial(int(rng.integers(0, 12)), np.full(k, 1 / k))
            r = utilities(m, float(rng.normal()), counts, None, int(rng.integers(k)))
            assert r[m.space.reference_state] == 0.0

    def test_fraction_only_model_isolated_node(self):
        space = StateSpace()
        m = ChoiceModel(space, FeatureMapSpec(("frac:T",)), np.array([3.0, -1.0]))
        r = utilities(m, 0.0, [0, 0, 0], None, 1)
        assert r.tolist() == [0.0, 0.0, 0.0]

    def test_dimension_mismatch(self):
        m = intercept_model([0.1, 0.2])
        with pytest.raises(UtilityError):
            utilities(m, 0.0, [0, 0], None, 0)

    def test_w_dimension_mismatch(self):
        space = StateSpace.two_state()
        m = ChoiceModel(space, FeatureMapSpec(("w",), context_dim=2), np.array([0.1, 0.2]))
        with pytest.raises(FeatureSpecError):
            utilities(m, 0.0, [0, 0], [1.0], 0)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = rng.normal(size=4)
            assert softmax(r) == pytest.approx(softmax(r + rng.normal()), abs=1e-12)

    def test_argmax_consistency(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            m = random_choice_model(rng)
            k = m.n_states
            counts = rng.multinomial(8, np.full(k, 1 / k))
            u = float(rng.normal())
            z1 = int(rng.integers(k))
            r = utilities(m, u, counts, None, z1)
            p = choice_probs(m, u, counts, None, z1)
            assert int(np.argmax(r)) == int(np.argmax(p))

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            m = random_choice_model(rng)
            k = m.n_states
            counts = rng.multinomial(5, np.full(k, 1 / k))
            p = choice_probs(m, 0.3, counts, None, 0)
            assert abs(p.sum() - 1.0) < 1e-12
            assert p.min() > 0


class TestGumbelEquivalence:
    def test_gumbel_argmax_matches_softmax(self):
        rng = np.random.default_rng(4)
        m = random_choice_model(rng, k=3)
        counts = rng.multinomial(6, [0.4, 0.4, 0.2])
        r = utilities(m, 0.7, counts, None, 1)
        p = choice_probs(m, 0.7, counts, None, 1)
        eps = rng.gumbel(size=(100000, 3))
        freq = np.bincount(np.argmax(r + eps, axis=1), minlength=3) / 100000
        assert np.abs(freq - p).max() <= 0.01


class TestSampling:
    def test_degenerate(self):
        space = StateSpace()
        kern = TableKernel(space, np.array([[1.0, 0, 0]] * 3))
        rng = np.random.default_rng(0)
        assert all(sample_next_state(kern, 0.0, [1, 0, 0], None, z, rng) == 0 for z in range(3))

    def test_uniform_frequencies(self):
        m = intercept_model([0.0, 0.0])
        rng = np.random.default_rng(5)
        draws = np.array([sample_next_state(m, 0.0, [0, 0, 0], None, 0, rng)
                          for _ in range(30000)])
        freq = np.bincount(draws, minlength=3) / 30000
        assert np.abs(freq - 1 / 3).max() <= 0.01

    def test_reproducible(self):
        m = intercept_model([0.3, -0.2])
        seq = [
            [sample_next_state(m, 0.0, [1, 2, 0], None, 1, np.random.default_rng(9))
             for _ in range(1)][0]
            for _ in range(3)
        ]
        assert len(set(seq)) == 1
        rng1, rng2 = np.random.default_rng(11), np.random.default_rng(11)
        s1 = [sample_next_state(m, 0.0, [1, 2, 0], None, 1, rng1) for _ in range(50)]
        s2 = [sample_next_state(m, 0.0, [1, 2, 0], None, 1, rng2) for _ in range(50)]
        assert s1 == s2


class TestFitMle:
    def test_intercepts_recover_log_odds(self):
        rng = np.random.default_rng(6)
        space = StateSpace(("T", "H", "D"), 2)
        true = intercept_model([0.8, -0.4])
        records = sample_records(true, 10000, rng, l_range=(0, 10))
        fit = fit_mle(records, FeatureMapSpec(("const",)), space)
        counts = np.bincount([r.next for r in records], minlength=3)
        # intercepts against the reference equal the log odds of the category counts
        log_odds = np.log(counts[:2] / counts[2])
        assert np.abs(fit.model.coeffs - log_odds).max() <= 0.05

    def test_two_feature_recovery(self):
        rng = np.random.default_rng(7)
        space = StateSpace(("T", "H", "D"), 2)
        fmap = FeatureMapSpec(("const", "frac:T"))
        theta = np.array([0.5, 1.2, -0.3, 0.6])
        true = ChoiceModel(space, fmap, theta)
        records = sample_records(true, 50000, rng)
        fit = fit_mle(records, fmap, space, l2=1e-6)
        assert fit.converged
        assert np.linalg.norm(fit.model.coeffs - theta) <= 0.1

    def test_single_record_regularized(self):
        space = StateSpace.two_state()
        records = [TransitionRecord(1, 0, 0.0, (2, 1), 1, 0)]
        fit = fit_mle(records, FeatureMapSpec(("const", "frac:T")), space, l2=1.0)
        assert np.all(np.isfinite(fit.model.coeffs))
        assert fit.converged
        # the regularized optimum still improves on theta = 0
        assert fit.log_likelihood >= math.log(0.5) - 1e-12

    def test_complete_separation_reports_nonconverged(self):
        space = StateSpace.two_state()
        fmap = FeatureMapSpec(("frac:T",))
        records = [TransitionRecord(1, 0, 0.0, (4, 0), 1, 0),
                   TransitionRecord(2, 0, 0.0, (0, 4), 1, 1)]
        fit = fit_mle(records, fmap, space, l2=0.0, max_iter=300)
        assert not fit.converged
        assert np.all(np.isfinite(fit.model.coeffs))

    def test_empty_records_error(self):
        with pytest.raises(ValueError):
            fit_mle([], FeatureMapSpec(("const",)), StateSpace.two_state())

    def test_objective_concavity(self):
        rng = np.random.default_rng(8)
        space = StateSpace.two_state()
        fmap = FeatureMapSpec(("const", "frac:T"))
        true = ChoiceModel(space, fmap, np.array([0.2, 0.7]))
        records = sample_records(true, 500, rng)

        def objective(theta):
            return rum.log_likelihood(ChoiceModel(space, fmap, theta), records)

        for _ in range(20):
            t1, t2 = rng.normal(size=2), rng.normal(size=2)
            mid = objective((t1 + t2) / 2)
            assert mid >= (objective(t1) + objective(t2)) / 2 - 1e-9

    def test_fit_beats_zero(self):
        rng = np.random.default_rng(9)
        space = StateSpace.two_state()
        fmap = FeatureMapSpec(("const", "frac:T"))
        true = ChoiceModel(space, fmap, np.array([-0.5, 1.5]))
        records = sample_records(true, 2000, rng)
        fit = fit_mle(records, fmap, space)
        zero = ChoiceModel(space, fmap, np.zeros(2))
        assert fit.log_likelihood >= rum.log_likelihood(zero, records)


class TestFitPlugin:
    def test_no_records_uniform(self):
        kern = fit_plugin([], StateSpace(), buckets=4)
        assert np.allclose(kern.table, 1 / 3)

    def test_laplace_arithmetic(self):
        space = StateSpace()
        records = [TransitionRecord(i, 0, 0.0, (5, 0, 0), 0, 0) for i in range(98)]
        kern = fit_plugin(records, space, buckets=1)
        # all records land in the top q-bucket with prev = T
        assert kern.table[0, 0, 0] == pytest.approx(99 / 101)

    def test_isolated_bucket(self):
        space = StateSpace.two_state()
        records = [TransitionRecord(1, 0, 0.0, (0, 0), 0, 1)]
        kern = fit_plugin(records, space, buckets=3)
        assert kern.transition_probs(0.0, [0, 0], 0)[1] == pytest.approx(2 / 3)

    def test_plugin_matches_choice_probs(self):
        rng = np.random.default_rng(10)
        space = StateSpace.two_state()
        fmap = FeatureMapSpec(("const", "frac:T"))
        true = ChoiceModel(space, fmap, np.array([-0.4, 0.9]))
        records = sample_records(true, 100000, rng, l_range=(10, 30))
        kern = fit_plugin(records, space, buckets=10)
        for b in range(10):
            q_c = (b + 0.5) / 10
            l = 20
            counts = [round(q_c * l), l - round(q_c * l)]
            for prev in range(2):
                want = choice_probs(true, 0.0, counts, None, prev)
                got = kern.table[b, prev]
                assert np.abs(want - got).max() <= 0.05


class TestRecordsIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        m = intercept_model([0.1, -0.1])
        records = sample_records(m, 50, rng, l_range=(0, 6))
        path = tmp_path / "log.jsonl"
        rum.write_records_jsonl(path, records, m.space)
        loaded, space = rum.read_records_jsonl(path)
        assert space.labels == ("T", "H", "D")
        assert space.reference_state == 2
        assert loaded == records

    def test_kernel_json_roundtrip(self, tmp_path):
        m = intercept_model([0.4, 0.2])
        path = tmp_path / "model.json"
        rum.save_kernel(path, m)
        loaded = rum.load_kernel(path)
        assert isinstance(loaded, ChoiceModel)
        assert loaded.space == m.space
        assert np.allclose(loaded.coeffs, m.coeffs)

    def test_plugin_json_roundtrip(self, tmp_path):
        kern = fit_plugin([TransitionRecord(1, 0, 0.0, (1, 1), 0, 1)],
                          StateSpace.two_state(), buckets=2)
        path = tmp_path / "plugin.json"
        rum.save_kernel(path, kern)
        loaded = rum.load_kernel(path)
        assert isinstance(loaded, PluginKernel)
        assert np.allclose(loaded.table, kern.table)


def test_neighbor_composition():
    comp = NeighborComposition((2, 0, 1))
    assert comp.l == 3
    assert NeighborComposition.from_states([0, 0, 2], 3).counts == (2, 0, 1)
    with pytest.raises(ValueError):
        NeighborComposition((-1, 0))
