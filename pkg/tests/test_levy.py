import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from volterralift.levy import (
    STREAM_BASE,
    STREAM_PROPOSAL,
    GirsanovWeight,
    IntensityBoundError,
    JumpPath,
    LevyModel,
    girsanov_weight,
    sample_ensemble,
    sample_path,
    substream,
    thinning_sample,
)

SINGLE = LevyModel(np.array([[1.0]]), np.array([2.0]))


def const(c):
    return lambda t, state, i, a: c


class TestModel:
    def test_scalar_marks_promoted(self):
        m = LevyModel(np.array([1.0, -1.0]), np.array([1.0, 3.0]))
        assert m.marks.shape == (2, 1)
        assert m.total_rate == 4.0
        np.testing.assert_allclose(m.probabilities, [0.25, 0.75])

    @pytest.mark.parametrize("marks,rates", [
        ([[0.0]], [1.0]),
        ([[1.0]], [0.0]),
        ([[1.0]], [-1.0]),
        ([[1.0], [2.0]], [1.0]),
        (np.zeros((0, 1)), []),
    ])
    def test_invalid(self, marks, rates):
        with pytest.raises(ValueError):
            LevyModel(np.asarray(marks, dtype=float), np.asarray(rates, dtype=float))

    def test_scaled(self):
        m = SINGLE.scaled(1.5)
        assert m.total_rate == 3.0
        np.testing.assert_array_equal(m.marks, SINGLE.marks)


class TestJumpPath:
    def test_validation(self):
        with pytest.raises(ValueError):
            JumpPath(np.array([0.5, 0.2]), np.array([0, 0]), 1.0)
        with pytest.raises(ValueError):
            JumpPath(np.array([0.0]), np.array([0]), 1.0)
        with pytest.raises(ValueError):
            JumpPath(np.array([1.5]), np.array([0]), 1.0)

    def test_csv_roundtrip(self):
        p = JumpPath(np.array([0.125, 0.5]), np.array([1, 0]), 1.0)
        text = p.to_csv()
        assert text.splitlines()[0] == "t,mark_index"
        back = JumpPath.from_csv(text, 1.0)
        np.testing.assert_array_equal(back.times, p.times)
        np.testing.assert_array_equal(back.marks, p.marks)

    def test_before(self):
        p = JumpPath(np.array([0.1, 0.5, 0.9]), np.array([0, 0, 0]), 1.0)
        assert len(p.before(0.5)) == 1


class TestSampling:
    def test_poisson_mean(self):
        ens = sample_ensemble(SINGLE, 1.0, 100_000, seed=3)
        assert 1.97 <= ens.counts().mean() <= 2.03

    def test_mark_proportion(self):
        m = LevyModel(np.array([[1.0], [2.0]]), np.array([1.0, 3.0]))
        ens = sample_ensemble(m, 1.0, 100_000, seed=4)
        assert 0.745 <= np.mean(ens.marks == 1) <= 0.755

    def test_seed_determinism(self):
        a = sample_path(SINGLE, 1.0, substream(9, 5))
        b = sample_path(SINGLE, 1.0, substream(9, 5))
        np.testing.assert_array_equal(a.times, b.times)
        c = sample_path(SINGLE, 1.0, substream(9, 6))
        assert not (len(a) == len(c) and np.array_equal(a.times, c.times))

    def test_ensemble_matches_single_paths(self):
        ens = sample_ensemble(SINGLE, 1.0, 50, seed=2, first_path=10)
        for p in (0, 17, 49):
            single = sample_path(SINGLE, 1.0, substream(2, 10 + p))
            np.testing.assert_array_equal(ens.path_at(p).times, single.times)

    def test_streams_differ_by_tag(self):
        a = substream(1, 0, STREAM_BASE).random(4)
        b = substream(1, 0, STREAM_PROPOSAL).random(4)
        assert not np.array_equal(a, b)

    def test_nonpositive_horizon(self):
        with pytest.raises(ValueError):
            sample_path(SINGLE, 0.0, substream(0, 0))


class TestThinning:
    def test_identity_tilt_matches_base(self):
        gaps_thin, gaps_base = [], []
        for p in range(10_000):
            a = thinning_sample(SINGLE, const(1.0), 1.0, 1.0, substream(5, p))
            b = sample_path(SINGLE, 1.0, substream(6, p))
            gaps_thin.append(np.diff(np.concatenate(([0.0], a.times))))
            gaps_base.append(np.diff(np.concatenate(([0.0], b.times))))
        res = ks_2samp(np.concatenate(gaps_thin), np.concatenate(gaps_base))
        assert res.pvalue > 0.01

    def test_constant_tilt_mean(self):
        n = [len(thinning_sample(SINGLE, const(1.5), 2.0, 1.0, substream(1, p))) for p in range(100_000)]
        assert 2.97 <= np.mean(n) <= 3.03

    def test_bound_violation(self):
        with pytest.raises(IntensityBoundError, match="mark=0"):
            for p in range(20):
                thinning_sample(SINGLE, const(4.0), 2.0, 1.0, substream(0, p))

    def test_nonpositive_rate(self):
        with pytest.raises(IntensityBoundError):
            for p in range(20):
                thinning_sample(SINGLE, const(0.0), 2.0, 1.0, substream(0, p))

    def test_driver_sees_accepted_history(self):
        seen = []

        def driver(t, history):
            assert np.all(history.times < t)
            seen.append(len(history))
            return len(history), 0

        path = thinning_sample(SINGLE, lambda t, s, i, a: 1.0 if s < 2 else 0.5, 1.0, 5.0,
                               substream(3, 0), driver)
        assert seen == sorted(seen)
        assert len(path) >= min(2, len(seen))


class TestGirsanov:
    def test_identity(self):
        path = sample_path(SINGLE, 1.0, substream(0, 1))
        w = girsanov_weight(path, const(1.0), SINGLE, 1.0)
        assert w.weight == 1.0

    def test_three_event_closed_form(self):
        path = JumpPath(np.array([0.2, 0.5, 0.7]), np.array([0, 0, 0]), 1.0)
        w = girsanov_weight(path, const(1.5), SINGLE, 1.0)
        assert abs(w.weight - 1.5**3 * math.exp(-1.0)) < 1e-12
        assert abs(w.weight - 1.2415931139536178) < 1e-12

    def test_compensator_identity(self):
        for p in range(20):
            path = sample_path(SINGLE, 2.0, substream(8, p))
            w = girsanov_weight(path, const(0.7), SINGLE, 2.0)
            assert abs(w.compensator - (0.7 - 1.0) * 2.0 * 2.0) < 1e-12

    def test_parts_reproduce_log_weight(self):
        w = GirsanovWeight(np.log([1.5, 0.5, 2.0]), 0.3)
        assert abs(w.log_weight - (math.log(1.5 * 0.5 * 2.0) - 0.3)) < 1e-12

    def test_nonpositive_event_rate(self):
        path = JumpPath(np.array([0.5]), np.array([0]), 1.0)
        with pytest.raises(IntensityBoundError):
            girsanov_weight(path, const(0.0), SINGLE, 1.0)

    def test_martingale_mean(self):
        w = np.array([girsanov_weight(sample_path(SINGLE, 1.0, substream(2, p)), const(1.5), SINGLE).weight
                      for p in range(100_000)])
        assert abs(w.mean() - 1.0) <= 3 * w.std(ddof=1) / math.sqrt(w.size)

    def test_state_dependent_driver(self):
        # r depends on the number of earlier events; piecewise constant between events
        def r(t, n, i, a):
            return 0.5 if n % 2 else 1.5

        def driver(t, history):
            return len(history), None

        path = JumpPath(np.array([0.25, 0.5]), np.array([0, 0]), 1.0)
        w = girsanov_weight(path, r, SINGLE, 1.0, driver=driver)
        # pieces [0,.25] r=1.5, [.25,.5] r=0.5, [.5,1] r=1.5; events see n=0 and n=1
        comp = 2.0 * (0.5 * 0.25 - 0.5 * 0.25 + 0.5 * 0.5)
        assert abs(w.compensator - comp) < 1e-12
        assert abs(w.log_weight - (math.log(1.5) + math.log(0.5) - comp)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 3.0), st.integers(0, 10_000))
    def test_constant_closed_form(self, c, seed):
        path = sample_path(SINGLE, 1.0, substream(seed, 0))
        w = girsanov_weight(path, const(c), SINGLE, 1.0)
        expect = len(path) * math.log(c) - (c - 1.0) * 2.0
        assert abs(w.log_weight - expect) < 1e-12 * max(1.0, abs(expect))


def test_importance_sampling_consistency():
    # phi = 1{at least three events}; base-law estimate of E[Lambda phi] vs tilted-law E[phi]
    n = 100_000
    c = 1.5
    base = np.array([len(sample_path(SINGLE, 1.0, substream(21, p))) for p in range(n)])
    lam = c**base * math.exp(-(c - 1.0) * 2.0)
    est_w = lam * (base >= 3)
    tilt = np.array([len(thinning_sample(SINGLE, const(c), 2.0, 1.0, substream(22, p))) >= 3
                     for p in range(n)], dtype=float)
    z = 2.576
    lo1, hi1 = est_w.mean() - z * est_w.std() / math.sqrt(n), est_w.mean() + z * est_w.std() / math.sqrt(n)
    lo2, hi2 = tilt.mean() - z * tilt.std() / math.sqrt(n), tilt.mean() + z * tilt.std() / math.sqrt(n)
    assert lo1 <= hi2 and lo2 <= hi1
