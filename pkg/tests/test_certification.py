import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from ndcert.certification import (
    ABSTAIN,
    CertificationRecord,
    SmoothingConfig,
    certify_lipschitz,
    clopper_pearson_lower,
    dc_radius,
    empirical_bernstein_lower,
    empirical_bernstein_upper,
    lipschitz_bound_dc,
    phi_inverse,
    smoothed_certify,
    smoothed_predict,
    unit_box_map,
)
from ndcert.classifiers import ClassifierConfig, DiffusionClassifier
from ndcert.denoiser import AnalyticDenoiser, WeightScheme
from ndcert.schedule import NoiseSchedule, build_geometric_schedule, uniform_subset


def binomial_tail_lower(k: int, n: int, alpha: float) -> float:
    """Oracle: bisect p so that P(Bin(n, p) >= k) = alpha, exact tail sums."""
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        tail = sum(math.comb(n, j) * mid**j * (1 - mid) ** (n - j) for j in range(k, n + 1))
        if tail < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestPhiInverse:
    def test_median(self):
        assert phi_inverse(0.5) == 0.0

    def test_known_quantile(self):
        assert phi_inverse(0.9) == pytest.approx(1.281552, abs=1e-6)

    def test_against_high_precision_oracle(self):
        grid = np.concatenate(
            [
                np.array([1e-12, 1e-9, 1e-6, 1e-3, 0.02424, 0.02426]),
                np.linspace(0.001, 0.999, 199),
                1.0 - np.array([1e-12, 1e-9, 1e-6]),
            ]
        )
        for p in grid:
            assert abs(phi_inverse(float(p)) - ndtri(p)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for p in rng.uniform(1e-6, 0.5, size=50):
            assert phi_inverse(1.0 - p) == pytest.approx(-phi_inverse(p), abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.7])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            phi_inverse(p)


class TestClopperPearsonLower:
    def test_zero_successes(self):
        assert clopper_pearson_lower(0, 50, 0.05) == 0.0

    def test_all_successes_closed_form(self):
        # betainc(n, 1, x) = x^n, so the bound is alpha^(1/n)
        assert clopper_pearson_lower(100, 100, 0.001) == pytest.approx(
            0.001 ** (1 / 100), abs=1e-10
        )

    def test_against_binomial_tail_oracle(self):
        got = clopper_pearson_lower(90, 100, 0.05)
        assert got == pytest.approx(binomial_tail_lower(90, 100, 0.05), abs=1e-8)

    @given(
        n=st.integers(2, 200),
        data=st.data(),
        alpha=st.floats(1e-4, 0.5),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_k(self, n, data, alpha):
        k = data.draw(st.integers(0, n - 1))
        assert clopper_pearson_lower(k, n, alpha) <= clopper_pearson_lower(k + 1, n, alpha) + 1e-12

    def test_monotone_in_alpha(self):
        values = [clopper_pearson_lower(40, 60, a) for a in (0.001, 0.01, 0.05, 0.2)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            clopper_pearson_lower(5, 4, 0.05)
        with pytest.raises(ValueError):
            clopper_pearson_lower(1, 0, 0.05)
        with pytest.raises(ValueError):
            clopper_pearson_lower(1, 4, 1.5)


class TestEmpiricalBernstein:
    def test_constant_samples_drop_variance_term(self):
        n, delta, c = 20, 0.05, 0.66
        got = empirical_bernstein_lower(np.full(n, c), delta)
        assert got == pytest.approx(c - 7 * math.log(2 / delta) / (3 * (n - 1)), rel=1e-12)

    def test_never_exceeds_mean(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            x = rng.uniform(0, 1, size=rng.integers(2, 50))
            assert empirical_bernstein_lower(x, 0.1) <= float(x.mean())

    def test_coverage(self):
        # bound should undershoot the true mean in all but <= delta of trials
        rng = np.random.default_rng(2)
        p, n, delta, trials = 0.7, 500, 0.05, 2000
        violations = 0
        for _ in range(trials):
            x = (rng.random(n) < p).astype(float)
            violations += empirical_bernstein_lower(x, delta) > p
        assert violations / trials <= delta + 0.01

    def test_upper_is_mirror(self):
        x = np.array([0.2, 0.4, 0.9, 0.5])
        got = empirical_bernstein_upper(x, 0.1)
        assert got == pytest.approx(1.0 - empirical_bernstein_lower(1.0 - x, 0.1), rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            empirical_bernstein_lower(np.array([0.5]), 0.1)
        with pytest.raises(ValueError):
            empirical_bernstein_lower(np.array([0.5, 1.2]), 0.1)


class TestLipschitzBound:
    def test_single_timestep_value(self):
        # w = 1, sigma = 1, D = 4: (1/(2 sqrt 2)) (sqrt(2/pi) + 1)
        sched = NoiseSchedule(np.array([1.0, 2.0]))
        sub = uniform_subset(sched, 1, 0, 0)
        got = lipschitz_bound_dc(sched, sub, WeightScheme.uniform(), dim=4)
        expected = (math.sqrt(2 / math.pi) + 1.0) / (2 * math.sqrt(2))
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.6357, abs=1e-4)

    def test_monotone_nonincreasing_in_dim(self):
        sched = build_geometric_schedule(0.1, 10.0, 8)
        sub = uniform_subset(sched, 4, 0, sched.T - 1)
        vals = [
            lipschitz_bound_dc(sched, sub, WeightScheme.uniform(), d) for d in (2, 8, 64, 3072)
        ]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_matches_closed_form(self):
        from ndcert.denoiser import weight_at

        sched = build_geometric_schedule(0.1, 10.0, 16)
        sub = uniform_subset(sched, 5, 0, sched.T - 1)
        scheme = WeightScheme.derived_elbo()
        dim = 6
        expected = sum(
            weight_at(scheme, sched, t) / sched.sigmas[t] for t in sub
        ) * (math.sqrt(2 / math.pi) + 2 / math.sqrt(dim)) / (2 * math.sqrt(2) * len(sub))
        assert lipschitz_bound_dc(sched, sub, scheme, dim) == pytest.approx(expected, rel=1e-12)

    def test_zero_sigma_rejected(self):
        sched = NoiseSchedule(np.array([0.0, 1.0, 2.0]))
        sub = uniform_subset(sched, 1, 0, 0)
        with pytest.raises(ZeroDivisionError):
            lipschitz_bound_dc(sched, sub, WeightScheme.uniform(), 4)


class TestDcRadius:
    def test_full_gap_single_timestep(self):
        sched = NoiseSchedule(np.array([1.0, 2.0]))
        sub = uniform_subset(sched, 1, 0, 0)
        got = dc_radius(1.0, 0.0, sched, sub, WeightScheme.uniform(), dim=4)
        assert got == pytest.approx(math.sqrt(2) / (1 + math.sqrt(2 / math.pi)), rel=1e-12)
        assert got == pytest.approx(0.7866, abs=5e-5)

    def test_zero_gap_zero_radius(self):
        sched = NoiseSchedule(np.array([1.0, 2.0]))
        sub = uniform_subset(sched, 1, 0, 0)
        assert dc_radius(0.4, 0.4, sched, sub, WeightScheme.uniform(), 4) == 0.0
        assert dc_radius(0.3, 0.5, sched, sub, WeightScheme.uniform(), 4) == 0.0

    def test_radius_is_gap_over_twice_lipschitz(self):
        sched = build_geometric_schedule(0.2, 8.0, 10)
        sub = uniform_subset(sched, 4, 0, sched.T - 1)
        scheme = WeightScheme.ddpm()
        bound = lipschitz_bound_dc(sched, sub, scheme, 4)
        got = dc_radius(0.9, 0.2, sched, sub, scheme, 4)
        assert got == pytest.approx(0.7 / (2 * bound), rel=1e-12)


class TestCertifyLipschitz:
    def test_indistinguishable_classes_radius_zero(self, gm_identical):
        den = AnalyticDenoiser(gm_identical)
        sched = build_geometric_schedule(0.1, 20.0, 16)
        cfg = ClassifierConfig("dc", t_prime=4, mc_per_timestep=1)
        clf = DiffusionClassifier(den, sched, cfg)
        cert = certify_lipschitz(np.array([0.4, 0.4]), clf, n_samples=10, delta=0.05, seed=0)
        assert cert.radius == 0.0
        assert cert.p_a_lower <= cert.p_b_upper

    def test_well_separated_point_certifies(self, gm2, oracle):
        # derived weights concentrate on tiny sigma where classes coincide,
        # so the smoke test uses uniform weights over moderate noise levels
        sched = build_geometric_schedule(0.5, 8.0, 32)
        cfg = ClassifierConfig("dc", WeightScheme.uniform(), t_prime=8, mc_per_timestep=4)
        clf = DiffusionClassifier(oracle, sched, cfg)
        cert = certify_lipschitz(np.array([-3.0, 0.0]), clf, n_samples=50, delta=0.2, seed=1)
        assert cert.radius > 0.0
        assert cert.p_a_lower > 0.5 > cert.p_b_upper
        assert cert.confidence == 0.8

    def test_requires_dc_and_samples(self, gm2, oracle, smoothing_schedule):
        cfg = ClassifierConfig("epndc", t_prime=4, tau_index=0)
        clf = DiffusionClassifier(oracle, smoothing_schedule, cfg)
        with pytest.raises(ValueError, match="clean-data"):
            certify_lipschitz(np.zeros(2), clf, 10, 0.05, 0)
        sched = build_geometric_schedule(0.1, 20.0, 8)
        dc = DiffusionClassifier(oracle, sched, ClassifierConfig("dc", t_prime=4))
        with pytest.raises(ValueError, match="two"):
            certify_lipschitz(np.zeros(2), dc, 1, 0.05, 0)


class _StubClassifier:
    """Deterministic vote source for exercising the smoothing pipeline."""

    def __init__(self, votes, noise_sigma=0.25, n_classes=2):
        self._votes = votes
        self._calls = 0
        self.noise_sigma = noise_sigma
        self.n_classes = n_classes

    def predict(self, x, seed):
        vote = self._votes[self._calls % len(self._votes)]
        self._calls += 1
        return vote


class TestSmoothedPredict:
    def test_unanimous_returns_class(self):
        clf = _StubClassifier([1])
        cfg = SmoothingConfig(noise_sigma=0.25, n0=20, n=20, alpha=0.05)
        assert smoothed_predict(np.zeros(2), clf, cfg, seed=0) == 1

    def test_even_split_abstains(self):
        clf = _StubClassifier([0, 1])
        cfg = SmoothingConfig(noise_sigma=0.25, n0=20, n=20, alpha=0.05)
        assert smoothed_predict(np.zeros(2), clf, cfg, seed=0) == ABSTAIN

    def test_constant_base_constant_output(self, rng):
        cfg = SmoothingConfig(noise_sigma=0.25, n0=12, n=12, alpha=0.05)
        for _ in range(5):
            clf = _StubClassifier([0])
            x = rng.normal(size=2)
            assert smoothed_predict(x, clf, cfg, seed=3) == 0

    def test_sigma_mismatch_rejected(self):
        clf = _StubClassifier([0], noise_sigma=0.5)
        cfg = SmoothingConfig(noise_sigma=0.25, n0=10, n=10, alpha=0.05)
        with pytest.raises(ValueError, match="does not match"):
            smoothed_predict(np.zeros(2), clf, cfg, seed=0)


class TestSmoothedCertify:
    def test_unanimous_radius_closed_form(self):
        clf = _StubClassifier([0])
        cfg = SmoothingConfig(noise_sigma=0.25, n0=100, n=100, alpha=0.001)
        record = smoothed_certify(np.zeros(2), clf, cfg, seed=0)
        assert record.pred == 0
        expected = 0.25 * ndtri(0.001 ** (1 / 100))
        assert record.radius == pytest.approx(expected, abs=1e-4)

    def test_low_pa_abstains(self):
        clf = _StubClassifier([0, 1])
        cfg = SmoothingConfig(noise_sigma=0.25, n0=40, n=40, alpha=0.01)
        record = smoothed_certify(np.zeros(2), clf, cfg, seed=0)
        assert record.pred == ABSTAIN and record.radius == 0.0
        assert record.p_a_lower <= 0.5

    def test_radius_increases_with_n_for_unanimous(self):
        radii = []
        for n in (50, 100, 200):
            clf = _StubClassifier([1])
            cfg = SmoothingConfig(noise_sigma=0.25, n0=n, n=n, alpha=0.001)
            radii.append(smoothed_certify(np.zeros(2), clf, cfg, seed=0).radius)
        assert radii[0] < radii[1] < radii[2]

    def test_record_invariant(self):
        with pytest.raises(ValueError, match="radius 0"):
            CertificationRecord(0, 0, ABSTAIN, 0.4, 0.3, 0.0)

    def test_smoothing_config_validation(self):
        with pytest.raises(ValueError):
            SmoothingConfig(noise_sigma=0.0, n0=1, n=1, alpha=0.05)
        with pytest.raises(ValueError):
            SmoothingConfig(noise_sigma=0.1, n0=10, n=5, alpha=0.05)
        with pytest.raises(ValueError):
            SmoothingConfig(noise_sigma=0.1, n0=1, n=5, alpha=0.0)


class TestUnitBoxMap:
    def test_round_trip_and_coverage(self, rng):
        pts = rng.normal(scale=4.0, size=(100, 3))
        bmap = unit_box_map(pts, margin=0.5)
        mapped = bmap.forward(pts)
        assert np.all(mapped >= 0.0) and np.all(mapped <= 1.0)
        np.testing.assert_allclose(bmap.inverse(mapped), pts, atol=1e-12)
