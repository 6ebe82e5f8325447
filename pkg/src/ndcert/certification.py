"""Certified radii: direct Lipschitz certificates and randomized smoothing.

Two routes to an l2 certificate:

* The clean-data classifier has a bounded Lipschitz constant, so a high-
  confidence gap between the top-class and runner-up probabilities
  yields a radius directly (a constant-Lipschitz certificate, capped).
* Wrapping a noisy-data classifier in randomized smoothing gives the
  standard Monte-Carlo pipeline: select with n0 votes, lower-bound the
  top-class probability with a one-sided Clopper-Pearson bound over n
  fresh votes, and certify radius sigma * Phi^{-1}(pA_lower) under the
  pB = 1 - pA convention.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import special as sp_special
from scipy import stats as sp_stats

from . import rng as rngmod
from .classifiers import DiffusionClassifier
from .denoiser import WeightScheme, weight_at
from .schedule import NoiseSchedule, TimestepSubset

ABSTAIN = -1


# -- statistical primitives ---------------------------------------------


def phi_inverse(p: float) -> float:
    """Standard normal quantile.

    Acklam's rational approximation polished with one Halley step on the
    complementary error function; accurate to well below 1e-9 across (0, 1).
    The upper half reflects onto the lower half (1 - p is exact there), so
    the refinement always works where the CDF has full relative precision.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if p > 0.5:
        return -phi_inverse(1.0 - p)
    # rational approximation coefficients (central and low-tail regions)
    a = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
    b = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
         3.754408661907416e00)
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    else:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    # one Halley refinement; erfc keeps full relative precision for x <= 0
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided lower confidence bound on a binomial success probability.

    The alpha-quantile of Beta(k, n - k + 1), found by bisecting the
    regularized incomplete beta function to 1e-10 (0 when k = 0).
    """
    if n < 1 or k < 0 or k > n:
        raise ValueError(f"invalid counts k={k}, n={n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if sp_special.betainc(k, n - k + 1, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def empirical_bernstein_lower(samples: np.ndarray, delta: float) -> float:
    """Variance-adaptive lower confidence bound for [0, 1]-valued samples.

    mean - sqrt(2 V ln(2/delta) / n) - 7 ln(2/delta) / (3 (n - 1)),
    with V the unbiased sample variance.  Holds with probability 1 - delta.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two samples")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("samples must lie in [0, 1]")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    n = x.size
    log_term = math.log(2.0 / delta)
    var = float(np.var(x, ddof=1))
    return float(np.mean(x)) - math.sqrt(2.0 * var * log_term / n) - 7.0 * log_term / (
        3.0 * (n - 1)
    )


def empirical_bernstein_upper(samples: np.ndarray, delta: float) -> float:
    """Symmetric upper bound: 1 - lower bound of the complemented samples."""
    return 1.0 - empirical_bernstein_lower(1.0 - np.asarray(samples, dtype=np.float64), delta)


# -- Lipschitz certificate ----------------------------------------------


@dataclass(frozen=True)
class LipschitzCertificate:
    lipschitz_bound: float
    p_a_lower: float
    p_b_upper: float
    radius: float
    confidence: float


def lipschitz_bound_dc(
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    scheme: WeightScheme,
    dim: int,
) -> float:
    """Upper bound on the clean-data classifier's probability Lipschitz constant.

    (1 / (2 sqrt(2))) * sum_t (w_t / (sigma_t T')) * (sqrt(2/pi) + 2/sqrt(D)).
    """
    total = 0.0
    for t in subset:
        sig_t = float(schedule.sigmas[t])
        if sig_t <= 0:
            raise ZeroDivisionError(f"sigma[{t}] = 0; the bound needs positive sigma_t")
        total += weight_at(scheme, schedule, t) / sig_t
    c = math.sqrt(2.0 / math.pi) + 2.0 / math.sqrt(dim)
    return total * c / (2.0 * math.sqrt(2.0) * len(subset))


def dc_radius(
    p_a_lower: float,
    p_b_upper: float,
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    scheme: WeightScheme,
    dim: int,
) -> float:
    """Certified radius sqrt(2) T' (pA - pB) / ((2/sqrt(D) + sqrt(2/pi)) sum w_t/sigma_t).

    Equals (pA - pB) / (2 L) for the bound above; floored at zero.
    """
    weight_sum = 0.0
    for t in subset:
        sig_t = float(schedule.sigmas[t])
        if sig_t <= 0:
            raise ZeroDivisionError(f"sigma[{t}] = 0; the radius needs positive sigma_t")
        weight_sum += weight_at(scheme, schedule, t) / sig_t
    c = 2.0 / math.sqrt(dim) + math.sqrt(2.0 / math.pi)
    r = math.sqrt(2.0) * len(subset) * (p_a_lower - p_b_upper) / (c * weight_sum)
    return max(0.0, r)


def certify_lipschitz(
    x0: np.ndarray,
    classifier: DiffusionClassifier,
    n_samples: int,
    delta: float,
    seed: int,
) -> LipschitzCertificate:
    """Direct certificate for the clean-data classifier at x0.

    Estimates class probabilities with n_samples independent Monte-Carlo
    logit evaluations, bounds the top class from below and the runner-up
    from above with the variance-adaptive bound, and converts the gap to
    a radius via the Lipschitz constant.
    """
    if classifier.config.variant != "dc":
        raise ValueError("the direct certificate applies to the clean-data variant only")
    if n_samples < 2:
        raise ValueError("need at least two probability samples")
    probs = np.stack(
        [classifier.probabilities(x0, rngmod.mix(seed, i)) for i in range(n_samples)]
    )
    means = probs.mean(axis=0)
    order = np.argsort(-means, kind="stable")
    top, runner = int(order[0]), int(order[1])
    p_a_lower = empirical_bernstein_lower(probs[:, top], delta)
    p_b_upper = empirical_bernstein_upper(probs[:, runner], delta)
    bound = lipschitz_bound_dc(
        classifier.schedule, classifier.subset, classifier.config.scheme, classifier.denoiser.dim
    )
    radius = dc_radius(
        p_a_lower,
        p_b_upper,
        classifier.schedule,
        classifier.subset,
        classifier.config.scheme,
        classifier.denoiser.dim,
    )
    return LipschitzCertificate(bound, p_a_lower, p_b_upper, radius, 1.0 - delta)


# -- randomized smoothing -------------------------------------------------


@dataclass(frozen=True)
class SmoothingConfig:
    """Sample sizes and confidence for the smoothing pipeline."""

    noise_sigma: float
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001

    def __post_init__(self) -> None:
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.n0 < 1 or self.n < self.n0:
            raise ValueError("need n0 >= 1 and n >= n0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class CertificationRecord:
    point_id: int
    true_label: int
    pred: int
    p_a_lower: float
    radius: float
    wall_ms: float

    @property
    def abstained(self) -> bool:
        return self.pred == ABSTAIN

    def __post_init__(self) -> None:
        if self.pred == ABSTAIN and self.radius != 0.0:
            raise ValueError("an abstaining record must carry radius 0")


def _check_sigma(classifier: DiffusionClassifier, smoothing: SmoothingConfig) -> None:
    if not math.isclose(classifier.noise_sigma, smoothing.noise_sigma, rel_tol=1e-12):
        raise ValueError(
            f"smoothing sigma {smoothing.noise_sigma} does not match the classifier's "
            f"schedule sigma {classifier.noise_sigma} at tau_index"
        )


def _sample_votes(
    x0: np.ndarray,
    classifier: DiffusionClassifier,
    sigma: float,
    num: int,
    seed: int,
    stage: int,
) -> np.ndarray:
    """Class counts over `num` noisy evaluations of the base classifier.

    Each draw gets a fresh logit seed so votes are independent, which the
    binomial machinery requires.
    """
    counts = np.zeros(classifier.n_classes, dtype=np.int64)
    x0 = np.asarray(x0, dtype=np.float64)
    for i in range(num):
        eps = rngmod.gaussian(x0.shape, seed, rngmod.TAG_SMOOTHING, stage, i)
        vote = classifier.predict(x0 + sigma * eps, rngmod.mix(seed, stage, i))
        counts[vote] += 1
    return counts


def smoothed_predict(
    x0: np.ndarray,
    classifier: DiffusionClassifier,
    smoothing: SmoothingConfig,
    seed: int,
) -> int:
    """Majority-vote prediction with an exact two-sided binomial sanity test.

    Returns the top class when the top-vs-runner-up vote split rejects
    p = 0.5 at level alpha, otherwise ABSTAIN.
    """
    _check_sigma(classifier, smoothing)
    counts = _sample_votes(x0, classifier, smoothing.noise_sigma, smoothing.n0, seed, 0)
    order = np.argsort(-counts, kind="stable")
    n1, n2 = int(counts[order[0]]), int(counts[order[1]])
    p_value = sp_stats.binomtest(n1, n1 + n2, 0.5).pvalue
    return int(order[0]) if p_value <= smoothing.alpha else ABSTAIN


def smoothed_certify(
    x0: np.ndarray,
    classifier: DiffusionClassifier,
    smoothing: SmoothingConfig,
    seed: int,
    point_id: int = 0,
    true_label: int = -1,
    record_timing: bool = False,
) -> CertificationRecord:
    """Select with n0 votes, then certify with n fresh votes.

    radius = sigma * Phi^{-1}(pA_lower) when pA_lower > 1/2 (taking
    pB_upper = 1 - pA_lower), else ABSTAIN with radius 0.
    """
    _check_sigma(classifier, smoothing)
    start = time.perf_counter()
    counts0 = _sample_votes(x0, classifier, smoothing.noise_sigma, smoothing.n0, seed, 0)
    top = int(np.argmax(counts0))
    counts = _sample_votes(x0, classifier, smoothing.noise_sigma, smoothing.n, seed, 1)
    p_a_lower = clopper_pearson_lower(int(counts[top]), smoothing.n, smoothing.alpha)
    elapsed_ms = (time.perf_counter() - start) * 1e3 if record_timing else 0.0
    if p_a_lower > 0.5:
        radius = smoothing.noise_sigma * phi_inverse(p_a_lower)
        return CertificationRecord(point_id, true_label, top, p_a_lower, radius, elapsed_ms)
    return CertificationRecord(point_id, true_label, ABSTAIN, p_a_lower, 0.0, elapsed_ms)


# -- rescaling helper for bounded-domain certification --------------------


@dataclass(frozen=True)
class UnitBoxMap:
    """Affine map x -> (x - shift) / scale sending a dataset into [0, 1]^D.

    A single isotropic scale keeps Gaussian noise isotropic, so a
    classifier built in mapped coordinates certifies radii that transfer
    back by multiplying with ``scale``.
    """

    shift: np.ndarray
    scale: float

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift


def unit_box_map(points: np.ndarray, margin: float = 0.0) -> UnitBoxMap:
    """Fit a UnitBoxMap covering the given points (plus an optional margin)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    scale = float(np.max(hi - lo))
    if scale <= 0:
        raise ValueError("points are degenerate; cannot fit a box")
    return UnitBoxMap(lo, scale)
