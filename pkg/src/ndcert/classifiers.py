"""Reconstruction-loss classifiers for clean and Gaussian-corrupted inputs.

All three variants turn per-timestep reconstruction losses into class
logits (an evidence-lower-bound surrogate for the class-conditional log
likelihood) and into probabilities via a softmax, i.e. Bayes' theorem
under a uniform prior:

    dc      clean inputs; loss ||h(x_0 + sigma_{t+1} eps, sigma_{t+1}, y) - x_0||^2
    epndc   noisy inputs x_tau; loss between the exact forward posterior
            mean of x_t given (x_{t+1}, x_tau) and the reverse-model mean
    apndc   noisy inputs; denoise x_tau once to an anchor, then score the
            anchor like a clean input (an ensemble of epndc evaluations
            at no extra cost)

Logits are normalized by 1/(D * T') so the softmax temperature is fixed.
A term at subset index t always draws at level sigma_{t+1} and carries
the step weight w_t; this is the indexing under which the noisy-data
bound collapses to the clean reconstruction loss at tau = 0.

Monte-Carlo structure: the noise for a (timestep, draw) pair comes from
a counter-based substream keyed by (seed, t) [shared across classes] or
(seed, t, class) [independent]; the draw index selects the row of that
substream's block.  Identical keys across variants make the tau = 0
degeneracy of apndc into dc exact, not just in expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .denoiser import WeightScheme, weight_at
from .schedule import NoiseSchedule, TimestepSubset, uniform_subset

VARIANTS = ("dc", "epndc", "apndc")
_SHARED_KEY = -1


@dataclass(frozen=True)
class ClassifierConfig:
    """Variant and estimator settings for one classifier."""

    variant: str
    scheme: WeightScheme = field(default_factory=WeightScheme.derived_elbo)
    t_prime: int = 32
    mc_per_timestep: int = 1
    shared_noise: bool = True
    tau_index: int = 0
    epndc_reweight: bool = False

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "dc" and self.tau_index != 0:
            raise ValueError("dc classifies clean data; tau_index must be 0")
        if self.t_prime < 1 or self.mc_per_timestep < 1:
            raise ValueError("t_prime and mc_per_timestep must be at least 1")
        if self.tau_index < 0:
            raise ValueError("tau_index must be nonnegative")


@dataclass(frozen=True)
class LogitVector:
    """Per-class logits (negated normalized reconstruction losses)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("logits must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def probabilities(self) -> np.ndarray:
        return softmax(self.values)

    def argmax(self) -> int:
        return int(np.argmax(self.values))


def softmax(values: np.ndarray) -> np.ndarray:
    z = np.asarray(values, dtype=np.float64)
    z = np.exp(z - np.max(z))
    return z / z.sum()


# -- posterior algebra -------------------------------------------------


def posterior_mean_q(
    x_next: np.ndarray,
    x_tau: np.ndarray,
    schedule: NoiseSchedule,
    t: int,
    tau: int,
) -> np.ndarray:
    """Mean of the exact forward posterior q(x_t | x_{t+1}, x_tau).

    ((sigma_{t+1}^2 - sigma_t^2) x_tau + (sigma_t^2 - sigma_tau^2) x_{t+1})
    / (sigma_{t+1}^2 - sigma_tau^2).  Coefficients sum to one.  At tau = 0
    this is the classical clean-data posterior mean.
    """
    if not (tau < t and t + 1 <= schedule.T):
        raise IndexError(f"need tau < t < t+1 <= T, got tau={tau}, t={t}, T={schedule.T}")
    s2 = schedule.sigmas**2
    denom = s2[t + 1] - s2[tau]
    if denom <= 0:
        raise ValueError("invalid ordering: sigma_{t+1} <= sigma_tau")
    a = (s2[t + 1] - s2[t]) / denom
    b = (s2[t] - s2[tau]) / denom
    return a * np.asarray(x_tau) + b * np.asarray(x_next)


def reverse_mean_p(
    x_next: np.ndarray,
    h_out: np.ndarray,
    schedule: NoiseSchedule,
    t: int,
) -> np.ndarray:
    """Mean of the parameterized reverse kernel p(x_t | x_{t+1}).

    ((sigma_{t+1}^2 - sigma_t^2) h + sigma_t^2 x_{t+1}) / sigma_{t+1}^2.
    """
    if not 0 <= t < schedule.T:
        raise IndexError(f"t={t} outside [0, {schedule.T - 1}]")
    s2 = schedule.sigmas**2
    if s2[t + 1] == 0:
        raise ZeroDivisionError("sigma_{t+1} is zero")
    return ((s2[t + 1] - s2[t]) * np.asarray(h_out) + s2[t] * np.asarray(x_next)) / s2[t + 1]


def posterior_var_q(schedule: NoiseSchedule, t: int, tau: int) -> float:
    """Isotropic variance of q(x_t | x_{t+1}, x_tau)."""
    s2 = schedule.sigmas**2
    return float((s2[t] - s2[tau]) * (s2[t + 1] - s2[t]) / (s2[t + 1] - s2[tau]))


def reverse_var_p(schedule: NoiseSchedule, t: int) -> float:
    """Isotropic variance of p(x_t | x_{t+1}): sigma_t^2 (sigma_{t+1}^2 - sigma_t^2) / sigma_{t+1}^2."""
    s2 = schedule.sigmas**2
    return float(s2[t] * (s2[t + 1] - s2[t]) / s2[t + 1])


def epndc_weight(
    schedule: NoiseSchedule,
    t: int,
    tau: int,
    reweight_scheme: WeightScheme | None = None,
) -> float:
    """Noisy-data step weight w_t^(tau).

    (sigma_{t+1}^2 - sigma_tau^2) / (2 (sigma_t^2 - sigma_tau^2)
    (sigma_{t+1}^2 - sigma_t^2)).  When ``reweight_scheme`` is given the
    value is multiplied by scheme_weight / derived_weight, mirroring how
    a retrained loss weight would reweight each divergence term.
    """
    if not tau < t:
        raise IndexError(f"need tau < t, got tau={tau}, t={t}")
    if t + 1 > schedule.T:
        raise IndexError(f"t={t} needs sigma_{t + 1}, schedule has T={schedule.T}")
    s2 = schedule.sigmas**2
    if s2[t] == s2[tau]:
        raise ZeroDivisionError("sigma_t equals sigma_tau; start the sum at tau + 1")
    w = (s2[t + 1] - s2[tau]) / (2.0 * (s2[t] - s2[tau]) * (s2[t + 1] - s2[t]))
    if reweight_scheme is not None:
        w_hat = weight_at(reweight_scheme, schedule, t)
        w_derived = weight_at(WeightScheme.derived_elbo(), schedule, t)
        w *= w_hat / w_derived
    return float(w)


# -- Monte-Carlo timestep terms ----------------------------------------


def _noise(seed: int, t: int, y: int | None, mc: int, dim: int) -> np.ndarray:
    key_class = _SHARED_KEY if y is None else y
    return rngmod.gaussian((mc, dim), seed, t, key_class)


def _check_input(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (dim,):
        raise ValueError(f"input shape {x.shape} does not match dim {dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite coordinates")
    return x


def timestep_losses(
    x: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    t: int,
    classes: list[int],
    config: ClassifierConfig,
    seed: int,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Per-class weighted loss of the single step at index t.

    Units are per-dimension MSE times the step weight, so accumulating
    over a subset and negating the mean reproduces the classifier logits.
    Class pruning evaluates exactly this, one timestep at a time.
    """
    dim = denoiser.dim
    mc = config.mc_per_timestep
    sig_next = float(schedule.sigmas[t + 1])
    out = np.empty(len(classes))

    if config.variant == "epndc":
        tau = config.tau_index
        w = epndc_weight(
            schedule, t, tau, config.scheme if config.epndc_reweight else None
        )
        scale = math.sqrt(sig_next**2 - schedule.sigmas[tau] ** 2)
        shared_eps = _noise(seed, t, None, mc, dim) if config.shared_noise else None
        for j, y in enumerate(classes):
            eps = shared_eps if shared_eps is not None else _noise(seed, t, y, mc, dim)
            x_next = x + scale * eps
            q_mean = posterior_mean_q(x_next, x, schedule, t, tau)
            p_mean = reverse_mean_p(x_next, denoiser.denoise(x_next, sig_next, y), schedule, t)
            out[j] = w * np.mean(np.sum((q_mean - p_mean) ** 2, axis=1)) / dim
        return out

    # dc and apndc share the reconstruction form; apndc scores its anchor
    base = x if config.variant == "dc" else anchor
    if base is None:
        raise ValueError("apndc timestep losses need the precomputed anchor")
    w = weight_at(config.scheme, schedule, t)
    shared_eps = _noise(seed, t, None, mc, dim) if config.shared_noise else None
    for j, y in enumerate(classes):
        eps = shared_eps if shared_eps is not None else _noise(seed, t, y, mc, dim)
        x_noisy = base + sig_next * eps
        h = denoiser.denoise(x_noisy, sig_next, y)
        out[j] = w * np.mean(np.sum((h - base) ** 2, axis=1)) / dim
    return out


def _validate_subset(subset: TimestepSubset, schedule: NoiseSchedule, config: ClassifierConfig):
    lo = 0 if config.variant == "dc" else config.tau_index + 1
    idx = subset.indices
    if idx[0] < lo:
        raise ValueError(f"subset index {idx[0]} below the first valid step {lo}")
    if idx[-1] > schedule.T - 1:
        raise ValueError(
            f"subset index {idx[-1]} exceeds T-1={schedule.T - 1}; "
            "each term references sigma_{t+1}"
        )


def _logits(
    x: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    config: ClassifierConfig,
    seed: int,
    anchor: np.ndarray | None = None,
) -> LogitVector:
    x = _check_input(x, denoiser.dim)
    _validate_subset(subset, schedule, config)
    classes = list(range(denoiser.n_classes))
    total = np.zeros(len(classes))
    for t in subset:
        total += timestep_losses(x, denoiser, schedule, t, classes, config, seed, anchor)
    return LogitVector(-total / len(subset))


def dc_logits(
    x0: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    config: ClassifierConfig,
    seed: int,
) -> LogitVector:
    """Clean-data diffusion classifier logits."""
    if config.variant != "dc":
        raise ValueError(f"config variant is {config.variant!r}, expected 'dc'")
    return _logits(x0, denoiser, schedule, subset, config, seed)


def epndc_logits(
    x_tau: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    config: ClassifierConfig,
    seed: int,
) -> LogitVector:
    """Exact-posterior noisy-data classifier logits."""
    if config.variant != "epndc":
        raise ValueError(f"config variant is {config.variant!r}, expected 'epndc'")
    return _logits(x_tau, denoiser, schedule, subset, config, seed)


def apndc_logits(
    x_tau: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    subset: TimestepSubset,
    config: ClassifierConfig,
    seed: int,
) -> LogitVector:
    """Approximated-posterior noisy-data classifier logits.

    Denoises x_tau once into an anchor (prior-weighted class-conditional
    outputs) and scores reconstructions of the anchor; noise is added to
    the anchor, not to x_tau.
    """
    if config.variant != "apndc":
        raise ValueError(f"config variant is {config.variant!r}, expected 'apndc'")
    x_tau = _check_input(x_tau, denoiser.dim)
    sigma_tau = float(schedule.sigmas[config.tau_index])
    anchor = denoiser.denoise_marginal(x_tau[None, :], sigma_tau)[0]
    return _logits(x_tau, denoiser, schedule, subset, config, seed, anchor=anchor)


def compute_anchor(x_tau, denoiser, schedule, tau_index) -> np.ndarray:
    """The apndc anchor h(x_tau, sigma_tau), marginalized over classes."""
    x_tau = _check_input(x_tau, denoiser.dim)
    return denoiser.denoise_marginal(x_tau[None, :], float(schedule.sigmas[tau_index]))[0]


# -- full evidence lower bound ------------------------------------------


@dataclass(frozen=True)
class ElboBreakdown:
    """All components of the noisy-data bound, no constants dropped.

    total = recon_term - sum(kl_terms) - prior_kl
    """

    kl_terms: np.ndarray
    recon_term: float
    prior_kl: float
    total: float
    standard_error: float


def prior_kl_term(x_tau: np.ndarray, schedule: NoiseSchedule, tau: int) -> float:
    """KL(q(x_T | x_tau) || p(x_T)) in closed form.

    q = N(x_tau, (sigma_T^2 - sigma_tau^2) I), p = N(0, sigma_T^2 I).
    Zero when the input sits at the prior mean with sigma_tau = 0.
    """
    x_tau = np.asarray(x_tau, dtype=np.float64)
    dim = x_tau.size
    s2_T = float(schedule.sigmas[-1] ** 2)
    s2_tau = float(schedule.sigmas[tau] ** 2)
    ratio = (s2_T - s2_tau) / s2_T
    return 0.5 * dim * (ratio - 1.0 - math.log(ratio)) + float(np.sum(x_tau**2)) / (2.0 * s2_T)


def full_elbo(
    x_tau: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    tau: int,
    y: int,
    mc: int = 128,
    seed: int = 0,
) -> ElboBreakdown:
    """Complete class-conditional lower bound on log p(x_tau | y).

    Every divergence uses the exact Gaussian form (means and variances);
    the reconstruction term is the Gaussian log-density of x_tau under
    the first reverse kernel; the prior term is closed-form.  Monte Carlo
    enters only through draws of x_{t+1} | x_tau at each step.
    """
    if not 0 <= tau < schedule.T:
        raise IndexError(f"tau={tau} outside [0, {schedule.T - 1}]")
    sig = schedule.sigmas
    if sig[tau] == 0:
        raise ValueError("recon term is degenerate at sigma_tau = 0; pick tau with sigma > 0")
    x_tau = _check_input(x_tau, denoiser.dim)
    dim = denoiser.dim

    kl_terms = []
    kl_vars = []
    for t in range(tau + 1, schedule.T):
        scale = math.sqrt(sig[t + 1] ** 2 - sig[tau] ** 2)
        eps = _noise(seed, t, None, mc, dim)
        x_next = x_tau + scale * eps
        q_mean = posterior_mean_q(x_next, x_tau, schedule, t, tau)
        p_mean = reverse_mean_p(
            x_next, denoiser.denoise(x_next, float(sig[t + 1]), y), schedule, t
        )
        q_var = posterior_var_q(schedule, t, tau)
        p_var = reverse_var_p(schedule, t)
        r = q_var / p_var
        kl_draws = 0.5 * dim * (r - 1.0 - math.log(r)) + np.sum(
            (q_mean - p_mean) ** 2, axis=1
        ) / (2.0 * p_var)
        kl_terms.append(float(np.mean(kl_draws)))
        kl_vars.append(float(np.var(kl_draws, ddof=1)) / mc if mc > 1 else 0.0)

    # reconstruction: log p(x_tau | x_{tau+1}) averaged over x_{tau+1}
    scale = math.sqrt(sig[tau + 1] ** 2 - sig[tau] ** 2)
    eps = _noise(seed, tau, None, mc, dim)
    x_next = x_tau + scale * eps
    mean = reverse_mean_p(
        x_next, denoiser.denoise(x_next, float(sig[tau + 1]), y), schedule, tau
    )
    var = reverse_var_p(schedule, tau)
    logpdf = -0.5 * dim * math.log(2.0 * math.pi * var) - np.sum(
        (x_tau - mean) ** 2, axis=1
    ) / (2.0 * var)
    recon = float(np.mean(logpdf))
    recon_var = float(np.var(logpdf, ddof=1)) / mc if mc > 1 else 0.0

    prior = prior_kl_term(x_tau, schedule, tau)
    kl_terms = np.asarray(kl_terms)
    total = recon - float(kl_terms.sum()) - prior
    se = math.sqrt(sum(kl_vars) + recon_var)
    return ElboBreakdown(kl_terms, recon, prior, total, se)


# -- classifier facade ---------------------------------------------------


class DiffusionClassifier:
    """A configured variant bound to a denoiser, schedule, and subset."""

    def __init__(
        self,
        denoiser,
        schedule: NoiseSchedule,
        config: ClassifierConfig,
        subset: TimestepSubset | None = None,
    ):
        self.denoiser = denoiser
        self.schedule = schedule
        self.config = config
        self.subset = subset if subset is not None else default_subset(schedule, config)
        _validate_subset(self.subset, schedule, config)

    @property
    def n_classes(self) -> int:
        return self.denoiser.n_classes

    @property
    def noise_sigma(self) -> float:
        return float(self.schedule.sigmas[self.config.tau_index])

    def logits(self, x: np.ndarray, seed: int) -> LogitVector:
        fn = {"dc": dc_logits, "epndc": epndc_logits, "apndc": apndc_logits}[
            self.config.variant
        ]
        return fn(x, self.denoiser, self.schedule, self.subset, self.config, seed)

    def probabilities(self, x: np.ndarray, seed: int) -> np.ndarray:
        return self.logits(x, seed).probabilities()

    def predict(self, x: np.ndarray, seed: int) -> int:
        return self.logits(x, seed).argmax()


def default_subset(schedule: NoiseSchedule, config: ClassifierConfig) -> TimestepSubset:
    """Evenly spaced classifier subset.

    Starts at tau + 1 for noisy-data variants (their sums begin there)
    and stops at T - 1 because each term references sigma_{t+1}.
    """
    lo = 0 if config.variant == "dc" else config.tau_index + 1
    return uniform_subset(schedule, config.t_prime, lo, schedule.T - 1)
