"""Denoisers and loss weights.

The testbed distribution is an isotropic Gaussian mixture, for which the
Bayes-optimal denoiser (posterior mean of the clean point given a noisy
observation), the exact class-conditional likelihood of noisy data, and
the Bayes classifier are all closed-form.  The analytic denoiser is the
oracle every Monte-Carlo classifier in this package is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Isotropic Gaussian mixture: class y draws x ~ N(mu_y, s^2 I).

    Attributes:
        means: (K, D) component means.
        class_std: shared isotropic standard deviation s > 0.
        priors: (K,) class probabilities; uniform when omitted.
    """

    means: np.ndarray
    class_std: float
    priors: np.ndarray | None = None

    def __post_init__(self) -> None:
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if means.shape[0] < 2:
            raise ValueError("mixture needs at least two components")
        if self.class_std <= 0:
            raise ValueError("class_std must be positive")
        priors = self.priors
        if priors is None:
            priors = np.full(means.shape[0], 1.0 / means.shape[0])
        else:
            priors = np.asarray(priors, dtype=np.float64)
            if priors.shape != (means.shape[0],) or np.any(priors < 0):
                raise ValueError("priors must be K nonnegative reals")
            if abs(priors.sum() - 1.0) > 1e-12:
                raise ValueError(f"priors sum to {priors.sum()}, not 1")
        means.flags.writeable = False
        priors.flags.writeable = False
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "priors", priors)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n labelled points; labels follow the priors."""
        labels = rng.choice(self.n_classes, size=n, p=self.priors)
        x = self.means[labels] + self.class_std * rng.standard_normal((n, self.dim))
        return x, labels

    def noisy_class_logpdf(self, x: np.ndarray, sigma: float, y: int) -> np.ndarray:
        """log N(x; mu_y, (s^2 + sigma^2) I): exact likelihood of data
        corrupted by additional Gaussian noise of std sigma."""
        x = np.atleast_2d(x)
        var = self.class_std**2 + sigma**2
        sq = np.sum((x - self.means[y]) ** 2, axis=-1)
        return -0.5 * (self.dim * math.log(2.0 * math.pi * var) + sq / var)

    def bayes_predict(self, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
        """Exact Bayes classification of (possibly noisy) inputs."""
        x = np.atleast_2d(x)
        scores = np.stack(
            [
                np.log(self.priors[y]) + self.noisy_class_logpdf(x, sigma, y)
                for y in range(self.n_classes)
            ],
            axis=-1,
        )
        return np.argmax(scores, axis=-1)

    def rescaled(self, shift: np.ndarray, scale: float) -> "GaussianMixtureSpec":
        """The mixture of x' = (x - shift) / scale; stays isotropic."""
        return GaussianMixtureSpec(
            (self.means - shift) / scale, self.class_std / scale, self.priors
        )


@dataclass(frozen=True)
class ClipBox:
    """Coordinatewise output bounds, default the unit box."""

    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")


def clip_output(h_out: np.ndarray, box: ClipBox) -> np.ndarray:
    """Coordinatewise clamp into the box (a projection; idempotent)."""
    return np.clip(h_out, box.lower, box.upper)


def sample_forward(x0: np.ndarray, sigma: float, noise: np.ndarray) -> np.ndarray:
    """Forward corruption x0 + sigma * noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if x0.shape[-1] != noise.shape[-1]:
        raise ValueError(f"dimension mismatch: {x0.shape} vs {noise.shape}")
    return x0 + sigma * noise


def analytic_denoise(
    gm: GaussianMixtureSpec,
    x: np.ndarray,
    sigma: float | np.ndarray,
    y: int,
    box: ClipBox | None = None,
) -> np.ndarray:
    """Bayes-optimal x0-prediction for class y of the mixture.

    E[x0 | x_t, y] = (s^2 x + sigma^2 mu_y) / (s^2 + sigma^2); the exact
    minimizer of the reconstruction loss.  Lies on the segment between x
    and mu_y.  Optionally clipped when bounded outputs are required.
    """
    x = np.asarray(x, dtype=np.float64)
    if y < 0 or y >= gm.n_classes:
        raise IndexError(f"class {y} out of range for K={gm.n_classes}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.all(sigma == 0):
        out = x.copy()
    else:
        s2 = gm.class_std**2
        sig2 = np.expand_dims(sigma**2, -1) if sigma.ndim else sigma**2
        out = (s2 * x + sig2 * gm.means[y]) / (s2 + sig2)
    if box is not None:
        out = clip_output(out, box)
    return out


class AnalyticDenoiser:
    """Callable oracle h(x, sigma, y) around :func:`analytic_denoise`.

    Evaluation is pure and thread-safe.  ``box`` enables output clipping,
    required by the Lipschitz certificate (which assumes bounded outputs)
    and off by default on the unbounded Gaussian testbed.
    """

    def __init__(self, gm: GaussianMixtureSpec, box: ClipBox | None = None):
        self.gm = gm
        self.box = box

    @property
    def dim(self) -> int:
        return self.gm.dim

    @property
    def n_classes(self) -> int:
        return self.gm.n_classes

    @property
    def priors(self) -> np.ndarray:
        return self.gm.priors

    def denoise(self, x: np.ndarray, sigma: float | np.ndarray, y: int) -> np.ndarray:
        return analytic_denoise(self.gm, x, sigma, y, self.box)

    def denoise_marginal(self, x: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
        """Prior-weighted average of the class-conditional outputs."""
        out = self.priors[0] * self.denoise(x, sigma, 0)
        for y in range(1, self.n_classes):
            out = out + self.priors[y] * self.denoise(x, sigma, y)
        return out


@dataclass(frozen=True)
class WeightScheme:
    """Per-timestep loss weight family.

    Kinds:
        derived_elbo    (sigma_{t+1} - sigma_t) / sigma_{t+1}^3
        uniform         1
        ddpm            1 / sigma_t
        edm             ((sigma_t^2 + sigma_d^2) / (sigma_t^2 sigma_d^2))
                        * exp(-(ln sigma_t - k_mu)^2 / (2 k_sigma^2))
                        / (sqrt(2 pi) k_sigma)
        truncated       base weight * [sigma_t > sigma_threshold]
    """

    kind: str
    sigma_d: float = 0.5
    k_mu: float = -1.2
    k_sigma: float = 1.2
    base: "WeightScheme | None" = None
    sigma_threshold: float = 0.0

    _KINDS = ("derived_elbo", "uniform", "ddpm", "edm", "truncated")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.kind == "edm" and (self.sigma_d <= 0 or self.k_sigma <= 0):
            raise ValueError("edm weight needs positive sigma_d and k_sigma")
        if self.kind == "truncated":
            if self.base is None or self.base.kind == "truncated":
                raise ValueError("truncated weight needs a non-truncated base")
            if self.sigma_threshold < 0:
                raise ValueError("sigma_threshold must be nonnegative")

    @staticmethod
    def derived_elbo() -> "WeightScheme":
        return WeightScheme("derived_elbo")

    @staticmethod
    def uniform() -> "WeightScheme":
        return WeightScheme("uniform")

    @staticmethod
    def ddpm() -> "WeightScheme":
        return WeightScheme("ddpm")

    @staticmethod
    def edm(sigma_d: float = 0.5, k_mu: float = -1.2, k_sigma: float = 1.2) -> "WeightScheme":
        return WeightScheme("edm", sigma_d=sigma_d, k_mu=k_mu, k_sigma=k_sigma)

    @staticmethod
    def truncated(base: "WeightScheme", sigma_threshold: float) -> "WeightScheme":
        return WeightScheme("truncated", base=base, sigma_threshold=sigma_threshold)


def weight_at(scheme: WeightScheme, schedule: NoiseSchedule, t: int) -> float:
    """Loss weight for the step at index t (0 <= t < T); always nonnegative."""
    if not 0 <= t < schedule.T:
        raise IndexError(f"t={t} outside [0, {schedule.T - 1}]")
    sig_t = float(schedule.sigmas[t])
    sig_next = float(schedule.sigmas[t + 1])
    if scheme.kind == "derived_elbo":
        return (sig_next - sig_t) / sig_next**3
    if scheme.kind == "uniform":
        return 1.0
    if scheme.kind == "ddpm":
        if sig_t == 0:
            raise ZeroDivisionError("ddpm weight undefined at sigma_t = 0")
        return 1.0 / sig_t
    if scheme.kind == "edm":
        if sig_t == 0:
            raise ZeroDivisionError("edm weight undefined at sigma_t = 0")
        sd2 = scheme.sigma_d**2
        lam = (sig_t**2 + sd2) / (sig_t**2 * sd2)
        z = (math.log(sig_t) - scheme.k_mu) / scheme.k_sigma
        dens = math.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * scheme.k_sigma)
        return lam * dens
    # truncated
    if sig_t <= scheme.sigma_threshold:
        return 0.0
    return weight_at(scheme.base, schedule, t)
