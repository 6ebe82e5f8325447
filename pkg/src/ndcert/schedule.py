"""Discrete noise schedules and timestep subsets.

A schedule is the grid ``sigma_0 < sigma_1 < ... < sigma_T`` of noise
standard deviations for the variance-exploding forward process
``x_t = x_0 + sigma_t * eps``.  Schedules built from linear-interpolation
diffusions (``x_t = alpha_t * x_0 + sigma_t * eps``) carry the ``alphas``
array as well and can be converted to the variance-exploding form.

Classifier sums index *intervals* ``[sigma_t, sigma_{t+1}]``: the term at
index ``t`` draws noise at level ``sigma_{t+1}`` and carries the step
weight ``w_t``, so usable indices run from 0 (or ``tau+1`` for noisy
inputs) to ``T - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone sigma grid with optional linear-schedule scales.

    Attributes:
        sigmas: shape (T+1,), strictly increasing, ``sigmas[0] >= 0``.
        alphas: shape (T+1,) positive scales with ``alphas[0] == 1``, or
            None for the pure variance-exploding form (all scales 1).
    """

    sigmas: np.ndarray
    alphas: np.ndarray | None = None

    def __post_init__(self) -> None:
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if sigmas.ndim != 1 or sigmas.size < 2:
            raise ValueError("sigmas must be a 1-D array with at least two entries")
        if sigmas[0] < 0:
            raise ValueError(f"sigmas[0] must be nonnegative, got {sigmas[0]}")
        if not np.all(np.diff(sigmas) > 0):
            raise ValueError("sigmas must be strictly increasing")
        sigmas.flags.writeable = False
        object.__setattr__(self, "sigmas", sigmas)
        if self.alphas is not None:
            alphas = np.asarray(self.alphas, dtype=np.float64)
            if alphas.shape != sigmas.shape:
                raise ValueError("alphas must match sigmas in shape")
            if not np.all(alphas > 0):
                raise ValueError("alphas must be positive")
            if alphas[0] != 1.0:
                raise ValueError(f"alphas[0] must be 1, got {alphas[0]}")
            alphas.flags.writeable = False
            object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        """Number of steps; the grid has T+1 nodes."""
        return len(self.sigmas) - 1

    def alpha(self, t: int) -> float:
        return 1.0 if self.alphas is None else float(self.alphas[t])

    def to_ve(self) -> "NoiseSchedule":
        """Variance-exploding view: sigma_t / alpha_t with unit scales."""
        if self.alphas is None:
            return self
        return NoiseSchedule(self.sigmas / self.alphas)

    def check_prior_coverage(self, max_data_norm: float, ratio: float = 10.0) -> None:
        """Require sigma_T large enough that the terminal prior mismatch is small.

        Raises ValueError when ``sigmas[T] < ratio * max_data_norm``.
        """
        if self.sigmas[-1] < ratio * max_data_norm:
            raise ValueError(
                f"sigma_T = {self.sigmas[-1]:.6g} is below {ratio} x max data norm "
                f"({max_data_norm:.6g}); raise sigma_max or lower the ratio"
            )


@dataclass(frozen=True)
class TimestepSubset:
    """Ordered distinct indices into a schedule."""

    indices: np.ndarray = field()

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("subset must contain at least one index")
        if not np.all(np.diff(idx) > 0):
            raise ValueError("subset indices must be strictly increasing")
        if idx[0] < 0:
            raise ValueError("subset indices must be nonnegative")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices.tolist())


def build_geometric_schedule(
    sigma_min: float, sigma_max: float, T: int, rho: float = 7.0
) -> NoiseSchedule:
    """Power-law interpolated sigma grid between sigma_min and sigma_max.

    sigma_t = (smax^(1/rho) + (1 - t/T) * (smin^(1/rho) - smax^(1/rho)))^rho,
    ordered increasing so that sigma_0 = sigma_min and sigma_T = sigma_max.
    Defaults (0.002, 80, rho=7) follow the common image-diffusion grid.
    """
    if sigma_min <= 0 or sigma_max <= 0:
        raise ValueError("sigma bounds must be positive")
    if sigma_min >= sigma_max:
        raise ValueError("sigma_min must be below sigma_max")
    if T < 1:
        raise ValueError("T must be at least 1")
    inv = 1.0 / rho
    t = np.arange(T + 1, dtype=np.float64) / T
    sigmas = (sigma_max**inv + (1.0 - t) * (sigma_min**inv - sigma_max**inv)) ** rho
    # pin the endpoints exactly; the power round trip can drift in the last ulp
    sigmas[0] = sigma_min
    sigmas[-1] = sigma_max
    return NoiseSchedule(sigmas)


def build_linear_schedule(
    beta_start: float = 1e-4, beta_end: float = 0.02, T: int = 1000
) -> NoiseSchedule:
    """Linear-interpolation diffusion grid (DDPM-style linear betas).

    Returns a schedule in the linear parameterization:
    ``alphas[t] = sqrt(prod(1 - beta))``, ``sigmas[t] = sqrt(1 - prod(1 - beta))``
    with the clean node ``sigma_0 = 0, alpha_0 = 1``.  Use :meth:`NoiseSchedule.to_ve`
    for the variance-exploding view ``sigma_t / alpha_t``.
    """
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
    if T < 1:
        raise ValueError("T must be at least 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(np.sqrt(1.0 - alpha_bar), np.sqrt(alpha_bar))


def uniform_subset(
    schedule: NoiseSchedule,
    t_prime: int,
    lower_cut: int = 0,
    upper: int | None = None,
) -> TimestepSubset:
    """Evenly spaced subset of ``t_prime`` indices over [lower_cut, upper].

    ``upper`` defaults to the last grid index T.  Both endpoints are
    included whenever ``t_prime >= 2``.  Classifiers pass ``upper = T - 1``
    because their per-step terms reference ``sigma_{t+1}``.
    """
    hi = schedule.T if upper is None else upper
    if not (0 <= lower_cut <= hi <= schedule.T):
        raise ValueError(f"invalid index range [{lower_cut}, {hi}] for T={schedule.T}")
    if t_prime < 1:
        raise ValueError("t_prime must be at least 1")
    if t_prime > hi - lower_cut + 1:
        raise ValueError(
            f"t_prime={t_prime} exceeds the {hi - lower_cut + 1} available indices"
        )
    if t_prime == 1:
        return TimestepSubset(np.array([lower_cut]))
    idx = np.rint(np.linspace(lower_cut, hi, t_prime)).astype(np.int64)
    return TimestepSubset(idx)


def linear_to_ve(
    x_t_linear: np.ndarray, t: int, schedule: NoiseSchedule
) -> tuple[np.ndarray, float]:
    """Map a linear-schedule noisy sample to variance-exploding coordinates.

    Returns ``(x_t / alpha_t, sigma_t / alpha_t)``, the pair an
    x0-prediction denoiser expects.
    """
    if schedule.alphas is None:
        raise ValueError("schedule carries no alphas; already variance-exploding")
    alpha_t = schedule.alphas[t]
    if alpha_t == 0:
        raise ZeroDivisionError(f"alpha[{t}] is zero")
    return np.asarray(x_t_linear) / alpha_t, float(schedule.sigmas[t] / alpha_t)


def ve_to_linear(
    x0_pred: np.ndarray,
    x_t_linear: np.ndarray,
    sigma: float,
    schedule: NoiseSchedule,
) -> tuple[int, np.ndarray]:
    """Map an x0-prediction at noise level ``sigma`` back to the linear schedule.

    Picks ``t = argmin_t |sigma_t / alpha_t - sigma|`` (ties toward the
    smaller index) and returns the implied noise prediction
    ``eps = (x_t - alpha_t * x0) / sigma_t`` for the caller's ``x_t``.
    """
    if schedule.alphas is None:
        raise ValueError("schedule carries no alphas; already variance-exploding")
    ve_sigmas = schedule.sigmas / schedule.alphas
    t = int(np.argmin(np.abs(ve_sigmas - sigma)))
    sigma_t = schedule.sigmas[t]
    if sigma_t == 0:
        raise ZeroDivisionError(f"sigma[{t}] is zero; no noise component at t={t}")
    eps = (np.asarray(x_t_linear) - schedule.alphas[t] * np.asarray(x0_pred)) / sigma_t
    return t, eps
