"""Trainable MLP denoiser, its SGD training loop, and checkpoint I/O.

The network predicts x0 from a noisy input, a class embedding, and the
log noise level.  Inputs and outputs are preconditioned so the learnable
core sees O(1) activations at every noise scale:

    h(x, sigma, y) = c_skip * x + c_out * F([c_in * x, emb_y, ln(sigma) / 4])
    c_in  = 1 / sqrt(sigma^2 + sigma_data^2)
    c_skip = sigma_data^2 / (sigma^2 + sigma_data^2)
    c_out = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2)

Checkpoint format (version 1, little-endian):

    magic   4 bytes  b"NDC1"
    version u8       1
    act     u8       0 = tanh, 1 = relu
    D, K, E, L       u32 each (data dim, classes, embedding dim, layer count)
    sigma_data       f64
    widths  (L+1) x u32   core layer sizes; widths[0] = D + E + 1, widths[L] = D
    priors  K x f64
    emb     K*E x f64     class embedding rows
    per layer i: W (widths[i]*widths[i+1] x f64, row-major), b (widths[i+1] x f64)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .denoiser import WeightScheme, weight_at
from .schedule import NoiseSchedule

_MAGIC = b"NDC1"
_VERSION = 1
_ACTIVATIONS = {"tanh": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class MlpDenoiser:
    """Small fully connected x0-predictor with class and noise conditioning."""

    def __init__(
        self,
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        embedding: np.ndarray,
        sigma_data: float,
        activation: str = "tanh",
        priors: np.ndarray | None = None,
    ):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.sigma_data = float(sigma_data)
        self.activation = activation
        dim = self.weights[-1].shape[1]
        k = self.embedding.shape[0]
        self.priors = (
            np.full(k, 1.0 / k) if priors is None else np.asarray(priors, dtype=np.float64)
        )
        expected_in = dim + self.embedding.shape[1] + 1
        if self.weights[0].shape[0] != expected_in:
            raise ValueError(
                f"first layer expects {self.weights[0].shape[0]} inputs, "
                f"model conditioning provides {expected_in}"
            )
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(f"layer shapes do not chain at layer {i}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape must match layer output")

    # -- construction -------------------------------------------------

    @staticmethod
    def init(
        dim: int,
        n_classes: int,
        hidden: tuple[int, ...] = (64, 64),
        emb_dim: int = 8,
        sigma_data: float = 1.0,
        activation: str = "tanh",
        seed: int = 0,
        priors: np.ndarray | None = None,
    ) -> "MlpDenoiser":
        gen = rngmod.substream(seed, rngmod.TAG_INIT)
        widths = [dim + emb_dim + 1, *hidden, dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            weights.append(scale * gen.standard_normal((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        emb = 0.1 * gen.standard_normal((n_classes, emb_dim))
        return MlpDenoiser(weights, biases, emb, sigma_data, activation, priors)

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.embedding.copy(),
            self.sigma_data,
            self.activation,
            self.priors.copy(),
        )

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_classes(self) -> int:
        return self.embedding.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    # -- evaluation ---------------------------------------------------

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _features(self, x: np.ndarray, sigma: np.ndarray, y: int) -> np.ndarray:
        c_in = 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)
        emb = np.broadcast_to(self.embedding[y], (x.shape[0], self.embedding.shape[1]))
        logsig = np.where(sigma > 0, np.log(np.maximum(sigma, 1e-300)), -20.0) / 4.0
        return np.concatenate([c_in[:, None] * x, emb, logsig[:, None]], axis=1)

    def _core(self, feats: np.ndarray) -> np.ndarray:
        a = feats
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = self._act(a @ w + b)
        return a @ self.weights[-1] + self.biases[-1]

    def denoise(self, x: np.ndarray, sigma: float | np.ndarray, y: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        sd2 = self.sigma_data**2
        c_skip = sd2 / (sigma**2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(sigma**2 + sd2)
        out = c_skip[:, None] * x + c_out[:, None] * self._core(self._features(x, sigma, y))
        return out

    def denoise_marginal(self, x: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
        out = self.priors[0] * self.denoise(x, sigma, 0)
        for y in range(1, self.n_classes):
            out = out + self.priors[y] * self.denoise(x, sigma, y)
        return out


@dataclass
class TrainingLog:
    """Per-epoch weighted reconstruction losses recorded during training."""

    epoch_losses: list[float] = field(default_factory=list)

    def moving_average(self, window: int = 10) -> np.ndarray:
        v = np.asarray(self.epoch_losses)
        if len(v) < window:
            return v.copy()
        kernel = np.ones(window) / window
        return np.convolve(v, kernel, mode="valid")

    def trailing_nonincreasing(self, window: int = 10, rel_tol: float = 0.02) -> bool:
        """Whether the windowed moving average never rises by more than rel_tol."""
        ma = self.moving_average(window)
        if len(ma) < 2:
            return True
        return bool(np.all(np.diff(ma) <= rel_tol * np.abs(ma[:-1])))


def train_denoiser(
    model: MlpDenoiser,
    x0: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    scheme: WeightScheme | None = None,
    lr: float = 0.01,
    epochs: int = 100,
    batch_size: int = 128,
    grad_clip: float = 10.0,
    seed: int = 0,
) -> tuple[MlpDenoiser, TrainingLog]:
    """Plain SGD on the weighted reconstruction loss.

    Each sample draws a uniform step index t, corrupts at level
    sigma_{t+1}, and contributes w_t * ||h(x_t, sigma_{t+1}, y) - x0||^2 / D.
    The gradient is clipped to a global norm; the step size is fixed.
    Single-threaded; batch reduction order is fixed, so results are
    seed-deterministic.  Raises TrainingDivergedError on a NaN loss.
    The input model is not mutated; a trained copy is returned.
    """
    if len(x0) == 0:
        raise ValueError("training data is empty")
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels)
    if x0.shape[1] != model.dim:
        raise ValueError(f"data dim {x0.shape[1]} does not match model dim {model.dim}")
    scheme = scheme if scheme is not None else WeightScheme.edm()
    model = model.copy()
    log = TrainingLog()
    gen = rngmod.substream(seed, rngmod.TAG_TRAIN)
    step_weights = np.array([weight_at(scheme, schedule, t) for t in range(schedule.T)])
    sigma_levels = schedule.sigmas[1:]
    n = len(x0)

    for epoch in range(epochs):
        order = gen.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = x0[idx]
            t = gen.integers(0, schedule.T, size=len(idx))
            sig = sigma_levels[t]
            w = step_weights[t]
            eps = gen.standard_normal(xb.shape)
            x_noisy = xb + sig[:, None] * eps
            loss = _sgd_step(model, x_noisy, sig, labels[idx], xb, w, lr, grad_clip)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {loss}"
                )
            epoch_loss += loss * len(idx)
        log.epoch_losses.append(epoch_loss / n)
    return model, log


def _sgd_step(model, x_noisy, sig, yb, xb, w, lr, grad_clip):
    """One forward/backward/update pass; returns the batch loss."""
    n, dim = x_noisy.shape
    sd2 = model.sigma_data**2
    c_skip = sd2 / (sig**2 + sd2)
    c_out = sig * model.sigma_data / np.sqrt(sig**2 + sd2)
    c_in = 1.0 / np.sqrt(sig**2 + sd2)
    logsig = np.where(sig > 0, np.log(np.maximum(sig, 1e-300)), -20.0) / 4.0
    emb = model.embedding[yb]
    feats = np.concatenate([c_in[:, None] * x_noisy, emb, logsig[:, None]], axis=1)

    # forward, caching activations
    acts = [feats]
    for wgt, b in zip(model.weights[:-1], model.biases[:-1]):
        acts.append(model._act(acts[-1] @ wgt + b))
    core = acts[-1] @ model.weights[-1] + model.biases[-1]
    h = c_skip[:, None] * x_noisy + c_out[:, None] * core

    resid = h - xb
    loss = float(np.mean(w * np.sum(resid**2, axis=1) / dim))

    # backward
    d_core = (2.0 / (n * dim)) * (w * c_out)[:, None] * resid
    grads_w, grads_b = [], []
    delta = d_core
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = delta @ model.weights[i].T
            if model.activation == "tanh":
                delta = delta * (1.0 - acts[i] ** 2)
            else:
                delta = delta * (acts[i] > 0)
    grads_w.reverse()
    grads_b.reverse()
    d_feats = delta @ model.weights[0].T if len(model.weights) else None
    # embedding rows receive the middle block of the feature gradient
    d_emb_rows = d_feats[:, dim : dim + model.embedding.shape[1]]
    d_emb = np.zeros_like(model.embedding)
    np.add.at(d_emb, yb, d_emb_rows)

    gnorm = math.sqrt(
        sum(float(np.sum(g**2)) for g in grads_w)
        + sum(float(np.sum(g**2)) for g in grads_b)
        + float(np.sum(d_emb**2))
    )
    scale = lr if gnorm <= grad_clip else lr * grad_clip / gnorm
    for wgt, g in zip(model.weights, grads_w):
        wgt -= scale * g
    for b, g in zip(model.biases, grads_b):
        b -= scale * g
    model.embedding -= scale * d_emb
    return loss


# -- checkpoint I/O ----------------------------------------------------


def save_checkpoint(model: MlpDenoiser, path: str) -> None:
    """Serialize a model to the NDC1 binary format (see module docstring)."""
    widths = model.widths
    parts = [
        _MAGIC,
        struct.pack("<BB", _VERSION, _ACTIVATIONS[model.activation]),
        struct.pack(
            "<IIII", model.dim, model.n_classes, model.embedding.shape[1], len(model.weights)
        ),
        struct.pack("<d", model.sigma_data),
        struct.pack(f"<{len(widths)}I", *widths),
        model.priors.astype("<f8").tobytes(),
        model.embedding.astype("<f8").tobytes(),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def load_checkpoint(path: str) -> MlpDenoiser:
    """Load a model saved by :func:`save_checkpoint`.

    Raises BadMagicError, VersionMismatchError, or TruncatedCheckpointError
    for the corresponding corruption modes.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(4)
    if magic != _MAGIC:
        raise BadMagicError(f"expected {_MAGIC!r}, found {magic!r}")
    version, act = struct.unpack("<BB", rd.take(2))
    if version != _VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {_VERSION}")
    if act not in _ACT_NAMES:
        raise CheckpointError(f"unknown activation tag {act}")
    dim, k, e, n_layers = struct.unpack("<IIII", rd.take(16))
    (sigma_data,) = struct.unpack("<d", rd.take(8))
    widths = struct.unpack(f"<{n_layers + 1}I", rd.take(4 * (n_layers + 1)))
    priors = rd.floats(k)
    emb = rd.floats(k * e).reshape(k, e)
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(rd.floats(widths[i] * widths[i + 1]).reshape(widths[i], widths[i + 1]))
        biases.append(rd.floats(widths[i + 1]))
    if rd.pos != len(rd.buf):
        raise CheckpointError(f"{len(rd.buf) - rd.pos} trailing bytes after weights")
    model = MlpDenoiser(weights, biases, emb, sigma_data, _ACT_NAMES[act], priors)
    if model.dim != dim:
        raise CheckpointError("declared dim does not match final layer width")
    return model
