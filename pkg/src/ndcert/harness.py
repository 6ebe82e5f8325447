"""Experiment runner: dataset generation, certification sweeps, persistence.

The JSON experiment config has the following top-level schema (unknown
keys anywhere are a hard error, reported with their field path):

    {
      "mixture":  {"means": [[...], ...], "class_std": s, "priors": [...]?}
                  -- or -- "dataset": "points.csv",
      "schedule": {"sigma_min": ..., "sigma_max": ..., "T": ..., "rho": ...}
                  -- or -- {"sigmas": [...]},
      "classifier": {"variant": "dc|epndc|apndc", "scheme": {"kind": ...},
                     "t_prime": ..., "mc_per_timestep": ..., "shared_noise": ...,
                     "tau_index": ..., "epndc_reweight": ...},
      "smoothing": {"noise_sigma": ..., "n0": ..., "n": ..., "alpha": ...},
      "denoiser": "analytic" | {"checkpoint": "model.ndc"},
      "radius_grid": [0.25, 0.5, 0.75, 1.0],   # multiples of the data scale s
      "n_test": 100,
      "seed": 0,
      "output": "records.csv"
    }

Certified-accuracy tables follow the usual convention: a point counts at
radius r only if it was certified correctly with radius >= r; abstentions
count as failures at every radius.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .certification import (
    ABSTAIN,
    CertificationRecord,
    SmoothingConfig,
    smoothed_certify,
)
from .classifiers import ClassifierConfig, DiffusionClassifier
from .denoiser import AnalyticDenoiser, GaussianMixtureSpec, WeightScheme
from .mlp import load_checkpoint, save_checkpoint  # re-exported persistence API
from .schedule import NoiseSchedule, build_geometric_schedule

__all__ = [
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "ResultTable",
    "CountingDenoiser",
    "gen_dataset",
    "save_dataset",
    "load_dataset",
    "load_config",
    "run_certification",
    "write_records_csv",
    "write_table_csv",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the field path."""


# -- dataset -------------------------------------------------------------


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def gen_dataset(
    gm: GaussianMixtureSpec, n_train: int, n_test: int, seed: int
) -> Dataset:
    """I.i.d. labelled draws from the mixture; deterministic per seed."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test point")
    gen = rngmod.substream(seed, rngmod.TAG_DATASET)
    x_train, y_train = gm.sample(n_train, gen)
    x_test, y_test = gm.sample(n_test, gen)
    return Dataset(x_train, y_train, x_test, y_test)


def save_dataset(ds: Dataset, path: str) -> None:
    """Write a dataset as CSV (split,label,x0..x{D-1}); byte-stable."""
    dim = ds.x_train.shape[1]
    header = "split,label," + ",".join(f"x{j}" for j in range(dim))
    lines = [header]
    for split, xs, ys in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
        for x, y in zip(xs, ys):
            coords = ",".join("%.17g" % v for v in x)
            lines.append(f"{split},{int(y)},{coords}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> Dataset:
    splits: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("split,label,"):
            raise ConfigError(f"{path}: not a dataset CSV")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            xs, ys = splits[parts[0]]
            ys.append(int(parts[1]))
            xs.append([float(v) for v in parts[2:]])
    return Dataset(
        np.asarray(splits["train"][0]),
        np.asarray(splits["train"][1], dtype=np.int64),
        np.asarray(splits["test"][0]),
        np.asarray(splits["test"][1], dtype=np.int64),
    )


# -- config parsing --------------------------------------------------------


def _require_keys(d: dict, allowed: set[str], path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _parse_scheme(d, path: str) -> WeightScheme:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{path}: expected an object with a 'kind'")
    kind = d["kind"]
    if kind == "truncated":
        _require_keys(d, {"kind", "base", "sigma_threshold"}, path)
        return WeightScheme.truncated(
            _parse_scheme(d["base"], f"{path}.base"), float(d["sigma_threshold"])
        )
    if kind == "edm":
        _require_keys(d, {"kind", "sigma_d", "k_mu", "k_sigma"}, path)
        return WeightScheme.edm(
            float(d.get("sigma_d", 0.5)), float(d.get("k_mu", -1.2)), float(d.get("k_sigma", 1.2))
        )
    _require_keys(d, {"kind"}, path)
    try:
        return WeightScheme(kind)
    except ValueError as exc:
        raise ConfigError(f"{path}.kind: {exc}") from exc


def _parse_schedule(d, path: str) -> NoiseSchedule:
    if "sigmas" in d:
        _require_keys(d, {"sigmas"}, path)
        return NoiseSchedule(np.asarray(d["sigmas"], dtype=np.float64))
    _require_keys(d, {"sigma_min", "sigma_max", "T", "rho"}, path)
    try:
        return build_geometric_schedule(
            float(d["sigma_min"]), float(d["sigma_max"]), int(d["T"]), float(d.get("rho", 7.0))
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class ExperimentConfig:
    schedule: NoiseSchedule
    classifier: ClassifierConfig
    smoothing: SmoothingConfig
    seed: int
    output: str
    mixture: GaussianMixtureSpec | None = None
    dataset_path: str | None = None
    denoiser_spec: str = "analytic"
    radius_grid: np.ndarray = field(
        default_factory=lambda: np.array([0.25, 0.5, 0.75, 1.0])
    )
    n_test: int = 100

    def __post_init__(self) -> None:
        grid = np.asarray(self.radius_grid, dtype=np.float64)
        if np.any(grid <= 0) or not np.all(np.diff(grid) > 0):
            raise ConfigError("radius_grid: must be positive and increasing")
        self.radius_grid = grid
        if (self.mixture is None) == (self.dataset_path is None):
            raise ConfigError("exactly one of 'mixture' and 'dataset' is required")
        tau = self.classifier.tau_index
        sig_tau = float(self.schedule.sigmas[tau])
        if not math.isclose(sig_tau, self.smoothing.noise_sigma, rel_tol=1e-9):
            raise ConfigError(
                f"smoothing.noise_sigma: {self.smoothing.noise_sigma} does not equal the "
                f"schedule sigma {sig_tau} at classifier.tau_index={tau}"
            )


_TOP_KEYS = {
    "mixture", "dataset", "schedule", "classifier", "smoothing",
    "denoiser", "radius_grid", "n_test", "seed", "output",
}


def parse_config(raw: dict) -> ExperimentConfig:
    _require_keys(raw, _TOP_KEYS, "config")
    for required in ("schedule", "classifier", "smoothing", "seed", "output"):
        if required not in raw:
            raise ConfigError(f"config.{required}: missing")

    mixture = None
    if "mixture" in raw:
        m = raw["mixture"]
        _require_keys(m, {"means", "class_std", "priors"}, "config.mixture")
        try:
            mixture = GaussianMixtureSpec(
                np.asarray(m["means"], dtype=np.float64),
                float(m["class_std"]),
                None if m.get("priors") is None else np.asarray(m["priors"], dtype=np.float64),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"config.mixture: {exc}") from exc

    c = dict(raw["classifier"])
    _require_keys(
        c,
        {"variant", "scheme", "t_prime", "mc_per_timestep", "shared_noise",
         "tau_index", "epndc_reweight"},
        "config.classifier",
    )
    if "scheme" in c:
        c["scheme"] = _parse_scheme(c["scheme"], "config.classifier.scheme")
    try:
        classifier = ClassifierConfig(**c)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.classifier: {exc}") from exc

    s = raw["smoothing"]
    _require_keys(s, {"noise_sigma", "n0", "n", "alpha"}, "config.smoothing")
    try:
        smoothing = SmoothingConfig(**s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.smoothing: {exc}") from exc

    denoiser_spec = raw.get("denoiser", "analytic")
    if isinstance(denoiser_spec, dict):
        _require_keys(denoiser_spec, {"checkpoint"}, "config.denoiser")
        denoiser_spec = str(denoiser_spec["checkpoint"])
    elif denoiser_spec != "analytic":
        raise ConfigError("config.denoiser: expected 'analytic' or {'checkpoint': path}")

    kwargs = {}
    if "radius_grid" in raw:
        kwargs["radius_grid"] = np.asarray(raw["radius_grid"], dtype=np.float64)
    if "n_test" in raw:
        kwargs["n_test"] = int(raw["n_test"])
    return ExperimentConfig(
        schedule=_parse_schedule(raw["schedule"], "config.schedule"),
        classifier=classifier,
        smoothing=smoothing,
        seed=int(raw["seed"]),
        output=str(raw["output"]),
        mixture=mixture,
        dataset_path=raw.get("dataset"),
        denoiser_spec=denoiser_spec,
        **kwargs,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    return parse_config(raw)


# -- evaluator-call accounting --------------------------------------------


class CountingDenoiser:
    """Delegating wrapper that counts single-point denoiser evaluations."""

    def __init__(self, base):
        self.base = base
        self.evaluations = 0

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    @property
    def priors(self) -> np.ndarray:
        return self.base.priors

    def denoise(self, x, sigma, y):
        self.evaluations += np.atleast_2d(x).shape[0]
        return self.base.denoise(x, sigma, y)

    def denoise_marginal(self, x, sigma):
        out = self.priors[0] * self.denoise(x, sigma, 0)
        for y in range(1, self.n_classes):
            out = out + self.priors[y] * self.denoise(x, sigma, y)
        return out


# -- certification sweep ----------------------------------------------------


@dataclass
class ResultTable:
    """Aggregate results of one certification run."""

    radius_grid: np.ndarray
    certified_accuracy: np.ndarray
    clean_accuracy: float
    abstain_rate: float
    mean_radius: float
    evaluator_calls: int

    def __post_init__(self) -> None:
        if np.any(np.diff(self.certified_accuracy) > 0):
            raise AssertionError("certified accuracy must be nonincreasing in the radius")
        rates = [self.clean_accuracy, self.abstain_rate, *self.certified_accuracy]
        if any(r < 0 or r > 1 for r in rates):
            raise AssertionError("rates must lie in [0, 1]")


def aggregate_records(
    records: list[CertificationRecord],
    radius_grid: np.ndarray,
    evaluator_calls: int = 0,
) -> ResultTable:
    radii = np.array([r.radius for r in records])
    correct = np.array([r.pred == r.true_label and r.pred != ABSTAIN for r in records])
    abstain = np.array([r.pred == ABSTAIN for r in records])
    certified = np.array([np.mean(correct & (radii >= rad)) for rad in radius_grid])
    return ResultTable(
        radius_grid=np.asarray(radius_grid, dtype=np.float64),
        certified_accuracy=certified,
        clean_accuracy=float(np.mean(correct)),
        abstain_rate=float(np.mean(abstain)),
        mean_radius=float(np.mean(radii)),
        evaluator_calls=evaluator_calls,
    )


def run_certification(
    config: ExperimentConfig, record_timing: bool = False
) -> tuple[ResultTable, list[CertificationRecord]]:
    """Certify every test point and write the per-point and aggregate CSVs.

    Each point owns an independent seed substream keyed by its id, so the
    sweep is deterministic; rows are sorted by point id before writing.
    Timing is recorded only on request to keep output files byte-stable.
    """
    if config.mixture is not None:
        gm = config.mixture
        ds = gen_dataset(gm, n_train=1, n_test=config.n_test, seed=config.seed)
        x_test, y_test = ds.x_test, ds.y_test
        data_scale = gm.class_std
    else:
        ds = load_dataset(config.dataset_path)
        x_test, y_test = ds.x_test, ds.y_test
        gm = None
        data_scale = 1.0

    if config.denoiser_spec == "analytic":
        if gm is None:
            raise ConfigError("config.denoiser: analytic denoiser needs a mixture")
        base = AnalyticDenoiser(gm)
    else:
        base = load_checkpoint(config.denoiser_spec)
    denoiser = CountingDenoiser(base)
    classifier = DiffusionClassifier(denoiser, config.schedule, config.classifier)
    config.schedule.check_prior_coverage(float(np.max(np.linalg.norm(x_test, axis=1))))

    records = []
    for pid in range(len(x_test)):
        records.append(
            smoothed_certify(
                x_test[pid],
                classifier,
                config.smoothing,
                seed=rngmod.mix(config.seed, pid),
                point_id=pid,
                true_label=int(y_test[pid]),
                record_timing=record_timing,
            )
        )
    records.sort(key=lambda r: r.point_id)
    table = aggregate_records(records, config.radius_grid * data_scale, denoiser.evaluations)
    write_records_csv(records, config.output)
    write_table_csv(table, _table_path(config.output))
    return table, records


def _table_path(records_path: str) -> str:
    stem, ext = os.path.splitext(records_path)
    return f"{stem}_table{ext or '.csv'}"


def _fmt(v: float) -> str:
    return "%.9g" % v


def write_records_csv(records: list[CertificationRecord], path: str) -> None:
    lines = ["point_id,true_label,pred,abstain,pa_lower,radius,wall_ms"]
    for r in sorted(records, key=lambda r: r.point_id):
        lines.append(
            f"{r.point_id},{r.true_label},{r.pred},{int(r.abstained)},"
            f"{_fmt(r.p_a_lower)},{_fmt(r.radius)},{_fmt(r.wall_ms)}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_table_csv(table: ResultTable, path: str) -> None:
    lines = ["radius,certified_accuracy,clean_accuracy,abstain_rate,mean_radius,evaluator_calls"]
    for rad, acc in zip(table.radius_grid, table.certified_accuracy):
        lines.append(
            f"{_fmt(rad)},{_fmt(acc)},{_fmt(table.clean_accuracy)},"
            f"{_fmt(table.abstain_rate)},{_fmt(table.mean_radius)},{table.evaluator_calls}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
