"""Command-line interface.

Subcommands: gen-data, train, eval, certify, lipschitz, sift-bench.
Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import rng as rngmod
from .acceleration import ClassifierTermEvaluator, CountingEvaluator, SiftConfig, sift_and_refine
from .certification import certify_lipschitz, unit_box_map
from .classifiers import DiffusionClassifier
from .denoiser import AnalyticDenoiser, ClipBox
from .harness import (
    ConfigError,
    CountingDenoiser,
    gen_dataset,
    load_checkpoint,
    load_config,
    parse_config,
    run_certification,
    save_checkpoint,
    save_dataset,
)
from .mlp import MlpDenoiser, train_denoiser
from .schedule import TimestepSubset


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad flags are configuration errors
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ndcert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--output", default=None, help="override config output path")

    p = sub.add_parser("gen-data", help="sample a labelled dataset from the mixture")
    common(p)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)

    p = sub.add_parser("train", help="train the MLP denoiser on the mixture")
    common(p)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hidden", type=int, nargs="+", default=[64, 64])

    p = sub.add_parser("eval", help="base-classifier accuracy on noisy test points")
    common(p)

    p = sub.add_parser("certify", help="randomized-smoothing certification sweep")
    common(p)
    p.add_argument("--classifier", choices=["dc", "epndc", "apndc"], default=None)
    p.add_argument("--sigma", type=float, default=None, help="smoothing noise level")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n0", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--t-prime", type=int, default=None)
    p.add_argument("--shared-noise", choices=["on", "off"], default=None)
    p.add_argument("--timing", action="store_true", help="record wall time per point")

    p = sub.add_parser("lipschitz", help="direct Lipschitz certificates for dc")
    common(p)
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--delta", type=float, default=0.05)

    p = sub.add_parser("sift-bench", help="sift-and-refine agreement and call counts")
    common(p)
    p.add_argument("--threshold", type=float, default=None, help="loss-gap cutoff")
    p.add_argument("--sift-steps", type=int, default=4)
    return parser


def _load_raw(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    return raw


def _config_with_overrides(args) -> "ExperimentConfig":
    raw = _load_raw(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.output is not None:
        raw["output"] = args.output
    if getattr(args, "classifier", None) is not None:
        raw.setdefault("classifier", {})["variant"] = args.classifier
    if getattr(args, "t_prime", None) is not None:
        raw.setdefault("classifier", {})["t_prime"] = args.t_prime
    if getattr(args, "shared_noise", None) is not None:
        raw.setdefault("classifier", {})["shared_noise"] = args.shared_noise == "on"
    for name in ("n", "n0", "alpha"):
        value = getattr(args, name, None)
        if value is not None:
            raw.setdefault("smoothing", {})[name] = value
    if getattr(args, "sigma", None) is not None:
        raw.setdefault("smoothing", {})["noise_sigma"] = args.sigma
        sched = raw.get("schedule", {})
        tau = raw.get("classifier", {}).get("tau_index", 0)
        if "sigma_min" in sched and tau == 0:
            sched["sigma_min"] = args.sigma
        else:
            raise ConfigError(
                "--sigma can only rebuild parametric schedules at tau_index 0; "
                "edit the schedule in the config instead"
            )
    return parse_config(raw)


def _test_split(config):
    from .harness import load_dataset

    if config.mixture is not None:
        ds = gen_dataset(config.mixture, 1, config.n_test, config.seed)
    else:
        ds = load_dataset(config.dataset_path)
    return ds.x_test, ds.y_test


def _denoiser(config):
    if config.denoiser_spec == "analytic":
        if config.mixture is None:
            raise ConfigError("config.denoiser: analytic denoiser needs a mixture")
        return AnalyticDenoiser(config.mixture)
    return load_checkpoint(config.denoiser_spec)


def _cmd_gen_data(args) -> int:
    config = _config_with_overrides(args)
    if config.mixture is None:
        raise ConfigError("gen-data needs a mixture in the config")
    ds = gen_dataset(config.mixture, args.n_train, args.n_test, config.seed)
    save_dataset(ds, config.output)
    print(f"wrote {args.n_train}+{args.n_test} points to {config.output}")
    return 0


def _cmd_train(args) -> int:
    config = _config_with_overrides(args)
    if config.mixture is None:
        raise ConfigError("train needs a mixture in the config")
    gm = config.mixture
    ds = gen_dataset(gm, args.n_train, 1, config.seed)
    model = MlpDenoiser.init(
        gm.dim,
        gm.n_classes,
        hidden=tuple(args.hidden),
        sigma_data=float(np.std(ds.x_train)),
        seed=config.seed,
        priors=gm.priors,
    )
    model, log = train_denoiser(
        model,
        ds.x_train,
        ds.y_train,
        config.schedule,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=config.seed,
    )
    save_checkpoint(model, config.output)
    print(
        f"trained {args.epochs} epochs, final loss {log.epoch_losses[-1]:.6g}, "
        f"saved to {config.output}"
    )
    return 0


def _cmd_eval(args) -> int:
    config = _config_with_overrides(args)
    x_test, y_test = _test_split(config)
    classifier = DiffusionClassifier(_denoiser(config), config.schedule, config.classifier)
    sigma = classifier.noise_sigma
    correct = 0
    for pid, (x, y) in enumerate(zip(x_test, y_test)):
        eps = rngmod.gaussian(x.shape, config.seed, rngmod.TAG_SMOOTHING, pid)
        pred = classifier.predict(x + sigma * eps, rngmod.mix(config.seed, pid))
        correct += int(pred == y)
    acc = correct / len(x_test)
    print(f"noisy accuracy at sigma={sigma:g}: {acc:.4f} ({correct}/{len(x_test)})")
    return 0


def _cmd_certify(args) -> int:
    config = _config_with_overrides(args)
    table, _records = run_certification(config, record_timing=args.timing)
    print(f"clean accuracy {table.clean_accuracy:.4f}, abstain rate {table.abstain_rate:.4f}")
    for rad, acc in zip(table.radius_grid, table.certified_accuracy):
        print(f"certified accuracy at r={rad:g}: {acc:.4f}")
    print(f"mean radius {table.mean_radius:.4f}, evaluator calls {table.evaluator_calls}")
    print(f"records written to {config.output}")
    return 0


def _cmd_lipschitz(args) -> int:
    config = _config_with_overrides(args)
    if config.classifier.variant != "dc":
        raise ConfigError("lipschitz certification applies to the dc variant")
    if config.mixture is None:
        raise ConfigError("lipschitz needs a mixture in the config")
    x_test, y_test = _test_split(config)
    # bounded domain: rescale data into the unit box and clip outputs
    box_map = unit_box_map(x_test, margin=config.mixture.class_std)
    gm_scaled = config.mixture.rescaled(box_map.shift, box_map.scale)
    denoiser = AnalyticDenoiser(gm_scaled, box=ClipBox(0.0, 1.0))
    classifier = DiffusionClassifier(denoiser, config.schedule, config.classifier)
    lines = ["point_id,true_label,pred,pa_lower,pb_upper,radius"]
    certified = 0
    for pid, (x, y) in enumerate(zip(x_test, y_test)):
        cert = certify_lipschitz(
            box_map.forward(x), classifier, args.n_samples, args.delta, rngmod.mix(config.seed, pid)
        )
        pred = classifier.predict(box_map.forward(x), rngmod.mix(config.seed, pid, 1))
        certified += int(cert.radius > 0 and pred == y)
        lines.append(
            f"{pid},{int(y)},{pred},{cert.p_a_lower:.9g},{cert.p_b_upper:.9g},{cert.radius:.9g}"
        )
    with open(config.output, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    bound = certify_lipschitz(
        box_map.forward(x_test[0]), classifier, 2, args.delta, 0
    ).lipschitz_bound
    print(f"lipschitz bound {bound:.6g}; certified {certified}/{len(x_test)} points")
    print(f"records written to {config.output}")
    return 0


def _cmd_sift_bench(args) -> int:
    config = _config_with_overrides(args)
    x_test, y_test = _test_split(config)
    denoiser = CountingDenoiser(_denoiser(config))
    classifier = DiffusionClassifier(denoiser, config.schedule, config.classifier)
    subset = list(classifier.subset)
    n_sift = min(args.sift_steps, len(subset) - 1) or 1
    sift = SiftConfig(
        TimestepSubset(np.array(subset[:n_sift])),
        TimestepSubset(np.array(subset[n_sift:])),
        args.threshold if args.threshold is not None else float("inf"),
    )
    evaluator = CountingEvaluator(ClassifierTermEvaluator(denoiser, config.schedule, config.classifier))
    agree = 0
    full_calls = len(subset) * denoiser.n_classes * len(x_test)
    sigma = classifier.noise_sigma
    for pid, x in enumerate(x_test):
        eps = rngmod.gaussian(x.shape, config.seed, rngmod.TAG_SMOOTHING, pid)
        x_noisy = x + sigma * eps if config.classifier.variant != "dc" else x
        seed = rngmod.mix(config.seed, pid)
        pruned = sift_and_refine(x_noisy, evaluator, sift, seed)
        agree += int(pruned == classifier.predict(x_noisy, seed))
    print(
        f"agreement {agree}/{len(x_test)} = {agree / len(x_test):.4f}; "
        f"evaluator calls {evaluator.calls} vs full {full_calls}"
    )
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "certify": _cmd_certify,
    "lipschitz": _cmd_lipschitz,
    "sift-bench": _cmd_sift_bench,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
