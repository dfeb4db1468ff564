"""Command-line front end.

Subcommands: fit-template, normalize, augment, split, evaluate,
check-gradient. Option precedence is CLI flag > config file (flat
key=value, keys named like the long flags with dashes or underscores) >
built-in default. Progress lines go to stderr; machine-readable results
go to files or stdout. Each error class maps to a distinct exit code
(see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import gradcheck, manifest, metrics, normalizer
from .acd import AcdHyperparams
from .augment import AugmentConfig, augment_stream
from .errors import (
    DegenerateStainsError,
    EmptyDatasetError,
    EmptyPredictionsError,
    InsufficientTissueError,
    PredictionParseError,
    SingleClassError,
    SingularMatrixError,
)
from .io_utils import load_rgb_png, save_rgb_png

EXIT_CODES = {
    "ok": 0,
    "error": 1,
    "usage": 2,
    InsufficientTissueError: 3,
    DegenerateStainsError: 4,
    SingularMatrixError: 5,
    "io": 6,
    PredictionParseError: 7,
    EmptyDatasetError: 8,
    SingleClassError: 9,
    EmptyPredictionsError: 10,
    "gradient": 11,
}

# name -> (type, default); doubles as the config-file schema.
HYPERPARAM_OPTIONS = {
    "lambda_p": (float, AcdHyperparams.lambda_p),
    "lambda_b": (float, AcdHyperparams.lambda_b),
    "lambda_e": (float, AcdHyperparams.lambda_e),
    "eta": (float, AcdHyperparams.eta),
    "gamma": (float, AcdHyperparams.gamma),
    "learning_rate": (float, AcdHyperparams.learning_rate),
    "max_iters": (int, AcdHyperparams.max_iters),
    "tol": (float, AcdHyperparams.tol),
    "sample_n": (int, AcdHyperparams.sample_n),
    "seed": (int, AcdHyperparams.seed),
}

AUGMENT_OPTIONS = {
    "shear_range": (float, AugmentConfig.shear_range),
    "zoom_range": (float, AugmentConfig.zoom_range),
    "rotation_range": (float, AugmentConfig.rotation_range),
    "horizontal_flip": (lambda s: s.lower() in ("1", "true", "yes"), AugmentConfig.horizontal_flip),
    "width_shift_range": (float, AugmentConfig.width_shift_range),
    "height_shift_range": (float, AugmentConfig.height_shift_range),
    "seed": (int, AugmentConfig.seed),
}


def read_config(path) -> dict[str, str]:
    """Flat key=value config file; '#' starts a comment line."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed config line {line!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(options: dict, args: argparse.Namespace, config: dict[str, str]) -> dict:
    """Apply flag > config file > default precedence."""
    resolved = {}
    for name, (cast, default) in options.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            resolved[name] = flag_value
        elif name in config:
            resolved[name] = cast(config[name])
        else:
            resolved[name] = default
    return resolved


def _add_hyperparam_flags(parser: argparse.ArgumentParser) -> None:
    for name, (cast, default) in HYPERPARAM_OPTIONS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            type=cast, default=None,
                            help=f"default {default}")


def _hyperparams(args, config) -> AcdHyperparams:
    return AcdHyperparams(**_resolve(HYPERPARAM_OPTIONS, args, config))


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_fit_template(args, config) -> int:
    hp = _hyperparams(args, config)
    img = load_rgb_png(args.image)
    template = normalizer.extract_template_profile(img, hp, source_path=str(args.image))
    normalizer.save_template(args.out_profile, template, hp)
    _progress(f"template profile written to {args.out_profile}")
    return 0


def cmd_normalize(args, config) -> int:
    template, template_hp = normalizer.load_template(args.template)
    hp = _hyperparams(args, config)
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            col = header.index("path") if header and "path" in header else 0
            paths = [row[col] for row in reader if row]
    else:
        paths = sorted(
            os.path.join(args.input_dir, name)
            for name in os.listdir(args.input_dir)
            if name.lower().endswith(".png")
        )
    report = normalizer.normalize_batch(paths, template, hp, out_dir=args.out_dir,
                                        workers=args.workers)
    if args.report:
        report.write_csv(args.report)
    _progress(
        f"normalized {len(report.results)} images, {report.failures} failures, "
        f"total {report.total_millis:.0f} ms, mean {report.mean_millis:.1f} ms/image"
    )
    return 0 if report.failures == 0 else EXIT_CODES["io"]


def cmd_augment(args, config) -> int:
    cfg = AugmentConfig(**_resolve(AUGMENT_OPTIONS, args, config))
    img = load_rgb_png(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    stem, _ = os.path.splitext(os.path.basename(args.input))
    for i, out in enumerate(augment_stream(img, cfg, args.count)):
        save_rgb_png(os.path.join(args.out_dir, f"{stem}_aug{i:04d}.png"), out)
    _progress(f"wrote {args.count} augmented images to {args.out_dir}")
    return 0


def cmd_split(args, config) -> int:
    result = manifest.scan(args.root, magnification=args.magnification)
    if result.skipped:
        _progress(f"skipped {len(result.skipped)} unparseable files:")
        for path in result.skipped:
            _progress(f"  {path}")
    split_manifest = manifest.split(result.records, seed=args.seed,
                                    by_patient=args.by_patient)
    split_manifest.write_csv(args.out_manifest)
    _progress(
        f"train {len(split_manifest.train)} / validation "
        f"{len(split_manifest.validation)} / test {len(split_manifest.test)} "
        f"-> {args.out_manifest}"
    )
    return 0


def cmd_evaluate(args, config) -> int:
    report = metrics.evaluate_file(args.predictions, threshold=args.threshold)
    if args.out_report:
        metrics.report_to_csv(report, args.out_report)
    print(metrics.report_to_text(report))
    return 0


def cmd_check_gradient(args, config) -> int:
    worst = gradcheck.max_relative_error(seed=args.seed, points=args.points)
    print(f"max relative gradient error over {args.points} points: {worst:.3e}")
    if worst >= gradcheck.REL_TOLERANCE:
        return EXIT_CODES["gradient"]
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainforge",
        description="H&E stain normalization via adaptive color deconvolution",
    )
    parser.add_argument("--config", default=None, help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-template", help="fit a template stain profile")
    p.add_argument("--image", required=True)
    p.add_argument("--out-profile", required=True)
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_fit_template)

    p = sub.add_parser("normalize", help="normalize a batch of images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="CSV with a path column")
    src.add_argument("--input-dir")
    p.add_argument("--template", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--report", help="write per-image batch report CSV here")
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("augment", help="write random augmentations of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    for name, (cast, default) in AUGMENT_OPTIONS.items():
        if name == "horizontal_flip":
            p.add_argument("--horizontal-flip", dest=name, default=None,
                           action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name,
                           type=cast, default=None, help=f"default {default}")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="scan a dataset tree and emit split manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--magnification", type=int, default=None,
                   choices=manifest.MAGNIFICATIONS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-patient", action="store_true")
    p.add_argument("--out-manifest", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("evaluate", help="score a prediction CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--out-report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check-gradient", help="finite-difference gradient self-test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_check_gradient)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = {}
    if args.config:
        try:
            config = read_config(args.config)
        except OSError as exc:
            _progress(f"error: {exc}")
            return EXIT_CODES["io"]
        except ValueError as exc:
            _progress(f"error: {exc}")
            return EXIT_CODES["usage"]
    try:
        return args.func(args, config)
    except (InsufficientTissueError, DegenerateStainsError, SingularMatrixError,
            PredictionParseError, EmptyDatasetError, SingleClassError,
            EmptyPredictionsError) as exc:
        _progress(f"error: {exc}")
        return EXIT_CODES[type(exc)]
    except OSError as exc:
        _progress(f"error: {exc}")
        return EXIT_CODES["io"]
    except ValueError as exc:
        _progress(f"error: {exc}")
        return EXIT_CODES["usage"]


if __name__ == "__main__":
    sys.exit(main())
