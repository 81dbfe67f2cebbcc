"""Command line for blur synthesis, training, deblurring and evaluation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Every verb checks its arguments before writing anything.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .blur import BlurParameterError, BlurSetError, TrajectoryParams, build_blurred_set
from .checkpoint import CheckpointError
from .config import ABLATIONS, TrainConfig, config_from_dict, load_config
from .data import ManifestError, default_output_root, list_images, read_manifest
from .experiments import ablation_variants, deblur_directory, lambda_p_variants, run_variants
from .features import build_extractor
from .metrics import CommandOcr, MetricError, OcrUnavailable, evaluate
from .networks import ConfigError
from .training import DivergenceError, TrainingError, load_for_inference, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("udeblur")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _existing_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(value, default_name):
    return Path(value) if value else default_output_root() / default_name


def _trajectory(args):
    params = TrajectoryParams(
        num_steps=args.num_steps,
        max_len=args.max_len,
        p_impulsive=args.p_impulsive,
        gaussian_shake_range=(args.shake_min, args.shake_max),
        seed=args.seed,
    )
    try:
        return params.validate()
    except BlurParameterError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args):
    cfg = load_config(_existing_file(args.config, "config file")) if args.config else TrainConfig()
    overrides = dict(_split_set(s) for s in args.set)
    if args.ablation:
        overrides["ablation_preset"] = args.ablation
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    return config_from_dict(overrides, cfg)


def _split_set(text):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file (defaults fill missing keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")


def _add_data_flags(p, test=False):
    p.add_argument("--sharp", required=True, help="manifest of sharp training images")
    p.add_argument("--blurred", required=True, help="manifest of blurred training images")
    if test:
        p.add_argument("--test-blurred", required=True, help="blurred held-out images (dir)")
        p.add_argument("--test-sharp", required=True, help="sharp truth for the held-out images (dir)")


def build_parser():
    parser = _Parser(prog="udeblur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("blurgen", help="blur a sharp manifest with sampled camera-shake kernels")
    p.add_argument("--sharp", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=float, default=10.0)
    p.add_argument("--p-impulsive", type=float, default=0.005)
    p.add_argument("--shake-min", type=float, default=0.5)
    p.add_argument("--shake-max", type=float, default=1.0)
    p.add_argument("--num-steps", type=int, default=2000)
    p.add_argument("--kernel-size", type=int, default=31)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train from unpaired sharp and blurred manifests")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out")
    p.add_argument("--resume", help="epoch checkpoint to continue from")
    p.add_argument("--ablation", choices=list(ABLATIONS))

    p = sub.add_parser("deblur", help="deblur an image or a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--no-blur-code", action="store_true", help="feed a zero blur code instead of the posterior mean")

    p = sub.add_parser("evaluate", help="score result images against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--preset", choices=("face", "text", "generic"), default="generic")
    p.add_argument("--extractor", choices=("surrogate", "vgg19", "none"), default="surrogate")
    p.add_argument("--extractor-weights")
    p.add_argument("--ocr", help="OCR command; it receives the image path and prints the text")
    p.add_argument("--out", help="write per-image records here")

    for verb, helptext in (("ablate", "train and score the five ablation variants"),
                           ("sweep-lambda-p", "train and score lambda_p in {1, 0.1, 0.01}")):
        p = sub.add_parser(verb, help=helptext)
        _add_config_flags(p)
        _add_data_flags(p, test=True)
        p.add_argument("--out")
        p.add_argument("--time-budget", type=float, help="seconds; variants not started in time are skipped")
        p.set_defaults(ablation=None)

    p = sub.add_parser("make-toy", help="render a synthetic glyph corpus with an unpaired split")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--n-train", type=int, default=180)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=float, default=5.0)
    p.add_argument("--kernel-size", type=int, default=31)
    return parser


def _check_kernel_size(size, max_len):
    # centred on the centroid, a path reaches max_len from the centre, plus one cell of bilinear spread
    need = 2 * math.ceil(max_len) + 3
    if size % 2 == 0 or size < need:
        raise UsageError(f"--kernel-size must be odd and at least {need} for --max-len {max_len}")


def cmd_blurgen(args):
    params = _trajectory(args)
    _check_kernel_size(args.kernel_size, params.max_len)
    manifest = read_manifest(_existing_file(args.sharp, "manifest"))
    out = _out_dir(args.out, "blurred")
    result = build_blurred_set(manifest, out, params, args.kernel_size, args.workers)
    echo = "".join(f"{k}={v}\n" for k, v in vars(params).items()) + f"kernel_size={args.kernel_size}\n"
    (out / "params.txt").write_text(echo)
    sys.stdout.write(echo)
    print(f"wrote {len(result)} blurred images to {out} ({len(result.skipped)} skipped)")


def cmd_train(args):
    cfg = _train_config(args)
    sharp = _existing_file(args.sharp, "sharp manifest")
    blurred = _existing_file(args.blurred, "blurred manifest")
    resume = _existing_file(args.resume, "checkpoint") if args.resume else None
    out = _out_dir(args.out, "train")
    ckpt = train(cfg, sharp, blurred, out, resume=resume)
    print(f"final checkpoint: {ckpt}")


def cmd_deblur(args):
    ckpt = _existing_file(args.ckpt, "checkpoint")
    inp = _existing(args.inp, "input")
    model, cfg = load_for_inference(ckpt)
    channels = cfg.image_channels if cfg else model.config.image_channels
    use_code = not args.no_blur_code and (cfg is None or cfg.ablation.blur_encoder)
    written, skipped = deblur_directory(model, inp, _out_dir(args.out, "deblurred"), channels, use_code)
    if not written:
        raise MetricError(f"no decodable images in {inp}")
    print(f"deblurred {len(written)} images ({len(skipped)} skipped)")


def cmd_evaluate(args):
    results = _existing(args.results, "results directory")
    truth = _existing(args.truth, "truth directory")
    ocr = CommandOcr(args.ocr) if args.ocr else None
    extractor = None
    if args.extractor != "none":
        channels = 1 if all(_is_gray(p) for p in list_images(truth)[:1]) else 3
        extractor = build_extractor(args.extractor, "pool5", channels, weights=args.extractor_weights)
    report = evaluate(results, truth, args.preset, extractor, ocr)
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.render())
    if report.unmatched:
        log.warning("unmatched files: %s", ", ".join(report.unmatched))


def _is_gray(path):
    from PIL import Image

    with Image.open(path) as im:
        return im.mode in ("L", "1", "I;16")


def _cmd_variants(args, make_variants, default_name, table_name):
    cfg = _train_config(args)
    paths = [_existing_file(args.sharp, "sharp manifest"), _existing_file(args.blurred, "blurred manifest"),
             _existing(args.test_blurred, "test blurred directory"), _existing(args.test_sharp, "test sharp directory")]
    if args.time_budget is not None and args.time_budget <= 0:
        raise UsageError("--time-budget must be positive")
    out = _out_dir(args.out, default_name)
    results = run_variants(make_variants(cfg), *paths, out, args.time_budget, table_name)
    sys.stdout.write((out / table_name).read_text())
    return results


def cmd_ablate(args):
    _cmd_variants(args, ablation_variants, "ablation", "ablation.tsv")


def cmd_sweep(args):
    _cmd_variants(args, lambda_p_variants, "sweep_lambda_p", "sweep_lambda_p.tsv")


def cmd_make_toy(args):
    from .toydata import make_toy_corpus

    if not 0 < args.n_train < args.n_images or args.size < 16:
        raise UsageError("need 0 < --n-train < --n-images and --size >= 16")
    try:
        params = replace(TrajectoryParams(), max_len=args.max_len).validate()
    except BlurParameterError as exc:
        raise UsageError(str(exc)) from None
    _check_kernel_size(args.kernel_size, params.max_len)
    if args.kernel_size > args.size:
        raise UsageError("--kernel-size must not exceed --size")
    corpus = make_toy_corpus(args.out, args.n_images, args.n_train, args.size, args.seed, params, args.kernel_size)
    print(f"toy corpus in {corpus.root}")


COMMANDS = {
    "blurgen": cmd_blurgen,
    "train": cmd_train,
    "deblur": cmd_deblur,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-lambda-p": cmd_sweep,
    "make-toy": cmd_make_toy,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except (UsageError, ConfigError, BlurParameterError, OcrUnavailable) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ManifestError, BlurSetError, CheckpointError, MetricError, TrainingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
