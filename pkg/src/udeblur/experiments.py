"""Train-deblur-score runs over a list of config variants, one combined table at the end."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ABLATION_LABELS, ABLATIONS, LAMBDA_P_SWEEP, TrainConfig
from .data import list_images, load_image, save_image
from .metrics import evaluate, render_summary
from .training import deblur_image, make_extractor, train
from .checkpoint import load_model

log = logging.getLogger(__name__)


@dataclass
class Variant:
    name: str
    label: str
    config: TrainConfig


@dataclass
class VariantResult:
    variant: Variant
    aggregates: dict | None
    status: str  # "done", "skipped: <reason>"


def ablation_variants(base: TrainConfig):
    return [Variant(k, ABLATION_LABELS[k], replace(base, ablation_preset=k).validate()) for k in ABLATIONS]


def lambda_p_variants(base: TrainConfig, values=LAMBDA_P_SWEEP):
    return [Variant(f"lambda_p={v:g}", f"lambda_p = {v:g}", replace(base, lambda_p=float(v)).validate())
            for v in values]


def deblur_directory(model, in_path, out_dir, channels, use_blur_code=True):
    """Deblur every image under ``in_path``; returns (written, skipped) path lists."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for path in list_images(in_path):
        try:
            img = load_image(path, channels)
        except OSError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(path)
            continue
        target = out_dir / path.name
        save_image(target, deblur_image(model, img, use_blur_code))
        written.append(target)
    return written, skipped


def run_variant(variant: Variant, sharp, blurred, test_blurred, test_sharp, out_dir):
    """Train one variant, deblur the test set and score it against the sharp truth."""
    cfg = variant.config
    run_dir = Path(out_dir) / variant.name
    ckpt = train(cfg, sharp, blurred, run_dir)
    model, _, _ = load_model(ckpt)
    model.eval()
    deblur_directory(model, test_blurred, run_dir / "deblurred", cfg.image_channels, cfg.ablation.blur_encoder)
    report = evaluate(run_dir / "deblurred", test_sharp, cfg.task_preset, make_extractor(cfg, "pool5"))
    report.write(run_dir / "eval.tsv")
    return report.aggregates()


def write_table(results, path):
    rows = [(r.variant.label, r.aggregates or {}) for r in results]
    text = render_summary(rows)
    notes = [f"# {r.variant.label}: {r.status}" for r in results if r.status != "done"]
    Path(path).write_text(text + "".join(n + "\n" for n in notes))
    return text


def run_variants(variants, sharp, blurred, test_blurred, test_sharp, out_dir, time_budget=None,
                 table_name="summary.tsv"):
    """Run variants in order; the table is rewritten after each so partial results survive.

    A variant is started only while the elapsed time is under ``time_budget``
    seconds; the rest are listed as skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    results = []
    for v in variants:
        if time_budget is not None and time.monotonic() - start >= time_budget:
            results.append(VariantResult(v, None, "skipped: time budget exhausted"))
        else:
            results.append(VariantResult(v, run_variant(v, sharp, blurred, test_blurred, test_sharp, out_dir), "done"))
        write_table(results, out_dir / table_name)
    return results
