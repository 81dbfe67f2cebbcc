"""Synthetic glyph corpus for desk-scale experiments.

Each image is a few dark characters on a light background.  The corpus is
split the way unpaired training needs it: one half of the training images
stays sharp, the other half is only ever seen blurred, and a held-out set
keeps both versions for scoring.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .blur import TrajectoryParams, build_blurred_set
from .data import Manifest, ManifestRecord, write_manifest

GLYPHS = string.ascii_uppercase + string.digits


def glyph_image(rng: np.random.Generator, size=32, n_glyphs=(1, 3)) -> np.ndarray:
    """One uint8 H x W grayscale glyph image."""
    bg = int(rng.integers(200, 256))
    im = Image.new("L", (size, size), bg)
    draw = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(n_glyphs[0], n_glyphs[1] + 1))):
        font = ImageFont.load_default(size=int(rng.integers(size // 2, size - 4)))
        ch = GLYPHS[int(rng.integers(len(GLYPHS)))]
        x0, y0, x1, y1 = draw.textbbox((0, 0), ch, font=font)
        x = int(rng.integers(-x0, max(-x0 + 1, size - x1)))
        y = int(rng.integers(-y0, max(-y0 + 1, size - y1)))
        draw.text((x, y), ch, fill=int(rng.integers(0, 80)), font=font)
    return np.asarray(im)


@dataclass
class ToyCorpus:
    root: Path
    sharp_train: Path
    blurred_train: Path
    test_blurred: Path
    test_sharp: Path


def make_toy_corpus(out_dir, n_images=200, n_train=180, size=32, seed=0,
                    params: TrajectoryParams = TrajectoryParams(max_len=5.0), kernel_size=31) -> ToyCorpus:
    """Render ``n_images`` glyphs and build the unpaired train / paired test split.

    Images [0, n_train/2) are the sharp training set, [n_train/2, n_train) are
    blurred for the blurred training set, the rest form the test set.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    sharp_dir = out / "sharp"
    sharp_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_images):
        rel = f"{i:04d}.png"
        Image.fromarray(glyph_image(rng, size)).save(sharp_dir / rel)
        records.append(ManifestRecord(rel, "sharp"))
    half = n_train // 2
    write_manifest(sharp_dir / "manifest.tsv", records)
    sharp_train = write_manifest(out / "sharp_train.tsv", [replace(r, path=f"sharp/{r.path}") for r in records[:half]])

    params = replace(params, seed=seed)
    build_blurred_set(Manifest(records[half:n_train], sharp_dir), out / "blurred_train", params, kernel_size)
    test = Manifest(records[n_train:], sharp_dir)
    build_blurred_set(test, out / "test_blurred", replace(params, seed=seed + 1), kernel_size)
    test_sharp = out / "test_sharp"
    test_sharp.mkdir(exist_ok=True)
    for r in test.records:
        (test_sharp / r.path).write_bytes((sharp_dir / r.path).read_bytes())
    return ToyCorpus(out, sharp_train, out / "blurred_train" / "manifest.tsv", out / "test_blurred", test_sharp)
