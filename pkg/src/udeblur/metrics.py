"""PSNR, SSIM, deep-feature distance and character error rate over result/truth sets.

Conventions: PSNR of identical images is capped at 100 dB; SSIM uses an
11 x 11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 on the 0..255
range, evaluated where the window fits inside the image and averaged over
all channels.  Feature distances depend entirely on the extractor; values
from the random stand-in extractor are not comparable to VGG distances.
"""

from __future__ import annotations

import math
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import list_images, read_uint8

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
REPORT_FIELDS = ("path", "psnr", "ssim", "d_feat", "cer")


class MetricError(ValueError):
    pass


class OcrUnavailable(RuntimeError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, data_range=255.0):
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(img, g):
    """Gaussian-weighted mean over every full window position ('valid' region)."""
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:-r, r:-r]


def ssim_map(x, y, data_range=255.0):
    """Local SSIM of two single-channel images over all full window positions."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _local_mean(x, g), _local_mean(y, g)
    sxx = _local_mean(x * x, g) - mx * mx
    syy = _local_mean(y * y, g) - my * my
    sxy = _local_mean(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(x, y, data_range=255.0):
    x, y = _pair(x, y)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    maps = [ssim_map(x[:, :, c], y[:, :, c], data_range) for c in range(x.shape[2])]
    return float(np.mean(maps))


def _to_batch(img):
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img[None]
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32))[None]


@torch.no_grad()
def feature_distance(extractor, x, y):
    """L2 distance between the flattened extractor features of two images."""
    fx = extractor(_to_batch(x)).flatten().double()
    fy = extractor(_to_batch(y)).flatten().double()
    return float(torch.linalg.vector_norm(fx - fy))


def levenshtein(a, b):
    """Edit distance with unit-cost insertions, deletions and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def character_error_rate(recognized, truth):
    if not truth:
        raise MetricError("ground-truth text is empty")
    return levenshtein(recognized, truth) / len(truth)


class CommandOcr:
    """External OCR: ``command ... <image path>`` prints the recognized text."""

    def __init__(self, command):
        self.command = command.split() if isinstance(command, str) else list(command)
        if not self.command or shutil.which(self.command[0]) is None:
            raise OcrUnavailable(f"OCR command not found: {self.command[:1]}")

    def __call__(self, image_path):
        try:
            proc = subprocess.run(
                [*self.command, str(image_path)], capture_output=True, text=True, check=True
            )
        except (OSError, subprocess.CalledProcessError) as exc:
            raise OcrUnavailable(f"OCR command failed: {exc}") from exc
        return proc.stdout.strip()


def cer(ocr, image_path, ground_truth):
    """Character error rate of ``ocr(image_path)``; ``None`` when no OCR is configured."""
    if ocr is None:
        return None
    return character_error_rate(ocr(image_path), ground_truth)


@dataclass
class ImageMetrics:
    path: str
    psnr: float
    ssim: float
    d_feat: float | None = None
    cer: float | None = None


@dataclass
class MetricsReport:
    per_image: list
    unmatched: list = field(default_factory=list)

    def aggregates(self):
        out = {}
        for name in REPORT_FIELDS[1:]:
            vals = [getattr(m, name) for m in self.per_image if getattr(m, name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def render(self):
        """Tab-separated per-image table followed by a ``mean`` row."""
        lines = ["\t".join(REPORT_FIELDS)]
        for m in self.per_image:
            lines.append("\t".join([m.path] + [_fmt(getattr(m, f)) for f in REPORT_FIELDS[1:]]))
        agg = self.aggregates()
        lines.append("\t".join(["mean"] + [_fmt(agg[f]) for f in REPORT_FIELDS[1:]]))
        return "\n".join(lines) + "\n"

    def write(self, path):
        """Machine-readable records: one line per image, fields in REPORT_FIELDS order."""
        lines = ["#" + "\t".join(REPORT_FIELDS)]
        for m in self.per_image:
            lines.append("\t".join([m.path] + [repr(v) if v is not None else "NA"
                                                for v in (m.psnr, m.ssim, m.d_feat, m.cer)]))
        Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v, digits=4):
    return "NA" if v is None else f"{v:.{digits}f}"


def render_summary(rows, columns=("psnr", "ssim", "d_feat")):
    """Method-per-row table (label, aggregates dict)."""
    header = {"psnr": "PSNR", "ssim": "SSIM", "d_feat": "d_feat", "cer": "CER"}
    lines = ["\t".join(["Method"] + [header[c] for c in columns])]
    for label, agg in rows:
        lines.append("\t".join([label] + [_fmt(agg.get(c)) for c in columns]))
    return "\n".join(lines) + "\n"


def match_files(results_dir, truth_dir):
    """Pairs (result, truth) matched by file stem, sorted; plus unmatched names."""
    results = {p.stem: p for p in list_images(results_dir)}
    truths = {p.stem: p for p in list_images(truth_dir)}
    common = sorted(results.keys() & truths.keys())
    unmatched = sorted((results.keys() ^ truths.keys()))
    return [(results[k], truths[k]) for k in common], unmatched


def evaluate(results_dir, truth_dir, preset="generic", extractor=None, ocr=None) -> MetricsReport:
    """Score every result image against the truth image with the same stem.

    CER is computed when ``ocr`` is given and ``<truth_dir>/<stem>.txt`` holds
    the ground-truth text; it is left unset (not zero) otherwise.
    """
    pairs, unmatched = match_files(results_dir, truth_dir)
    if not pairs:
        raise MetricError(f"no matching images between {results_dir} and {truth_dir}")
    rows = []
    for res, tru in pairs:
        x, y = read_uint8(res), read_uint8(tru)
        row = ImageMetrics(res.name, psnr(x, y), ssim(x, y))
        if extractor is not None:
            row.d_feat = feature_distance(extractor, x, y)
        text_file = tru.with_suffix(".txt")
        if ocr is not None and text_file.exists():
            row.cer = cer(ocr, res, text_file.read_text().strip())
        rows.append(row)
    return MetricsReport(rows, unmatched)


def mean_psnr_gain(deblurred, blurred, truth):
    """Mean PSNR(deblurred) - mean PSNR(blurred) over matched uint8 arrays."""
    a = [psnr(d, t) for d, t in zip(deblurred, truth)]
    b = [psnr(x, t) for x, t in zip(blurred, truth)]
    return math.fsum(a) / len(a) - math.fsum(b) / len(b)
