"""Random camera-shake motion blur.

A trajectory is a discrete Markov walk of the camera position; the kernel
is the time spent at each sub-pixel position, deposited bilinearly onto a
K x K canvas.  Kernels are applied as per-channel convolutions with
reflect padding.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .data import (
    Manifest,
    ManifestRecord,
    load_image,
    save_image,
    write_manifest,
)

log = logging.getLogger(__name__)

DEFAULT_KERNEL_SIZE = 31


class BlurParameterError(ValueError):
    pass


class BlurSetError(RuntimeError):
    """Raised when no image of a non-empty manifest could be blurred."""


@dataclass(frozen=True)
class TrajectoryParams:
    num_steps: int = 2000
    max_len: float = 10.0
    p_impulsive: float = 0.005
    gaussian_shake_range: tuple = (0.5, 1.0)
    seed: int = 0
    impulse_factor: float = 20.0
    init_speed: float = 1.0

    def validate(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise BlurParameterError(f"num_steps must be a positive integer, got {self.num_steps}")
        if not self.max_len > 0:
            raise BlurParameterError(f"max_len must be positive, got {self.max_len}")
        if not 0.0 <= self.p_impulsive <= 1.0:
            raise BlurParameterError(f"p_impulsive must lie in [0, 1], got {self.p_impulsive}")
        lo, hi = self.gaussian_shake_range
        if lo < 0 or hi < lo:
            raise BlurParameterError(f"bad gaussian_shake_range {self.gaussian_shake_range}")
        if self.init_speed < 0 or self.impulse_factor < 0:
            raise BlurParameterError("init_speed and impulse_factor must be nonnegative")
        return self


@dataclass
class Trajectory:
    """Camera positions (x, y) in pixels, relative to the first point."""

    points: np.ndarray
    params: TrajectoryParams
    impulses: np.ndarray = None

    def extent(self):
        """Per-axis extent (x, y) of the trajectory."""
        return np.ptp(self.points, axis=0)


@dataclass
class BlurKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise BlurParameterError(f"kernel must be odd-sized square, got shape {w.shape}")
        if (w < 0).any():
            raise BlurParameterError("kernel weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise BlurParameterError(f"kernel must sum to 1, sums to {w.sum()!r}")
        self.weights = w

    @property
    def size(self):
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size=3):
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    def checksum(self):
        return hashlib.sha256(self.weights.astype("<f8").tobytes()).hexdigest()[:16]


def generate_trajectory(params: TrajectoryParams) -> Trajectory:
    """Sample a camera-shake trajectory.

    The velocity follows ``v[t] = g * (v[t-1] + eps[t])`` with ``g`` drawn once
    from ``gaussian_shake_range`` and ``eps`` standard normal; with probability
    ``p_impulsive`` a step's velocity is multiplied by ``impulse_factor``.  The
    result is shrunk so that neither axis extends past ``max_len``.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = int(params.num_steps)
    lo, hi = params.gaussian_shake_range
    g = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    v_prev = params.init_speed * np.array([np.cos(theta), np.sin(theta)])
    eps = rng.standard_normal((n - 1, 2))
    impulses = rng.random(n - 1) < params.p_impulsive

    # Between impulses the recursion is linear; run it with lfilter per segment.
    vel = np.empty((n - 1, 2))
    starts = np.flatnonzero(impulses).tolist()
    bounds = sorted(set([0] + starts)) + [n - 1]
    for a, b in zip(bounds[:-1], bounds[1:]):
        if a >= b:
            continue
        va = g * (v_prev + eps[a])
        if impulses[a]:
            va = va * params.impulse_factor
        vel[a] = va
        if b > a + 1:
            vel[a + 1 : b], _ = signal.lfilter(
                [1.0], [1.0, -g], g * eps[a + 1 : b], axis=0, zi=(g * va)[None, :]
            )
        v_prev = vel[b - 1]

    points = np.zeros((n, 2))
    points[1:] = np.cumsum(vel, axis=0)
    extent = np.ptp(points, axis=0).max()
    if extent > params.max_len:
        points *= params.max_len / extent
    return Trajectory(points, params, impulses)


def deposit_trajectory(traj: Trajectory, size: int, centered: bool = True) -> np.ndarray:
    """Unnormalized kernel: every point splits unit mass over its 4 neighbours.

    Point (0, 0) maps to the canvas centre; with ``centered`` the trajectory is
    first shifted so that its centroid sits there.
    """
    if int(size) != size or size < 3 or size % 2 == 0:
        raise BlurParameterError(f"kernel size must be an odd integer >= 3, got {size}")
    pts = np.asarray(traj.points, dtype=np.float64)
    if centered:
        pts = pts - pts.mean(axis=0)
    c = (size - 1) / 2.0
    col = pts[:, 0] + c
    row = pts[:, 1] + c
    r0 = np.floor(row).astype(int)
    c0 = np.floor(col).astype(int)
    fr = row - r0
    fc = col - c0
    canvas = np.zeros((size + 1, size + 1))
    if r0.min() < 0 or c0.min() < 0 or r0.max() > size - 1 or c0.max() > size - 1:
        raise BlurParameterError(
            f"trajectory extent {traj.extent()} does not fit a {size}x{size} kernel canvas"
        )
    np.add.at(canvas, (r0, c0), (1 - fr) * (1 - fc))
    np.add.at(canvas, (r0, c0 + 1), (1 - fr) * fc)
    np.add.at(canvas, (r0 + 1, c0), fr * (1 - fc))
    np.add.at(canvas, (r0 + 1, c0 + 1), fr * fc)
    if canvas[size, :].any() or canvas[:, size].any():
        raise BlurParameterError(
            f"trajectory extent {traj.extent()} does not fit a {size}x{size} kernel canvas"
        )
    return canvas[:size, :size]


def rasterize_kernel(traj: Trajectory, size: int = DEFAULT_KERNEL_SIZE, centered: bool = True) -> BlurKernel:
    mass = deposit_trajectory(traj, size, centered=centered)
    return BlurKernel(mass / mass.sum())


def apply_blur(img, k: BlurKernel):
    """Convolve every channel of an H x W (x C) image with ``k``; reflect borders."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if k.size > h or k.size > w:
        raise BlurParameterError(f"kernel of size {k.size} is larger than the {h}x{w} image")
    if img.ndim == 2:
        out = ndimage.convolve(img, k.weights, mode="mirror")
    else:
        out = np.stack(
            [ndimage.convolve(img[:, :, c], k.weights, mode="mirror") for c in range(img.shape[2])],
            axis=2,
        )
    return np.clip(out, -1.0, 1.0)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-image seed; a pure function of (master seed, image index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def sample_kernel(params: TrajectoryParams, size: int = DEFAULT_KERNEL_SIZE) -> BlurKernel:
    return rasterize_kernel(generate_trajectory(params), size)


def _blur_one(args):
    index, src, rel, params, out_dir, size = args
    seed = derive_seed(params.seed, index)
    try:
        img = load_image(src)
    except (OSError, ValueError) as exc:
        return None, (rel, f"unreadable: {exc}")
    kernel = sample_kernel(replace(params, seed=seed), size)
    try:
        blurred = apply_blur(img, kernel)
    except BlurParameterError as exc:
        return None, (rel, str(exc))
    out_rel = Path(rel).with_suffix(".png").as_posix()
    save_image(Path(out_dir) / out_rel, blurred)
    return ManifestRecord(out_rel, "blurred", seed, kernel.checksum()), None


def build_blurred_set(
    manifest_in: Manifest,
    out_dir,
    params: TrajectoryParams = TrajectoryParams(),
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    workers: int = 1,
) -> Manifest:
    """Blur every image of ``manifest_in`` with its own freshly sampled kernel.

    ``params.seed`` is the master seed.  Writes PNGs under ``out_dir`` plus
    ``out_dir/manifest.tsv``; unreadable inputs are listed as skipped.
    """
    params.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (i, manifest_in.resolve(rec), rec.path, params, out_dir, kernel_size)
        for i, rec in enumerate(manifest_in.records)
    ]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(_blur_one, jobs))
    else:
        results = [_blur_one(j) for j in jobs]
    records = [r for r, _ in results if r is not None]
    skipped = [s for _, s in results if s is not None]
    for rel, reason in skipped:
        log.warning("skipping %s (%s)", rel, reason)
    write_manifest(out_dir / "manifest.tsv", records, skipped)
    if jobs and not records:
        raise BlurSetError(f"none of the {len(jobs)} images could be blurred")
    return Manifest(records, out_dir, skipped)
