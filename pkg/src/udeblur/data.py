"""Image decoding/encoding and the line-oriented dataset manifest."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLIT_TAGS = ("sharp", "blurred")


class ManifestError(ValueError):
    pass


def load_image(path, channels=None):
    """Decode an 8-bit PNG/JPEG into an H x W x C float array in [-1, 1]."""
    with Image.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3 or im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr / 127.5 - 1.0


def to_uint8(img):
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(path, img):
    """Encode a [-1, 1] H x W x C array as an 8-bit image (format from suffix)."""
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_uint8(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr if arr.ndim == 3 else arr[:, :, None]


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    split: str
    seed: int | None = None
    checksum: str | None = None

    def to_line(self):
        seed = "-" if self.seed is None else str(self.seed)
        return "\t".join([self.path, self.split, seed, self.checksum or "-"])


@dataclass
class Manifest:
    """Records plus the directory their relative paths resolve against."""

    records: list
    root: Path
    skipped: list = None

    def __post_init__(self):
        self.root = Path(self.root)
        if self.skipped is None:
            self.skipped = []

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        return self.root / record.path

    def paths(self):
        return [self.resolve(r) for r in self.records]


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records, skipped = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if parts[0] == "skipped" and len(parts) >= 2:
                skipped.append((parts[1], parts[2] if len(parts) > 2 else ""))
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rel, split, seed, checksum = parts
        if split not in SPLIT_TAGS:
            raise ManifestError(f"{path}:{lineno}: unknown split tag {split!r}")
        records.append(
            ManifestRecord(
                rel,
                split,
                None if seed == "-" else int(seed),
                None if checksum == "-" else checksum,
            )
        )
    return Manifest(records, path.parent, skipped)


def write_manifest(path, records, skipped=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.to_line() for r in records]
    lines += [f"# skipped\t{p}\t{reason}" for p, reason in skipped]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def scan_directory(directory, split="sharp"):
    """Manifest over every image file below `directory`, sorted by path."""
    directory = Path(directory)
    rels = sorted(
        p.relative_to(directory).as_posix()
        for p in directory.rglob("*")
        if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    return Manifest([ManifestRecord(r, split) for r in rels], directory)


def list_images(path):
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def default_output_root():
    return Path(os.environ.get("UDEBLUR_OUTPUT_ROOT", "runs"))
