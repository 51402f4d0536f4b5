"""On-disk formats: PGM/PPM images and JSON Lines manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from .errors import DataError


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM (P5)."""
    if image.dtype != np.uint8 or image.ndim != 2:
        raise DataError(f"PGM needs a 2-d uint8 array, got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="L").save(path, format="PPM")


def read_image(path) -> np.ndarray:
    """Read a PGM (P5) or PPM (P6) file; returns HxW or HxWx3 uint8."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    try:
        return [json.loads(l) for l in lines if l.strip()]
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {path}: {e}") from e


@dataclass
class Dataset:
    images: np.ndarray  # N x 48 x 128 uint8
    records: List[dict]

    def __len__(self):
        return len(self.records)

    @property
    def label_kind(self) -> str:
        kinds = {r["label_kind"] for r in self.records}
        if len(kinds) != 1:
            raise DataError(f"mixed label kinds in dataset: {sorted(kinds)}")
        return kinds.pop()

    @property
    def labels(self) -> np.ndarray:
        return np.array([r["label"] for r in self.records], dtype=np.float32)

    def degrees(self):
        """Ground-truth degrees, or None when the set only has binary labels."""
        if any("openness_gt" not in r for r in self.records):
            return None
        return np.array([r["openness_gt"] for r in self.records], dtype=np.float32)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], [self.records[i] for i in idx])


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    records = read_manifest(directory)
    if not records:
        raise DataError(f"empty manifest in {directory}")
    images = np.stack([read_image(directory / r["path"]) for r in records])
    if images.ndim != 3:
        raise DataError(f"{directory}: expected grayscale crops")
    return Dataset(images, records)
