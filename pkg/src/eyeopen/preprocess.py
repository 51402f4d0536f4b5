"""Face image -> 48x128 eye crop: grayscale, two-point similarity alignment
onto a 144x144 canvas, fixed eye window, pixel-range guard."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

FACE_SIZE = 144
CANONICAL_LEFT = (36.0, 56.0)  # (x, y)
CANONICAL_RIGHT = (108.0, 56.0)
CROP_ROWS = (32, 80)
CROP_COLS = (8, 136)
MAX_OUT_OF_RANGE = 0.01


@dataclass(frozen=True)
class Landmarks:
    left: Tuple[float, float]
    right: Tuple[float, float]
    extra: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if tuple(self.left) == tuple(self.right):
            raise DataError("degenerate landmarks: eye corners coincide")


def load_landmarks(path) -> Landmarks:
    try:
        with open(path) as fh:
            d = json.load(fh)
        left = tuple(float(v) for v in d["left"])
        right = tuple(float(v) for v in d["right"])
        extra = tuple(tuple(float(v) for v in p) for p in d.get("extra", ()))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"malformed landmark file {path}: {e}") from e
    if len(left) != 2 or len(right) != 2:
        raise DataError(f"malformed landmark file {path}: points need two coordinates")
    return Landmarks(left, right, extra)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half up, as uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"to_grayscale expects an HxWx3 image, got {image.shape}")
    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    # small epsilon absorbs the binary representation error of the weights
    return np.clip(np.floor(luma + 0.5 + 1e-9), 0, 255).astype(np.uint8)


def similarity_from_corners(lm: Landmarks):
    """2x3 matrix mapping image (x, y) onto the canonical face canvas."""
    src = np.asarray(lm.right, float) - np.asarray(lm.left, float)
    dst = np.asarray(CANONICAL_RIGHT) - np.asarray(CANONICAL_LEFT)
    norm = np.hypot(*src)
    if norm == 0:
        raise DataError("degenerate landmarks: eye corners coincide")
    scale = np.hypot(*dst) / norm
    theta = np.arctan2(dst[1], dst[0]) - np.arctan2(src[1], src[0])
    c, s = scale * np.cos(theta), scale * np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    t = np.asarray(CANONICAL_LEFT) - rot @ np.asarray(lm.left, float)
    return np.hstack([rot, t[:, None]])


def warp_bilinear(image: np.ndarray, inverse: np.ndarray, shape) -> np.ndarray:
    """Sample ``image`` at inverse-mapped output coordinates; outside reads are 0."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    sx = inverse[0, 0] * xx + inverse[0, 1] * yy + inverse[0, 2]
    sy = inverse[1, 0] * xx + inverse[1, 1] * yy + inverse[1, 2]
    # snap values within rounding noise of an integer so exact maps copy pixels
    sx = np.where(np.abs(sx - np.rint(sx)) < 1e-9, np.rint(sx), sx)
    sy = np.where(np.abs(sy - np.rint(sy)) < 1e-9, np.rint(sy), sy)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.zeros(shape)
            vals[ok] = img[yi[ok], xi[ok]]
            out += wy * wx * vals
    return out


def _invert(m):
    a = m[:, :2]
    inv = np.linalg.inv(a)
    return np.hstack([inv, (-inv @ m[:, 2])[:, None]])


def align_face(image: np.ndarray, lm: Landmarks) -> np.ndarray:
    """Warp a grayscale face so the eye corners land on the canonical points."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = to_grayscale(image)
    if image.ndim != 2:
        raise DataError(f"align_face expects a 2-d grayscale image, got {image.shape}")
    m = similarity_from_corners(lm)
    return warp_bilinear(image, _invert(m), (FACE_SIZE, FACE_SIZE))


def crop_eye_region(face: np.ndarray) -> np.ndarray:
    face = np.asarray(face)
    if face.shape != (FACE_SIZE, FACE_SIZE):
        raise DataError(f"crop_eye_region expects a {FACE_SIZE}x{FACE_SIZE} face, got {face.shape}")
    return face[CROP_ROWS[0]:CROP_ROWS[1], CROP_COLS[0]:CROP_COLS[1]].copy()


def assert_pixel_range(crop: np.ndarray):
    """Clamp to [0, 255]; returns (crop, clamped_count).

    More than 1% out-of-range pixels usually means a format bug, so that raises.
    """
    crop = np.asarray(crop, dtype=np.float64)
    bad = (crop < 0) | (crop > 255) | ~np.isfinite(crop)
    n_bad = int(bad.sum())
    if n_bad > MAX_OUT_OF_RANGE * crop.size:
        raise DataError(f"{n_bad} of {crop.size} pixels outside [0, 255]")
    if n_bad:
        log.warning("clamped %d pixel(s) into [0, 255]", n_bad)
    return np.clip(np.nan_to_num(crop, nan=0.0), 0.0, 255.0), n_bad


def preprocess_face(image: np.ndarray, lm: Landmarks) -> np.ndarray:
    """Full pipeline; always returns a 48x128 float array in [0, 255]."""
    face = align_face(image, lm)
    crop, _ = assert_pixel_range(crop_eye_region(face))
    return crop
