"""Procedural two-eye crop renderer and dataset sampler.

Each crop is 48x128 grayscale with two lens-shaped palpebral apertures.
The aperture half-height is linear in openness, the iris disk follows the
gaze, and the camera pitch/yaw becomes an affine warp of the whole crop.
A :class:`DomainStyle` applies the appearance shift (contrast, gamma,
glare, glasses, blur, noise) that separates the "syn" and "real" domains.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, ConfigError

HEIGHT, WIDTH = 48, 128
EYE_CENTERS = ((34.0, 25.0), (94.0, 25.0))  # (x, y) in the canonical crop

OPENNESS_STATES = tuple(range(0, 101, 10))
VERTICAL_GAZE = tuple(range(-25, 26, 5))
HORIZONTAL_GAZE = tuple(float(v) for v in np.linspace(-35.0, 35.0, 18))
CAMERA_ANGLES = tuple(range(-30, 31, 10))

SYN_SUBJECTS = tuple(range(13))
REAL_SUBJECTS = tuple(range(100, 116))

REAL_MIN_OPEN = 30.0
LOWER_LID_RATIO = 0.75


@dataclass(frozen=True)
class SceneParams:
    openness: float
    gaze: Tuple[float, float] = (0.0, 0.0)  # (vertical, horizontal) degrees
    camera: Tuple[float, float] = (0.0, 0.0)  # (pitch, yaw) degrees
    subject_id: int = 0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.openness <= 100.0:
            raise DataError(f"openness {self.openness} outside [0, 100]")
        v, h = self.gaze
        if abs(v) > 25 or abs(h) > 35:
            raise DataError(f"gaze {self.gaze} outside +-25 vertical / +-35 horizontal")
        if any(abs(a) > 30 for a in self.camera):
            raise DataError(f"camera {self.camera} outside +-30 degrees")


@dataclass(frozen=True)
class DomainStyle:
    name: str
    skin_range: Tuple[float, float]
    noise_sigma: float
    blur_sigma: float
    gamma: float
    glare_prob: float
    glasses_prob: float
    sclera_level: float  # absolute gray level of the visible sclera
    iris_level: float
    pupil_level: float
    lash_level: float  # lash line gray level as a fraction of skin

    def __post_init__(self):
        for p in (self.glare_prob, self.glasses_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"style {self.name}: probabilities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.gamma <= 0:
            raise ConfigError(f"style {self.name}: sigma/blur must be >= 0 and gamma > 0")


# Clean rendering: bright sclera, dark iris, mild lighting.
SYN_STYLE = DomainStyle("syn", skin_range=(135.0, 175.0), noise_sigma=1.5, blur_sigma=0.4,
                        gamma=1.0, glare_prob=0.0, glasses_prob=0.0,
                        sclera_level=235.0, iris_level=85.0, pupil_level=25.0, lash_level=0.45)
# Real-sensor look: brighter skin, gamma lift, blur, sensor noise, glare and
# glasses, lighter iris. The aperture keeps the synthetic polarity.
REAL_STYLE = DomainStyle("real", skin_range=(150.0, 215.0), noise_sigma=5.0, blur_sigma=0.9,
                         gamma=0.75, glare_prob=0.35, glasses_prob=0.3,
                         sclera_level=230.0, iris_level=95.0, pupil_level=30.0, lash_level=0.6)
STYLES = {"syn": SYN_STYLE, "real": REAL_STYLE}


@dataclass(frozen=True)
class Subject:
    half_width: float
    max_half_height: float
    iris_radius: float
    skin_offset: float
    brow_gap: float


@lru_cache(maxsize=None)
def subject(subject_id: int) -> Subject:
    rng = np.random.default_rng([7919, int(subject_id)])
    return Subject(
        half_width=float(rng.uniform(17.0, 21.0)),
        # >= 11.6 keeps one 10% step >= 1 px of aperture height at 30 deg pitch
        max_half_height=float(rng.uniform(11.6, 13.5)),
        iris_radius=float(rng.uniform(7.0, 8.5)),
        skin_offset=float(rng.uniform(-12.0, 12.0)),
        brow_gap=float(rng.uniform(4.0, 7.0)),
    )


@dataclass
class RenderOutput:
    image: np.ndarray  # uint8, HEIGHT x WIDTH
    aperture_area: Tuple[int, int]
    degree: float
    params: SceneParams
    style: str

    @property
    def total_area(self) -> int:
        return int(sum(self.aperture_area))


def _affine(camera):
    """Canonical -> image affine for a camera (pitch, yaw) as (A, t)."""
    pitch, yaw = np.radians(camera[0]), np.radians(camera[1])
    a = np.array([[np.cos(yaw), 0.25 * np.sin(yaw) * np.sin(pitch)],
                  [0.0, np.cos(pitch)]])
    t = np.array([8.0 * np.sin(yaw), 5.0 * np.sin(pitch)])
    return a, t


def _canonical_grid(camera):
    """Canonical (x, y) for every output pixel centre."""
    a, t = _affine(camera)
    c = np.array([WIDTH / 2.0, HEIGHT / 2.0])
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
    px = xx + 0.5 - c[0] - t[0]
    py = yy + 0.5 - c[1] - t[1]
    inv = np.linalg.inv(a)
    cx = inv[0, 0] * px + inv[0, 1] * py + c[0]
    cy = inv[1, 0] * px + inv[1, 1] * py + c[1]
    return cx, cy


def _eye_geometry(p: SceneParams, subj: Subject, cx, cy, eye):
    ex, ey = EYE_CENTERS[eye]
    u = (cx - ex) / subj.half_width
    dy = cy - ey
    h = subj.max_half_height * p.openness / 100.0
    shape = np.clip(1.0 - u * u, 0.0, None)
    upper = -h * shape
    lower = LOWER_LID_RATIO * h * shape
    inside = (np.abs(u) < 1.0) & (dy > upper) & (dy < lower)
    return u, dy, upper, inside


def aperture_masks(p: SceneParams):
    """Boolean masks of the visible fissure for both eyes, in image space."""
    subj = subject(p.subject_id)
    cx, cy = _canonical_grid(p.camera)
    return [_eye_geometry(p, subj, cx, cy, e)[3] for e in (0, 1)]


@lru_cache(maxsize=None)
def subject_max_area(subject_id: int) -> Tuple[int, int]:
    """Aperture area of a fully open eye with neutral gaze and camera."""
    masks = aperture_masks(SceneParams(100.0, subject_id=subject_id))
    return tuple(int(m.sum()) for m in masks)


def render_eye_crop(p: SceneParams, style: DomainStyle = SYN_STYLE,
                    noise_seed: Optional[int] = None) -> RenderOutput:
    """Render one crop. ``p.seed`` fixes the appearance (skin, glasses, glare);
    ``noise_seed``, when given, draws the sensor noise separately so a clip can
    keep one appearance while the noise changes frame to frame."""
    p.validate()
    subj = subject(p.subject_id)
    rng = np.random.default_rng(p.seed)
    cx, cy = _canonical_grid(p.camera)

    skin = rng.uniform(*style.skin_range) + subj.skin_offset
    # soft vertical lighting falloff
    img = skin * (1.0 - 0.10 * ((cy - 24.0) / 24.0) ** 2 - 0.04 * ((cx - 64.0) / 64.0) ** 2)

    v_gaze, h_gaze = p.gaze
    areas = []
    for eye in (0, 1):
        ex, ey = EYE_CENTERS[eye]
        u, dy, upper, inside = _eye_geometry(p, subj, cx, cy, eye)
        # socket shading and brow, independent of openness
        socket = (u ** 2 + (dy / (1.7 * subj.max_half_height)) ** 2)
        img = img * (1.0 - 0.12 * np.exp(-2.0 * socket))
        brow_y = -(subj.max_half_height + subj.brow_gap)
        brow = (np.abs(u) < 1.15) & (np.abs(dy - brow_y * (1.0 - 0.3 * u * u)) < 1.8)
        img = np.where(brow, img * 0.55, img)

        ix = ex + 0.45 * subj.half_width * h_gaze / 35.0
        iy = ey + 0.35 * subj.max_half_height * v_gaze / 25.0
        r2 = (cx - ix) ** 2 + (cy - iy) ** 2
        eye_val = np.where(r2 < subj.iris_radius ** 2, style.iris_level, style.sclera_level)
        eye_val = np.where(r2 < (0.42 * subj.iris_radius) ** 2, style.pupil_level, eye_val)
        img = np.where(inside, eye_val, img)

        # lash line along the upper lid margin; a single dark line when closed
        lash = (np.abs(u) < 1.0) & (np.abs(dy - upper) < 1.0) & ~inside
        img = np.where(lash, skin * style.lash_level, img)
        areas.append(int(inside.sum()))

    if rng.random() < style.glasses_prob:
        img = _glasses(img, cx, cy, subj, rng)
    if rng.random() < style.glare_prob:
        gy, gx = rng.uniform(4, HEIGHT - 4), rng.uniform(8, WIDTH - 8)
        rad = rng.uniform(3.0, 8.0)
        yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
        img = img + rng.uniform(50.0, 110.0) * np.exp(-((yy - gy) ** 2 + (xx - gx) ** 2) / (2 * rad ** 2))

    img = np.clip(img, 0.0, 255.0)
    if style.gamma != 1.0:
        img = 255.0 * (img / 255.0) ** style.gamma
    if style.blur_sigma > 0:
        img = gaussian_filter(img, style.blur_sigma, mode="nearest")
    if style.noise_sigma > 0:
        noise_rng = rng if noise_seed is None else np.random.default_rng(noise_seed)
        img = img + noise_rng.normal(0.0, style.noise_sigma, img.shape)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RenderOutput(out, (areas[0], areas[1]), float(p.openness), p, style.name)


def _glasses(img, cx, cy, subj, rng):
    level = rng.choice([35.0, 230.0])
    for ex, ey in EYE_CENTERS:
        d = np.maximum(np.abs(cx - ex) / (1.45 * subj.half_width),
                       np.abs(cy - ey) / (1.9 * subj.max_half_height))
        ring = np.abs(d - 1.0) < 0.05
        img = np.where(ring, level, img)
    bridge = (np.abs(cy - (EYE_CENTERS[0][1] - 4.0)) < 1.2) & (cx > 34 + 1.45 * subj.half_width) & \
             (cx < 94 - 1.45 * subj.half_width)
    return np.where(bridge, level, img)


# ---------------------------------------------------------------------------
# labels and sampling
# ---------------------------------------------------------------------------

def derive_binary_label(degree: float) -> int:
    """0 (closed) iff degree == 0; degrees in (0, 30) are refused for the real domain."""
    if 0.0 < degree < REAL_MIN_OPEN:
        raise DataError(f"degree {degree} in (0, {REAL_MIN_OPEN}) is ambiguous for binary labelling")
    return 0 if degree == 0 else 1


def sample_seed(dataset_seed: int, index: int, salt: int = 0) -> int:
    """Per-sample 64-bit seed; depends only on (dataset_seed, index, salt)."""
    ss = np.random.SeedSequence([int(dataset_seed) & 0xFFFFFFFF, int(index), int(salt)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


DOMAIN_SALT = {"syn": 1, "real": 2, "realprime": 3}
REAL_STATES = (0,) + tuple(range(30, 101, 10))


@dataclass(frozen=True)
class GridSpec:
    stratified: bool = True
    real_jitter: float = 5.0  # +- spread around the real-domain openness states
    camera_max: float = 30.0
    syn_subjects: Tuple[int, ...] = SYN_SUBJECTS
    real_subjects: Tuple[int, ...] = REAL_SUBJECTS


def draw_scene(domain: str, index: int, dataset_seed: int, grid: GridSpec = GridSpec()) -> SceneParams:
    if domain not in DOMAIN_SALT:
        raise ConfigError(f"unknown domain {domain!r}")
    seed = sample_seed(dataset_seed, index, DOMAIN_SALT[domain])
    rng = np.random.default_rng(seed)
    if domain == "syn":
        states = OPENNESS_STATES
        k = index % len(states) if grid.stratified else int(rng.integers(len(states)))
        openness = float(states[k])
        subj = grid.syn_subjects[int(rng.integers(len(grid.syn_subjects)))]
    else:
        if domain == "real":
            states = REAL_STATES
            k = index % len(states) if grid.stratified else int(rng.integers(len(states)))
            openness = float(states[k])
            if openness > 0:
                openness = float(np.clip(openness + rng.uniform(-grid.real_jitter, grid.real_jitter),
                                         REAL_MIN_OPEN, 100.0))
        else:
            # degree-labelled real data covers the whole range
            openness = float(rng.uniform(0.0, 100.0)) if rng.random() > 1 / 11 else 0.0
        subj = grid.real_subjects[int(rng.integers(len(grid.real_subjects)))]
    gaze = (float(VERTICAL_GAZE[int(rng.integers(len(VERTICAL_GAZE)))]),
            float(HORIZONTAL_GAZE[int(rng.integers(len(HORIZONTAL_GAZE)))]))
    cams = [c for c in CAMERA_ANGLES if abs(c) <= grid.camera_max]
    camera = (float(cams[int(rng.integers(len(cams)))]), float(cams[int(rng.integers(len(cams)))]))
    return SceneParams(openness, gaze, camera, subj, sample_seed(seed, 0, 99))


def make_record(domain, index, out: RenderOutput, relpath) -> dict:
    p = out.params
    rec = {"path": relpath, "domain": "syn" if domain == "syn" else "real"}
    if domain == "real":
        rec.update(label_kind="binary", label=derive_binary_label(p.openness))
    else:
        rec.update(label_kind="degree", label=p.openness, openness_gt=p.openness)
    rec.update(subject=p.subject_id, gaze=list(p.gaze), camera=list(p.camera), seed=p.seed)
    return rec


def render_sample(domain: str, index: int, dataset_seed: int, grid: GridSpec = GridSpec(),
                  styles=None) -> RenderOutput:
    styles = styles or STYLES
    p = draw_scene(domain, index, dataset_seed, grid)
    return render_eye_crop(p, styles["syn" if domain == "syn" else "real"])


def sample_dataset(domain: str, count: int, out_dir, dataset_seed: int = 0,
                   grid: GridSpec = GridSpec(), workers: int = 1):
    """Render ``count`` samples to ``out_dir`` as PGM files plus manifest.jsonl.

    Returns the manifest records. Output is independent of ``workers``.
    """
    from .dataset import write_manifest, write_pgm

    if count < 1:
        raise ConfigError("count must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def one(i):
        r = render_sample(domain, i, dataset_seed, grid)
        rel = f"images/{i:06d}.pgm"
        write_pgm(out_dir / rel, r.image)
        return make_record(domain, i, r, rel)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(one, range(count)))
    else:
        records = [one(i) for i in range(count)]
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def render_arrays(domain: str, count: int, dataset_seed: int = 0, grid: GridSpec = GridSpec(),
                  start: int = 0):
    """In-memory variant of :func:`sample_dataset`: (images, records)."""
    imgs = np.zeros((count, HEIGHT, WIDTH), dtype=np.uint8)
    recs = []
    for k in range(count):
        r = render_sample(domain, start + k, dataset_seed, grid)
        imgs[k] = r.image
        recs.append(make_record(domain, start + k, r, None))
    return imgs, recs


# ---------------------------------------------------------------------------
# blink sequences
# ---------------------------------------------------------------------------

PATTERNS = {"close-open": 1, "close-open-close-open": 2}


def blink_trajectory(pattern: str, frames: int) -> np.ndarray:
    """Piecewise-linear 100 -> 0 -> 100 (per close-open pair), evenly sampled.

    The frame nearest each turning point is snapped onto it so every minimum
    is exactly 0 and every maximum exactly 100.
    """
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown blink pattern {pattern!r}")
    if frames < 5:
        raise ConfigError("need at least 5 frames")
    segments = 2 * PATTERNS[pattern]
    t = np.linspace(0.0, float(segments), frames)
    phase = t % 2.0
    deg = 100.0 * np.abs(1.0 - phase)
    for k in range(segments + 1):
        i = int(np.argmin(np.abs(t - k)))
        deg[i] = 0.0 if k % 2 else 100.0
    return deg


def render_blink_sequence(subject_id: int, pattern: str = "close-open-close-open", frames: int = 100,
                          style: DomainStyle = REAL_STYLE, gaze=(0.0, 0.0), camera=(0.0, 0.0),
                          seed: int = 0) -> List[RenderOutput]:
    """Slow blink clip: openness and sensor noise vary from frame to frame,
    everything else about the scene stays fixed."""
    if frames < 8 and not (pattern == "close-open" and frames >= 5):
        raise ConfigError("blink sequences need at least 8 frames")
    degrees = blink_trajectory(pattern, frames)
    out = []
    for i, d in enumerate(degrees):
        p = SceneParams(float(d), tuple(gaze), tuple(camera), subject_id, sample_seed(seed, 0, 7))
        out.append(render_eye_crop(p, style, noise_seed=sample_seed(seed, i, 8)))
    return out


def blink_records(seq: Sequence[RenderOutput], relpaths) -> List[dict]:
    recs = []
    for i, (r, rel) in enumerate(zip(seq, relpaths)):
        p = r.params
        recs.append({"path": rel, "domain": r.style, "label_kind": "degree", "label": p.openness,
                     "subject": p.subject_id, "openness_gt": p.openness, "gaze": list(p.gaze),
                     "camera": list(p.camera), "seed": p.seed, "frame_index": i})
    return recs


def openness_histogram(degrees, centers: Sequence[float] = REAL_STATES, half_width: float = 5.0) -> np.ndarray:
    """Share of samples per openness bin [c - hw, c + hw), restricted to the bins.

    With the default centres these are the states both domains can produce,
    so a synthetic and a pseudo-real set can be compared bin by bin.
    """
    d = np.asarray(degrees, dtype=np.float64)
    counts = np.array([np.sum((d >= c - half_width) & (d < c + half_width) if c < 100
                              else (d >= c - half_width) & (d <= c + half_width)) for c in centers], float)
    total = counts.sum()
    return counts / total if total else counts
