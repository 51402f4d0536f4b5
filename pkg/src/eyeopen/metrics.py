"""Evaluation: degree MSE, tolerance accuracy, open/close accuracy, the
train-source x test-domain matrix, blink-curve analysis and PERCLOS."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import net as N
from .dataset import Dataset
from .errors import ConfigError, DataError, UsageError

NA = "--"

BANDS = ("closed", "near-closed", "tired", "moderately-open", "fully-open")
BAND_EDGES = (10.0, 30.0, 55.0, 80.0)


def degree_mse(preds, gts) -> Optional[float]:
    """Mean squared error; None (rendered "--") when there are no degree labels."""
    if gts is None:
        return None
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.size == 0:
        raise DataError(f"degree_mse needs equal non-empty series, got {preds.shape} / {gts.shape}")
    diff = preds - gts
    mse = float(np.mean(diff ** 2))
    if mse == 0.0 and diff.any():
        # squares of tiny differences underflow; keep "0 means exact" true
        mse = float(np.nextafter(0.0, 1.0))
    return mse


def degree_accuracy(preds, gts, tol: float = 8.0) -> Optional[float]:
    """Fraction of predictions within ``tol`` degree units (inclusive)."""
    if gts is None:
        return None
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.size == 0:
        raise DataError("degree_accuracy needs equal non-empty series")
    return float(np.mean(np.abs(preds - gts) <= tol))


def binary_from_degrees(degrees, ot: float = 15.0) -> np.ndarray:
    """Open/closed ground truth for degree-labelled data: open iff degree > OT."""
    return (np.asarray(degrees) > ot).astype(np.int64)


def open_close_accuracy(raw_o2, binary_gts, ot: float = 15.0) -> float:
    raw = np.asarray(raw_o2, dtype=np.float64).reshape(-1)
    gts = np.asarray(binary_gts).reshape(-1)
    if raw.size == 0:
        raise DataError("open_close_accuracy on an empty set")
    if raw.shape != gts.shape:
        raise DataError("prediction / label length mismatch")
    if ot <= 0:
        raise ConfigError("OT must be positive")
    return float(np.mean((raw > ot) == (gts == 1)))


@dataclass
class EvalReport:
    degree_mse: Optional[float]
    degree_acc_tol8: Optional[float]
    open_close_acc: float
    n_samples: int
    n_degree_labels: int
    n_binary_labels: int
    config: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def evaluate_predictions(raw, dataset: Dataset, ot: float = 15.0, tol: float = 8.0, config=None) -> EvalReport:
    degrees = dataset.degrees()
    if degrees is not None:
        binary = binary_from_degrees(degrees, ot)
        reported = np.maximum(raw, 0.0)
    else:
        binary = dataset.labels.astype(np.int64)
        reported = None
    return EvalReport(
        degree_mse=degree_mse(reported, degrees) if degrees is not None else None,
        degree_acc_tol8=degree_accuracy(reported, degrees, tol) if degrees is not None else None,
        open_close_acc=open_close_accuracy(raw, binary, ot),
        n_samples=len(dataset),
        n_degree_labels=0 if degrees is None else len(degrees),
        n_binary_labels=len(dataset) if degrees is None else 0,
        config=dict(config or {"ot": ot, "tol": tol}),
    )


def evaluate(params: N.NetParams, dataset: Dataset, ot: float = 15.0, tol: float = 8.0) -> EvalReport:
    raw = N.predict(params, dataset.images)
    return evaluate_predictions(raw, dataset, ot, tol)


# ---------------------------------------------------------------------------
# cross-domain matrix
# ---------------------------------------------------------------------------

TRAIN_LABELS = {"syn": "Synthetic", "joint": "Synthetic + Real", "real": "Real"}
TEST_LABELS = {"syn": "Synthetic", "real": "Real"}


@dataclass
class MatrixRow:
    train: str
    test: str
    degree_mse: Optional[float]
    open_close_acc: float


def cross_domain_matrix(checkpoints: Dict[str, N.NetParams], tests: Dict[str, Dataset],
                        modes: Sequence[str] = ("syn", "joint", "real"), ot: float = 15.0) -> List[MatrixRow]:
    """One row per (training source, test domain)."""
    rows = []
    for mode in modes:
        if checkpoints.get(mode) is None:
            raise UsageError(f"missing checkpoint for training mode {mode!r}")
        for test, ds in tests.items():
            rep = evaluate(checkpoints[mode], ds, ot)
            rows.append(MatrixRow(mode, test, rep.degree_mse, rep.open_close_acc))
    return rows


def matrix_json(rows: List[MatrixRow]) -> str:
    return json.dumps([asdict(r) for r in rows], sort_keys=True, indent=1) + "\n"


def matrix_text(rows: List[MatrixRow]) -> str:
    head = ("Training source", "Test", "Degree MSE", "Open/Close acc")
    body = [(TRAIN_LABELS.get(r.train, r.train), TEST_LABELS.get(r.test, r.test),
             NA if r.degree_mse is None else f"{r.degree_mse:.2f}",
             f"{100.0 * r.open_close_acc:.2f}%") for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# eye-state bands and blink curves
# ---------------------------------------------------------------------------

def state_band(degree: float, edges: Sequence[float] = BAND_EDGES) -> str:
    if degree < 0:
        raise UsageError(f"state_band needs a non-negative degree, got {degree}")
    if len(edges) != len(BANDS) - 1 or list(edges) != sorted(edges):
        raise ConfigError("band edges must be 4 increasing thresholds")
    return BANDS[int(np.searchsorted(np.asarray(edges), degree, side="right"))]


def moving_average(x, window: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")


def _direction_runs(x):
    """List of (sign, start, end) runs over consecutive differences; flat steps join the current run."""
    d = np.sign(np.diff(x))
    runs = []
    for i, s in enumerate(d):
        if s == 0:
            continue
        if runs and runs[-1][0] == s:
            runs[-1][2] = i + 1
        else:
            runs.append([s, i, i + 1])
    return runs


def monotone_segments(x) -> int:
    return len(_direction_runs(x))


def local_minima(x) -> List[int]:
    """Indices where a decreasing run turns into an increasing one."""
    runs = _direction_runs(x)
    return [int(b[1]) for a, b in zip(runs, runs[1:]) if a[0] < 0 < b[0]]


@dataclass
class CurveReport:
    frames: List[dict]
    spearman: float
    spearman_defined: bool
    monotone_segments: int
    gt_monotone_segments: int
    pred_minima: List[int]
    gt_minima: List[int]

    def to_dict(self):
        return asdict(self)


def u_curve(pred, gt, window: int = 5, edges: Sequence[float] = BAND_EDGES) -> CurveReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"series length mismatch: {pred.shape} vs {gt.shape}")
    if pred.size < 8:
        raise DataError("curve analysis needs at least 8 frames")
    if np.ptp(pred) == 0 or np.ptp(gt) == 0:
        rho, defined = 0.0, False
    else:
        rho, defined = float(spearmanr(pred, gt).statistic), True
    smooth = moving_average(pred, window)
    offset = (len(pred) - len(smooth)) // 2
    frames = [{"frame": i, "pred": float(p), "gt": float(g), "band": state_band(max(p, 0.0), edges)}
              for i, (p, g) in enumerate(zip(pred, gt))]
    return CurveReport(
        frames=frames,
        spearman=rho,
        spearman_defined=defined,
        monotone_segments=monotone_segments(smooth),
        gt_monotone_segments=monotone_segments(gt),
        pred_minima=[m + offset for m in local_minima(smooth)],
        gt_minima=local_minima(gt),
    )


def write_curve_csv(report: CurveReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "pred", "gt", "band"])
        for f in report.frames:
            w.writerow([f["frame"], f"{f['pred']:.4f}", f"{f['gt']:.4f}", f["band"]])


# ---------------------------------------------------------------------------
# PERCLOS
# ---------------------------------------------------------------------------

def perclos(degrees, window_frames: int, subject_max_degree: float = 100.0) -> float:
    """Share of the last ``window_frames`` frames that are at least 80% closed."""
    d = np.asarray(degrees, dtype=np.float64)
    if subject_max_degree <= 0:
        raise UsageError("subject_max_degree must be positive")
    if not 1 <= window_frames <= len(d):
        raise UsageError(f"window {window_frames} not within series length {len(d)}")
    win = d[-window_frames:]
    return float(np.mean(win <= 0.2 * subject_max_degree))


def perclos_series(degrees, window_frames: int, subject_max_degree: float = 100.0) -> np.ndarray:
    """PERCLOS at every frame once a full window is available."""
    d = np.asarray(degrees, dtype=np.float64)
    if subject_max_degree <= 0:
        raise UsageError("subject_max_degree must be positive")
    closed = (d <= 0.2 * subject_max_degree).astype(np.float64)
    if not 1 <= window_frames <= len(d):
        raise UsageError(f"window {window_frames} not within series length {len(d)}")
    return np.convolve(closed, np.ones(window_frames) / window_frames, mode="valid")
