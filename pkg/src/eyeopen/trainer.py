"""Mixed-domain batching, the joint training loop, fine-tuning and gradient checks."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import net as N
from . import tensor as T
from .dataset import Dataset
from .errors import ConfigError, DataError, NumericError, OracleError, TrainingError
from .losses import LossWeights, combined_loss, loss1_mse, loss2_binary, loss3_distribution
from .scene import sample_seed

log = logging.getLogger(__name__)

MODES = ("joint", "syn_only", "real_only", "finetune")
MODE_ALIASES = {"syn": "syn_only", "real": "real_only"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 80
    batch_size: int = 256
    real_fraction: float = 0.25
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    ot: float = 15.0
    seed: int = 0
    mode: str = "joint"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: bool = False
    decay_epoch: int = 60
    decay_factor: float = 0.1
    net: str = "default"
    finetune_syn_fraction: float = 0.0
    finetune_split: float = 0.75

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.real_fraction < 1.0:
            raise ConfigError("real_fraction must lie in [0, 1)")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.net not in N.PRESETS:
            raise ConfigError(f"unknown net preset {self.net!r}")
        if not 0.0 <= self.finetune_syn_fraction < 1.0:
            raise ConfigError("finetune_syn_fraction must lie in [0, 1)")
        self.weights  # validates lambdas and OT

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.ot)

    @property
    def real_per_batch(self) -> int:
        return int(np.floor(self.real_fraction * self.batch_size))

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay and epoch >= self.decay_epoch:
            return self.lr * self.decay_factor
        return self.lr

    def to_dict(self):
        return asdict(self)


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(name, value, typ):
    if typ in ("bool", bool):
        if isinstance(value, bool):
            return value
        v = str(value).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {value!r}")
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e
    return str(value)


def make_config(file_values: Optional[Dict[str, str]] = None, **overrides) -> TrainConfig:
    """Build a TrainConfig from config-file values, then keyword overrides."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    merged = {}
    for src in (file_values or {}), {k: v for k, v in overrides.items() if v is not None}:
        for k, v in src.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, types[k])
    return TrainConfig(**merged)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    syn: np.ndarray  # indices into the synthetic (degree-labelled) pool
    real: np.ndarray  # indices into the real (binary-labelled) pool


def _perm(n, *key):
    return np.random.default_rng(list(key)).permutation(n)


def _cycled(n, count, *key):
    """``count`` indices drawn by concatenating fresh permutations of range(n)."""
    parts, got, k = [], 0, 0
    while got < count:
        p = _perm(n, *key, k)
        parts.append(p)
        got += n
        k += 1
    return np.concatenate(parts)[:count] if parts else np.zeros(0, dtype=np.int64)


def make_mixed_batches(n_syn: int, n_real: int, cfg: TrainConfig, epoch: int) -> List[Batch]:
    """Batch index plan for one epoch; the final partial batch is dropped."""
    mode = cfg.mode
    b = cfg.batch_size
    empty = np.zeros(0, dtype=np.int64)
    if mode == "real_only":
        if n_real < 1:
            raise ConfigError("real_only mode needs a non-empty real pool")
        order = _perm(n_real, cfg.seed, epoch, 2)
        return [Batch(empty, order[i * b:(i + 1) * b]) for i in range(n_real // b)]
    if n_syn < 1:
        raise ConfigError("a degree-labelled pool is required")
    if mode in ("syn_only",) or (mode == "finetune" and n_real == 0):
        order = _perm(n_syn, cfg.seed, epoch, 1)
        return [Batch(order[i * b:(i + 1) * b], empty) for i in range(n_syn // b)]
    if n_real < 1:
        raise ConfigError(f"{mode} mode needs a non-empty real pool")
    frac = cfg.real_fraction if mode == "joint" else cfg.finetune_syn_fraction
    r = int(np.floor(frac * b))
    s = b - r
    order = _perm(n_syn, cfg.seed, epoch, 1)
    nb = n_syn // s
    real = _cycled(n_real, nb * r, cfg.seed, epoch, 2)
    return [Batch(order[i * s:(i + 1) * s], real[i * r:(i + 1) * r]) for i in range(nb)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss1: float
    loss2: float
    loss3: float
    total: float
    wall_ms: float


def _require(ds: Optional[Dataset], kind: str, role: str):
    if ds is None or len(ds) == 0:
        raise ConfigError(f"{role} dataset is required for this mode")
    if ds.label_kind != kind:
        raise DataError(f"{role} dataset must carry {kind} labels, found {ds.label_kind}")


def _batch_step(params: N.NetParams, syn_x, syn_y, real_x, real_y, w: LossWeights):
    ns = len(syn_x)
    x = np.concatenate([syn_x, real_x]) if ns and len(real_x) else (syn_x if ns else real_x)
    o1, o2, cache = N.forward(params, x[:, None])
    res = combined_loss(o1[:ns], o2[:ns], syn_y, o1[ns:], o2[ns:], real_y, w)
    if not np.isfinite(res.total):
        raise NumericError("non-finite loss")
    d_o1 = np.concatenate([res.d_o1_s, res.d_o1_r]).astype(o1.dtype, copy=False)
    d_o2 = np.concatenate([res.d_o2_s, res.d_o2_r]).astype(o2.dtype, copy=False)
    grads = N.backward(params, cache, d_o1, d_o2)
    return res, grads


def train(params: N.NetParams, syn: Optional[Dataset], real: Optional[Dataset], cfg: TrainConfig,
          log_path=None, adam_state: Optional[T.AdamState] = None, progress=None):
    """Train a copy of ``params``; returns (params, [EpochLog]).

    ``syn`` is the degree-labelled pool (synthetic, or Real' when fine-tuning)
    and ``real`` the binary-labelled pool (or extra synthetic when fine-tuning).
    """
    mode = cfg.mode
    if mode in ("joint", "syn_only", "finetune"):
        _require(syn, "degree", "degree-labelled")
    if mode in ("joint", "real_only"):
        _require(real, "binary", "binary-labelled real")
    if mode == "syn_only" or (mode == "finetune" and cfg.finetune_syn_fraction == 0):
        real = None
    if mode == "real_only":
        syn = None

    params = params.copy()
    state = adam_state or T.AdamState.for_params(params.tensors)
    w = cfg.weights
    syn_x = syn.images if syn is not None else None
    syn_y = syn.labels if syn is not None else None
    real_x = real.images if real is not None else None
    real_y = real.labels if real is not None else None
    if mode == "finetune" and real is not None:
        # extra synthetic samples keep degree labels, so they feed Loss1 as well
        _require(real, "degree", "synthetic")
    ns = len(syn_x) if syn_x is not None else 0
    nr = len(real_x) if real_x is not None else 0
    empty_x = np.zeros((0,) + params.config.input_shape[1:], dtype=np.uint8)
    empty_y = np.zeros(0, dtype=np.float32)

    history: List[EpochLog] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            sums = np.zeros(4)
            batches = make_mixed_batches(ns, nr, cfg, epoch)
            for bi, b in enumerate(batches):
                sx = syn_x[b.syn] if len(b.syn) else empty_x
                sy = syn_y[b.syn] if len(b.syn) else empty_y
                rx = real_x[b.real] if len(b.real) else empty_x
                ry = real_y[b.real] if len(b.real) else empty_y
                if mode == "finetune" and len(rx):
                    # both pools carry degrees: one Loss1 over the whole batch
                    sx, sy = np.concatenate([sx, rx]), np.concatenate([sy, ry])
                    rx, ry = empty_x, empty_y
                try:
                    res, grads = _batch_step(params, sx, sy, rx, ry, w)
                    T.adam_step(params.tensors, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                except NumericError as e:
                    raise TrainingError(f"epoch {epoch} batch {bi}: {e}") from e
                params.bump()
                sums += (res.loss1.value, res.loss2.value, res.loss3.value, res.total)
            nb = max(len(batches), 1)
            entry = EpochLog(epoch, *(float(v) for v in sums / nb),
                             wall_ms=round((time.perf_counter() - t0) * 1000.0, 1))
            history.append(entry)
            log.info("epoch %d: %s", epoch, entry)
            if progress:
                progress(entry)
            if fh:
                fh.write(json.dumps(asdict(entry)) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return params, history


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def split_indices(n: int, train_fraction: float = 0.75, seed: int = 0):
    """Deterministic hash split: exactly floor(train_fraction * n) training indices."""
    keys = np.array([sample_seed(seed, i, 4242) for i in range(n)], dtype=np.uint64)
    order = np.argsort(keys, kind="stable")
    k = int(np.floor(train_fraction * n))
    return np.sort(order[:k]), np.sort(order[k:])


def finetune(params: N.NetParams, realprime: Dataset, cfg: TrainConfig, syn: Optional[Dataset] = None,
             log_path=None):
    """Continue training on degree-labelled real samples with the MSE term.

    Returns (params, history, test_split) where test_split is the held-out
    part of ``realprime``.
    """
    if realprime.label_kind != "degree":
        raise DataError("fine-tuning needs degree-labelled samples")
    tr, te = split_indices(len(realprime), cfg.finetune_split, cfg.seed)
    cfg = replace(cfg, mode="finetune")
    if cfg.epochs == 0:
        return params.copy(), [], realprime.subset(te)
    extra = syn if cfg.finetune_syn_fraction > 0 else None
    new, hist = train(params, realprime.subset(tr), extra, cfg, log_path)
    return new, hist, realprime.subset(te)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

GRADCHECK_TOL = 1e-4
GRADCHECK_H = 1e-3


@dataclass
class GradcheckEntry:
    component: str
    max_rel_error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOL


@dataclass
class GradcheckReport:
    seed: int
    entries: List[GradcheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self):
        return [e.component for e in self.entries if not e.passed]

    def to_dict(self):
        return {"seed": self.seed, "tolerance": GRADCHECK_TOL, "passed": self.passed,
                "components": [{"component": e.component, "max_rel_error": e.max_rel_error,
                                "points": e.points, "passed": e.passed} for e in self.entries]}


def _fd(f, x):
    return T.finite_diff_grad(f, x, GRADCHECK_H)


def _check_conv(rng, kernels):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    out, cache = kernels["conv2d_forward"](x, w, b, stride, pad)
    proj = rng.normal(size=out.shape)
    dx, dw, db = kernels["conv2d_backward"](cache, proj)
    f = lambda xx, ww, bb: float(np.sum(kernels["conv2d_forward"](xx, ww, bb, stride, pad)[0] * proj))
    return max(T.relative_error(dx, _fd(lambda z: f(z, w, b), x)),
               T.relative_error(dw, _fd(lambda z: f(x, z, b), w)),
               T.relative_error(db, _fd(lambda z: f(x, w, z), b)))


def _spread(rng, shape, gap=0.05):
    """Random values with pairwise gaps, so max/MFM ties stay away from +-h."""
    n = int(np.prod(shape))
    vals = np.arange(n) * gap + rng.uniform(0, gap / 4)
    return rng.permutation(vals).reshape(shape) - vals.mean()


def _check_pool(rng, kernels):
    x = _spread(rng, (2, 2, 5, 6))
    out, cache = kernels["maxpool2_forward"](x)
    proj = rng.normal(size=out.shape)
    dx = kernels["maxpool2_backward"](cache, proj)
    return T.relative_error(dx, _fd(lambda z: float(np.sum(kernels["maxpool2_forward"](z)[0] * proj)), x))


def _check_linear(rng, kernels):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    out, cache = kernels["linear_forward"](x, w, b)
    proj = rng.normal(size=out.shape)
    dx, dw, db = kernels["linear_backward"](cache, proj)
    f = lambda xx, ww, bb: float(np.sum(kernels["linear_forward"](xx, ww, bb)[0] * proj))
    return max(T.relative_error(dx, _fd(lambda z: f(z, w, b), x)),
               T.relative_error(dw, _fd(lambda z: f(x, z, b), w)),
               T.relative_error(db, _fd(lambda z: f(x, w, z), b)))


def _check_mfm(rng, kernels):
    shape = (2, 4, 3, 3) if rng.random() < 0.5 else (3, 6)
    x = _spread(rng, shape)
    out, cache = kernels["mfm_forward"](x)
    proj = rng.normal(size=out.shape)
    dx = kernels["mfm_backward"](cache, proj)
    return T.relative_error(dx, _fd(lambda z: float(np.sum(kernels["mfm_forward"](z)[0] * proj)), x))


def _off_kink_outputs(rng, n, labels, ot):
    out = rng.uniform(-10, 40, size=(n, 1))
    # keep hinge inputs at least 0.5 away from OT
    near = np.abs(out - ot) < 0.5
    out[near] += 1.0
    return out


def _check_loss1(rng):
    n = int(rng.integers(1, 6))
    o2, lab = rng.uniform(-5, 105, size=(n, 1)), rng.uniform(0, 100, size=n)
    _, g = loss1_mse(o2, lab)
    return T.relative_error(g, _fd(lambda z: loss1_mse(z, lab)[0].value, o2))


def _check_loss2(rng):
    n = int(rng.integers(1, 6))
    lab = rng.integers(0, 2, size=n).astype(float)
    o2 = _off_kink_outputs(rng, n, lab, 15.0)
    _, g = loss2_binary(o2, lab, 15.0)
    return T.relative_error(g, _fd(lambda z: loss2_binary(z, lab, 15.0)[0].value, o2))


def _gapped_features(rng):
    while True:
        s = rng.normal(0.5, 1.0, size=(int(rng.integers(1, 4)), 6))
        r = rng.normal(-0.5, 2.0, size=(int(rng.integers(1, 4)), 6))
        if abs(s.mean() - r.mean()) > 1e-2 and abs(s.var() - r.var()) > 1e-2:
            return s, r


def _check_loss3(rng):
    s, r = _gapped_features(rng)
    _, gs, gr = loss3_distribution(s, r)
    return max(T.relative_error(gs, _fd(lambda z: loss3_distribution(z, r)[0].value, s)),
               T.relative_error(gr, _fd(lambda z: loss3_distribution(s, z)[0].value, r)))


def _check_combined(rng):
    s, r = _gapped_features(rng)
    ns, nr = len(s), len(r)
    ls = rng.uniform(0, 100, size=ns)
    lr_ = rng.integers(0, 2, size=nr).astype(float)
    o2s = rng.uniform(-5, 105, size=(ns, 1))
    o2r = _off_kink_outputs(rng, nr, lr_, 15.0)
    w = LossWeights(float(rng.uniform(0, 1)), float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), 15.0)
    res = combined_loss(s, o2s, ls, r, o2r, lr_, w)
    f = lambda a, b, c, d: combined_loss(a, b, ls, c, d, lr_, w).total
    return max(T.relative_error(res.d_o1_s, _fd(lambda z: f(z, o2s, r, o2r), s)),
               T.relative_error(res.d_o2_s, _fd(lambda z: f(s, z, r, o2r), o2s)),
               T.relative_error(res.d_o1_r, _fd(lambda z: f(s, o2s, z, o2r), r)),
               T.relative_error(res.d_o2_r, _fd(lambda z: f(s, o2s, r, z), o2r)))


def _decisions(cache):
    """Signature of every max/MFM choice made in a forward pass."""
    parts = []
    for c in cache["layers"]:
        if isinstance(c, dict) and "argmax" in c:
            parts.append(c["argmax"].tobytes())
        elif isinstance(c, dict) and "first" in c:
            parts.append(c["first"].tobytes())
    return b"|".join(parts)


def _check_network(rng, tries=20):
    """End-to-end scalar loss through the tiny net, w.r.t. several parameters.

    Points where a finite-difference probe flips a pool/MFM decision sit on
    a kink and are redrawn.
    """
    cfg = N.tiny_config()
    for _ in range(tries):
        params = N.init_params(cfg, int(rng.integers(1 << 30)), dtype=np.float64)
        x = rng.uniform(0, 255, size=(2,) + cfg.input_shape)
        p1 = rng.normal(size=(2, cfg.feature_width))
        p2 = rng.normal(size=(2, 1))
        _, _, cache = N.forward(params, x)
        base = _decisions(cache)
        kinked = False

        def loss(tensors):
            nonlocal kinked
            pp = N.NetParams(cfg, tensors, None, params.fingerprint)
            o1, o2, c = N.forward(pp, x)
            kinked = kinked or _decisions(c) != base
            return float(np.sum(o1 * p1) + np.sum(o2 * p2))

        grads = N.backward(params, cache, p1, p2)
        worst = 0.0
        for name in ("conv1.w", "conv1.b", "conv3.w", "conv5.b", "fc1.w", "fc2.w", "fc2.b"):
            def f(z, name=name):
                t = dict(params.tensors)
                t[name] = z
                return loss(t)

            worst = max(worst, T.relative_error(grads[name], _fd(f, params.tensors[name])))
        if not kinked:
            return worst
    raise OracleError("no off-kink point found for the network check")


KERNEL_NAMES = ("conv2d_forward", "conv2d_backward", "maxpool2_forward", "maxpool2_backward",
                "linear_forward", "linear_backward", "mfm_forward", "mfm_backward")


def gradcheck_suite(seed: int = 0, points: int = 10, kernels: Optional[dict] = None) -> GradcheckReport:
    """Finite-difference checks of every kernel and loss at random off-kink points.

    ``kernels`` substitutes individual kernel functions, which is how tests
    confirm that a broken backward is reported.
    """
    ks = {name: getattr(T, name) for name in KERNEL_NAMES}
    ks.update(kernels or {})
    rng = np.random.default_rng(seed)
    checks = [
        ("conv2d", lambda: _check_conv(rng, ks)),
        ("maxpool2", lambda: _check_pool(rng, ks)),
        ("linear", lambda: _check_linear(rng, ks)),
        ("mfm", lambda: _check_mfm(rng, ks)),
        ("loss1", lambda: _check_loss1(rng)),
        ("loss2", lambda: _check_loss2(rng)),
        ("loss3", lambda: _check_loss3(rng)),
        ("combined", lambda: _check_combined(rng)),
        ("network", lambda: _check_network(rng)),
    ]
    report = GradcheckReport(seed)
    for name, fn in checks:
        n = points if name != "network" else max(2, points // 5)
        worst = 0.0
        for _ in range(n):
            try:
                worst = max(worst, fn())
            except Exception as e:  # a crashing kernel is a failed component
                log.warning("gradcheck %s raised %s", name, e)
                worst = float("inf")
        report.entries.append(GradcheckEntry(name, float(worst), n))
    return report
