"""The eye-openness regressor: a conv/MFM trunk, FC1+MFM (feature O1), FC2 (degree O2)."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, NumericError, UsageError

OPEN = "open"
CLOSED = "closed"

INPUT_SHAPE = (1, 48, 128)


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | pool | mfm | flatten | linear
    out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class NetConfig:
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, int, int] = INPUT_SHAPE
    feature_width: int = 256
    scale_input: bool = True

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "feature_width": self.feature_width,
            "scale_input": self.scale_input,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(Layer(**l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            feature_width=int(d["feature_width"]),
            scale_input=bool(d["scale_input"]),
        )

    def fingerprint(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return _walk(self)[0]


def _conv_mfm(out, kernel, pad):
    return (Layer("conv", out=2 * out, kernel=kernel, pad=pad), Layer("mfm"))


def build_config(widths, kernels=(5, 3, 3, 3, 3), feature_width=256, input_shape=INPUT_SHAPE,
                 scale_input=True) -> NetConfig:
    """Five conv+MFM blocks with pools after the 1st, 2nd and 5th, then the FC heads.

    ``widths`` are post-MFM channel counts.
    """
    if len(widths) != 5 or len(kernels) != 5:
        raise ConfigError("build_config needs exactly five conv widths and kernels")
    layers: List[Layer] = []
    for i, (w, k) in enumerate(zip(widths, kernels)):
        layers.extend(_conv_mfm(w, k, k // 2))
        if i in (0, 1, 4):
            layers.append(Layer("pool"))
    layers += [Layer("flatten"), Layer("linear", out=2 * feature_width), Layer("mfm"),
               Layer("linear", out=1)]
    cfg = NetConfig(tuple(layers), tuple(input_shape), feature_width, scale_input)
    validate_config(cfg)
    return cfg


def default_config() -> NetConfig:
    return build_config((16, 24, 32, 24, 16))


def reduced_config() -> NetConfig:
    """Half-width trunk used for the desk-scale experiments."""
    return build_config((8, 12, 16, 12, 8))


def tiny_config() -> NetConfig:
    """Few-parameter net on a 1x8x16 input; small enough for finite differences."""
    return build_config((2, 2, 2, 2, 2), kernels=(3, 3, 3, 3, 3), feature_width=4,
                        input_shape=(1, 8, 16))


PRESETS = {"default": default_config, "reduced": reduced_config, "tiny": tiny_config}


def _walk(cfg: NetConfig):
    """Propagate shapes through the layer chain, returning param shapes and layer names."""
    c, h, w = cfg.input_shape
    flat = None
    shapes: Dict[str, Tuple[int, ...]] = {}
    names: List[Optional[str]] = []
    nconv = nlin = 0
    for layer in cfg.layers:
        if layer.kind == "conv":
            if flat is not None:
                raise ConfigError("conv layer after flatten")
            nconv += 1
            name = f"conv{nconv}"
            if layer.out < 1 or layer.kernel < 1:
                raise ConfigError(f"{name}: bad width/kernel")
            h2 = T.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
            w2 = T.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
            if h2 < 1 or w2 < 1:
                raise ConfigError(f"{name}: spatial size underflows ({h}x{w} -> {h2}x{w2})")
            shapes[name + ".w"] = (layer.out, c, layer.kernel, layer.kernel)
            shapes[name + ".b"] = (layer.out,)
            c, h, w = layer.out, h2, w2
            names.append(name)
        elif layer.kind == "pool":
            if flat is not None or h < 2 or w < 2:
                raise ConfigError(f"pool on {h}x{w} input underflows")
            h, w = h // 2, w // 2
            names.append(None)
        elif layer.kind == "mfm":
            size = flat if flat is not None else c
            if size % 2:
                raise ConfigError(f"MFM after a layer of odd width {size}")
            if flat is not None:
                flat //= 2
            else:
                c //= 2
            names.append(None)
        elif layer.kind == "flatten":
            flat = c * h * w
            names.append(None)
        elif layer.kind == "linear":
            if flat is None:
                raise ConfigError("linear layer before flatten")
            nlin += 1
            name = f"fc{nlin}"
            shapes[name + ".w"] = (layer.out, flat)
            shapes[name + ".b"] = (layer.out,)
            flat = layer.out
            names.append(name)
        else:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
    return shapes, names, flat


def validate_config(cfg: NetConfig):
    _, _, final = _walk(cfg)
    kinds = [l.kind for l in cfg.layers]
    if kinds[-3:] != ["linear", "mfm", "linear"]:
        raise ConfigError("network must end with linear -> mfm -> linear (FC1, MFM, FC2)")
    if final != 1:
        raise ConfigError(f"final layer must output exactly 1 value, got {final}")
    if cfg.layers[-3].out != 2 * cfg.feature_width:
        raise ConfigError(
            f"FC1 width {cfg.layers[-3].out} does not give feature width {cfg.feature_width} after MFM")


@dataclass
class NetParams:
    config: NetConfig
    tensors: Dict[str, np.ndarray]
    seed: Optional[int] = None
    fingerprint: int = 0
    generation: int = field(default=0, compare=False)

    def bump(self):
        """Mark cached activations as stale after an in-place update."""
        self.generation += 1

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                         self.seed, self.fingerprint)

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                         self.seed, self.fingerprint)


def init_params(config: NetConfig, seed: int, dtype=np.float32) -> NetParams:
    """He-normal weights, zero biases; deterministic in (config, seed)."""
    validate_config(config)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return NetParams(config, tensors, seed, config.fingerprint())


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation after {where}")
    return x


def forward(params: NetParams, batch: np.ndarray):
    """Run the net on an N x C x H x W batch; returns (O1, O2, cache)."""
    cfg = params.config
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(cfg.input_shape):
        raise ConfigError(f"batch shape {batch.shape} does not match input geometry {cfg.input_shape}")
    dtype = next(iter(params.tensors.values())).dtype
    x = batch.astype(dtype, copy=False)
    if cfg.scale_input:
        x = x * dtype.type(1.0 / 255.0)
    _, names, _ = _walk(cfg)
    caches = []
    feature = None
    n_layers = len(cfg.layers)
    for i, (layer, name) in enumerate(zip(cfg.layers, names)):
        p = params.tensors
        if layer.kind == "conv":
            x, c = T.conv2d_forward(x, p[name + ".w"], p[name + ".b"], layer.stride, layer.pad)
            where = name
        elif layer.kind == "pool":
            x, c = T.maxpool2_forward(x)
            where = f"pool@{i}"
        elif layer.kind == "mfm":
            x, c = T.mfm_forward(x)
            where = f"mfm@{i}"
        elif layer.kind == "flatten":
            c = x.shape
            x = x.reshape(x.shape[0], -1)
            where = "flatten"
        else:
            x, c = T.linear_forward(x, p[name + ".w"], p[name + ".b"])
            where = name
        _check(x, where)
        caches.append(c)
        if i == n_layers - 2:
            feature = x
    cache = {"layers": caches, "names": names, "params_id": id(params),
             "generation": params.generation, "n": batch.shape[0]}
    return feature, x, cache


def backward(params: NetParams, cache, d_o1, d_o2) -> Dict[str, np.ndarray]:
    """Gradients of (O1, O2) contributions w.r.t. every parameter.

    ``d_o1`` joins the FC2 input gradient at the FC1/MFM output.
    """
    if cache is None or "layers" not in cache:
        raise UsageError("backward needs the cache returned by forward")
    if cache["params_id"] != id(params) or cache["generation"] != params.generation:
        raise UsageError("stale cache: parameters changed since forward")
    n = cache["n"]
    cfg = params.config
    if d_o2.shape != (n, 1) or d_o1.shape != (n, cfg.feature_width):
        raise UsageError(f"backward: gradient shapes {d_o1.shape}, {d_o2.shape} do not match batch {n}")
    grads: Dict[str, np.ndarray] = {}
    g = d_o2
    n_layers = len(cfg.layers)
    for i in range(n_layers - 1, -1, -1):
        layer, name, c = cfg.layers[i], cache["names"][i], cache["layers"][i]
        if i == n_layers - 2:
            g = g + d_o1
        if layer.kind == "conv":
            g, gw, gb = T.conv2d_backward(c, g, need_dx=i > 0)
            grads[name + ".w"], grads[name + ".b"] = gw, gb
        elif layer.kind == "linear":
            g, gw, gb = T.linear_backward(c, g)
            grads[name + ".w"], grads[name + ".b"] = gw, gb
        elif layer.kind == "pool":
            g = T.maxpool2_backward(c, g)
        elif layer.kind == "mfm":
            g = T.mfm_backward(c, g)
        else:
            g = g.reshape(c)
    return {k: grads[k] for k in params.tensors}


def predict(params: NetParams, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Raw O2 for a stack of crops (N x H x W or N x 1 x H x W)."""
    if images.ndim == 3:
        images = images[:, None]
    out = []
    for start in range(0, len(images), batch_size):
        _, o2, _ = forward(params, images[start:start + batch_size])
        out.append(o2[:, 0])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def infer_degree(params: NetParams, crop: np.ndarray):
    """Reported degree (clamped below at 0, not above) and the raw O2."""
    if crop.ndim == 2:
        crop = crop[None, None]
    _, o2, _ = forward(params, crop)
    raw = float(o2[0, 0])
    return report_degree(raw), raw


def report_degree(raw: float) -> float:
    return max(raw, 0.0)


def classify_open(degree_raw: float, ot: float = 15.0) -> str:
    if ot <= 0:
        raise ConfigError("OT must be positive")
    return OPEN if degree_raw > ot else CLOSED


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"EYED"
VERSION = 1


def save_checkpoint(params: NetParams, path):
    path = Path(path)
    parts = [MAGIC, struct.pack("<IQI", VERSION, params.config.fingerprint(), len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    path.with_name(path.name + ".net.json").write_text(json.dumps(params.config.to_dict(), indent=1))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def sidecar_config(path) -> Optional[NetConfig]:
    side = Path(str(path) + ".net.json")
    if side.exists():
        return NetConfig.from_dict(json.loads(side.read_text()))
    return None


def load_checkpoint(path, config: Optional[NetConfig] = None) -> NetParams:
    """Read a checkpoint; ``config`` defaults to the sidecar written by save_checkpoint."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if config is None:
        config = sidecar_config(path)
        if config is None:
            raise CheckpointError(f"no network config supplied and no sidecar next to {path}")
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, fp, count = r.unpack("<IQI")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if fp != config.fingerprint():
        raise CheckpointError(f"fingerprint mismatch: file {fp:#018x}, config {config.fingerprint():#018x}")
    expected = config.param_shapes()
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    if set(tensors) != set(expected) or any(tensors[k].shape != expected[k] for k in expected):
        raise CheckpointError("tensor names/shapes do not match the network config")
    return NetParams(config, {k: tensors[k] for k in expected}, None, fp)
