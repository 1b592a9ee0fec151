"""The 3D-2D-CNN-BLSTM network, its bottleneck tap and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import layers as L
from .tensor import Tensor, get_dtype, parameter

# (kernel, stride, pad) per layer; pad entries may be (lo, hi) pairs
CONV1 = ((3, 5, 5), (1, 2, 2), (1, 2, 2))
POOL1 = ((1, 2, 2), (1, 2, 2))
# time pad 1 left / 2 right keeps N frames with a 4-frame kernel
CONV2 = ((4, 5, 5), (1, 1, 1), ((1, 2), 2, 2))
POOL2 = ((1, 2, 2), (1, 2, 2))
CONV2D1 = ((5, 5), (2, 2), (2, 2))
# pad 1 (not 2) gives the 3x2 map behind the 48-d bottleneck
CONV2D2 = ((3, 3), (2, 2), (1, 1))

LAYER_NAMES = ("input", "conv3d_1", "pool3d_1", "conv3d_2", "pool3d_2",
               "conv2d_1", "conv2d_2", "blstm_1", "blstm_2", "linear", "softmax")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _scaled(width, scale):
    return max(1, int(round(width * scale)))


def _axis_out(size, kernel, stride, pad):
    lo, hi = (pad, pad) if np.isscalar(pad) else pad
    return L.out_size(size, kernel, stride, lo, hi)


@dataclass(frozen=True)
class NetworkConfig:
    label_count: int
    height: int = 100
    width: int = 50
    channels: int = 3
    conv_widths: tuple = (32, 64, 128, 8)
    lstm_hidden: int = 200
    width_scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale).limit_denominator(1000))
        object.__setattr__(self, "conv_widths", tuple(int(c) for c in self.conv_widths))
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        for name in ("label_count", "height", "width", "channels", "lstm_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.conv_widths) != 4 or min(self.conv_widths) <= 0:
            raise ConfigError("conv_widths needs four positive entries")
        h, w = self.spatial_sizes()[-1]
        if h <= 0 or w <= 0:
            raise ConfigError(f"input {self.height}x{self.width} is too small for the conv stack")

    @property
    def widths(self):
        return tuple(_scaled(c, self.width_scale) for c in self.conv_widths)

    @property
    def hidden(self):
        return _scaled(self.lstm_hidden, self.width_scale)

    def spatial_sizes(self):
        """(height, width) after conv1, pool1, conv2, pool2, conv2d_1, conv2d_2."""
        h, w = self.height, self.width
        sizes = []
        for kernel, stride, pad in (CONV1, POOL1 + ((0, 0, 0),), CONV2, POOL2 + ((0, 0, 0),)):
            h = _axis_out(h, kernel[1], stride[1], pad[1])
            w = _axis_out(w, kernel[2], stride[2], pad[2])
            sizes.append((h, w))
        for kernel, stride, pad in (CONV2D1, CONV2D2):
            h = _axis_out(h, kernel[0], stride[0], pad[0])
            w = _axis_out(w, kernel[1], stride[1], pad[1])
            sizes.append((h, w))
        return sizes

    @property
    def bottleneck_dim(self):
        h, w = self.spatial_sizes()[-1]
        return h * w * self.widths[3]

    def layer_shapes(self, n):
        """Expected per-layer output shapes for an ``n``-frame clip."""
        c1, c2, c3, c4 = self.widths
        s = self.spatial_sizes()
        hid = self.hidden
        return {
            "input": (n, self.height, self.width, self.channels),
            "conv3d_1": (n, *s[0], c1),
            "pool3d_1": (n, *s[1], c1),
            "conv3d_2": (n, *s[2], c2),
            "pool3d_2": (n, *s[3], c2),
            "conv2d_1": (n, *s[4], c3),
            "conv2d_2": (n, *s[5], c4),
            "blstm_1": (n, 2 * hid),
            "blstm_2": (n, 2 * hid),
            "linear": (n, self.label_count),
            "softmax": (n, self.label_count),
        }

    def to_dict(self):
        return {
            "label_count": self.label_count,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "conv_widths": list(self.conv_widths),
            "lstm_hidden": self.lstm_hidden,
            "width_scale": str(self.width_scale),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["width_scale"] = Fraction(d.get("width_scale", "1"))
        d["conv_widths"] = tuple(d.get("conv_widths", (32, 64, 128, 8)))
        return cls(**d)


def _param_shapes(cfg: NetworkConfig):
    c1, c2, c3, c4 = cfg.widths
    hid = cfg.hidden
    shapes = {}

    def bn(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    bn("bn0", cfg.channels)
    shapes["conv3d_1.weight"] = (*CONV1[0], cfg.channels, c1)
    shapes["conv3d_1.bias"] = (c1,)
    bn("bn1", c1)
    shapes["conv3d_2.weight"] = (*CONV2[0], c1, c2)
    shapes["conv3d_2.bias"] = (c2,)
    bn("bn2", c2)
    shapes["conv2d_1.weight"] = (*CONV2D1[0], c2, c3)
    shapes["conv2d_1.bias"] = (c3,)
    bn("bn3", c3)
    shapes["conv2d_2.weight"] = (*CONV2D2[0], c3, c4)
    shapes["conv2d_2.bias"] = (c4,)
    bn("bn4", c4)
    for layer, din in (("blstm_1", cfg.bottleneck_dim), ("blstm_2", 2 * hid)):
        for d in ("fw", "bw"):
            shapes[f"{layer}.{d}.wx"] = (din, 4 * hid)
            shapes[f"{layer}.{d}.wh"] = (hid, 4 * hid)
            shapes[f"{layer}.{d}.b"] = (4 * hid,)
    shapes["linear.weight"] = (2 * hid, cfg.label_count)
    shapes["linear.bias"] = (cfg.label_count,)
    return shapes


BN_NAMES = ("bn0", "bn1", "bn2", "bn3", "bn4")


class Network:
    """3D-2D-CNN-BLSTM with a learned input batch-norm and a CTC output layer.

    ``params`` maps names to trainable tensors; ``state`` holds batch-norm
    running statistics (not trained, but saved in checkpoints).
    """

    def __init__(self, config: NetworkConfig, params: dict, state: dict):
        self.config = config
        self.params = params
        self.state = state

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def named_tensors(self):
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.state)
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _bn(self, name, x, training):
        p = self.params
        return L.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                           self.state[f"{name}.running_mean"], self.state[f"{name}.running_var"], training)

    def features(self, clip, training=False, taps=None):
        """Run the convolutional front end; returns the flattened bottleneck."""
        p = self.params
        x = clip if isinstance(clip, Tensor) else Tensor(clip)
        if x.ndim == 4:
            x = L.reshape(x, (1, *x.shape))
        b, n = x.shape[:2]
        if x.shape[2:] != (self.config.height, self.config.width, self.config.channels):
            raise L.ShapeError(f"clip frames are {x.shape[2:]}, network expects "
                               f"{(self.config.height, self.config.width, self.config.channels)}")

        def tap(name, t):
            if taps is not None:
                taps[name] = t
            return t

        tap("input", x)
        h = self._bn("bn0", x, training)
        h = L.conv3d(h, p["conv3d_1.weight"], p["conv3d_1.bias"], CONV1[1], CONV1[2])
        h = tap("conv3d_1", L.relu(self._bn("bn1", h, training)))
        h = tap("pool3d_1", L.maxpool3d(h, *POOL1))
        h = L.conv3d(h, p["conv3d_2.weight"], p["conv3d_2.bias"], CONV2[1], CONV2[2])
        h = tap("conv3d_2", L.relu(self._bn("bn2", h, training)))
        h = tap("pool3d_2", L.maxpool3d(h, *POOL2))
        h = L.conv2d(h, p["conv2d_1.weight"], p["conv2d_1.bias"], CONV2D1[1], CONV2D1[2])
        h = tap("conv2d_1", L.relu(self._bn("bn3", h, training)))
        h = L.conv2d(h, p["conv2d_2.weight"], p["conv2d_2.bias"], CONV2D2[1], CONV2D2[2])
        h = tap("conv2d_2", L.relu(self._bn("bn4", h, training)))
        # (height, width, channel) row-major linearisation
        return tap("bottleneck", L.reshape(h, (b, n, -1)))

    def logits(self, clip, training=False, taps=None):
        p = self.params
        h = self.features(clip, training, taps)
        for layer in ("blstm_1", "blstm_2"):
            fw = tuple(p[f"{layer}.fw.{k}"] for k in ("wx", "wh", "b"))
            bw = tuple(p[f"{layer}.bw.{k}"] for k in ("wx", "wh", "b"))
            h = L.blstm(h, fw, bw)
            if taps is not None:
                taps[layer] = h
        z = L.linear(h, p["linear.weight"], p["linear.bias"])
        if taps is not None:
            taps["linear"] = z
        return z

    def forward(self, clip, training=False, taps=None) -> Tensor:
        """Per-frame label log-probabilities, ``(B, N, L)`` (or ``(N, L)`` for one clip)."""
        single = (clip.ndim if isinstance(clip, Tensor) else np.ndim(clip)) == 4
        out = L.log_softmax(self.logits(clip, training, taps))
        if taps is not None:
            taps["softmax"] = out
        if single:
            out = L.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def bottleneck(self, clip) -> np.ndarray:
        """Inference-mode bottleneck features, ``N x bottleneck_dim`` per clip."""
        single = np.ndim(clip) == 4
        feats = self.features(clip, training=False).data
        return feats[0] if single else feats


def build_network(config: NetworkConfig, seed=0) -> Network:
    rng = np.random.default_rng(seed)
    dt = get_dtype()
    params = {}
    state = {}
    shapes = _param_shapes(config)
    hid = config.hidden
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape, dtype=dt)
        elif name.endswith((".beta", ".bias")) or name.endswith(".b") and "blstm" not in name:
            arr = np.zeros(shape, dtype=dt)
        elif name.endswith(".weight"):
            if len(shape) > 2:
                field_size = int(np.prod(shape[:-2]))
                fan_in, fan_out = field_size * shape[-2], field_size * shape[-1]
            else:
                fan_in, fan_out = shape
            arr = L.glorot_uniform(rng, shape, fan_in, fan_out)
        else:
            continue
        params[name] = parameter(arr, name=name)
    for layer in ("blstm_1", "blstm_2"):
        din = shapes[f"{layer}.fw.wx"][0]
        for d in ("fw", "bw"):
            wx, wh, b = L.lstm_init(rng, din, hid)
            for k, arr in (("wx", wx), ("wh", wh), ("b", b)):
                params[f"{layer}.{d}.{k}"] = parameter(arr, name=f"{layer}.{d}.{k}")
    params = {name: params[name] for name in shapes}
    for bn in BN_NAMES:
        c = shapes[f"{bn}.gamma"][0]
        state[f"{bn}.running_mean"] = np.zeros(c, dtype=dt)
        state[f"{bn}.running_var"] = np.ones(c, dtype=dt)
    return Network(config, params, state)


def forward(model: Network, clip, training=False) -> Tensor:
    return model.forward(clip, training=training)


def extract_bottleneck(model: Network, clip) -> np.ndarray:
    return model.bottleneck(clip)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"LPRC"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: dict
    epoch: int = 0
    alphabet: dict | None = None
    meta: dict = field(default_factory=dict)


def checkpoint_from_model(model: Network, epoch=0, alphabet=None, extra=None, meta=None) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float32) for k, v in model.named_tensors().items()}
    for k, v in (extra or {}).items():
        tensors[k] = np.array(v, dtype=np.float32)
    return Checkpoint(model.config, tensors, epoch, alphabet, dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint, config: NetworkConfig | None = None) -> Network:
    if config is not None and config != ckpt.config:
        raise CheckpointError(f"checkpoint config {ckpt.config.to_dict()} does not match {config.to_dict()}")
    model = build_network(ckpt.config)
    load_into(model, ckpt)
    return model


def load_into(model: Network, ckpt: Checkpoint):
    if model.config != ckpt.config:
        raise CheckpointError("checkpoint was saved for a different network config")
    for name, p in model.params.items():
        arr = ckpt.tensors.get(name)
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} missing or mis-shaped in checkpoint")
        p.data = arr.astype(p.data.dtype)
    for name, arr in model.state.items():
        src = ckpt.tensors.get(name)
        if src is None or src.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} missing or mis-shaped in checkpoint")
        arr[...] = src


def _write_str(f, s, fmt="<H"):
    raw = s.encode("utf-8")
    f.write(struct.pack(fmt, len(raw)))
    f.write(raw)


def _read_exact(f, n):
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated file")
    return raw


def write_tensors(f, tensors: dict):
    f.write(struct.pack("<I", len(tensors)))
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        _write_str(f, name)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensors(f) -> dict:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    blob = json.dumps({
        "network": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "alphabet": ckpt.alphabet,
        "meta": ckpt.meta,
    }, sort_keys=True)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        _write_str(f, blob, "<I")
        write_tensors(f, ckpt.tensors)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f):
    if f.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", _read_exact(f, 2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blen,) = struct.unpack("<I", _read_exact(f, 4))
    return json.loads(_read_exact(f, blen).decode("utf-8"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = _read_header(f)
        tensors = read_tensors(f)
    return Checkpoint(NetworkConfig.from_dict(header["network"]), tensors,
                      header.get("epoch", 0), header.get("alphabet"), header.get("meta", {}))
