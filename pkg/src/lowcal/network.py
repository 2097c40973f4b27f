"""Compact two-branch calibration network.

Layout::

    rgb   -> conv stack -> rms norm -+
                                     +-> correlation (cost volume) -> conv stack -> GAP -> heads
    depth -> conv stack -> rms norm -+

    heads: rot fc -> R^f -> leaky relu -> fc -> quat (4)
           trans fc -> T^f -> leaky relu -> fc -> trans (3)

Branch conv strides default to (2, 2, 1), a quarter-resolution cost volume.  The
rotation/translation features used by the contrastive loss are the
pre-activation outputs of the first fully-connected layer of each head.
"""

from __future__ import annotations

import io
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    correlation,
    global_avg_pool,
    l2_normalize_rows,
    leaky_relu,
    linear,
)
from .depth_image import FormatError

_CKPT_MAGIC = b"LCKPT1\n"
_E_W = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class NetworkConfig:
    height: int = 32
    width: int = 32
    channels: Tuple[int, ...] = (8, 16, 32)
    branch_strides: Tuple[int, ...] = (2, 2, 1)
    max_disp: int = 4
    post_channels: Tuple[int, ...] = (32, 32)
    feature_dim: int = 64
    depth_scale: float = 10.0
    kernel: int = 3
    rot_scale: float = 1.0
    trans_scale: float = 1.0
    feature_eps: float = 1e-3
    leak: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "post_channels", tuple(int(c) for c in self.post_channels))
        object.__setattr__(self, "branch_strides", tuple(int(c) for c in self.branch_strides))
        if len(self.branch_strides) != len(self.channels) or min(self.branch_strides) < 1:
            raise ValueError("branch_strides needs one positive stride per branch conv layer")
        if self.max_disp < 1:
            raise ValueError("max_disp must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if not 0.0 <= self.leak < 1.0:
            raise ValueError("leak must lie in [0, 1)")
        if not self.feature_eps > 0:
            raise ValueError("feature_eps must be positive")
        if not (self.rot_scale > 0 and self.trans_scale > 0):
            raise ValueError("output scales must be positive")
        if not self.channels or not self.post_channels:
            raise ValueError("conv stacks must not be empty")
        fh, fw = self.feature_size
        if self.max_disp >= min(fh, fw):
            raise ValueError(f"max_disp {self.max_disp} too large for {fh}x{fw} branch features")

    @property
    def feature_size(self) -> Tuple[int, int]:
        h, w = self.height, self.width
        for s in self.branch_strides:
            h, w = -(-h // s), -(-w // s)
        return h, w

    @property
    def cost_channels(self) -> int:
        return (2 * self.max_disp + 1) ** 2


def _conv_param(rng, out_c, in_c, k):
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k))


def _fc_param(rng, out_f, in_f):
    return rng.normal(0.0, np.sqrt(2.0 / in_f), size=(out_f, in_f))


def init_params(cfg: NetworkConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    """Kaiming fan-in weights, zero biases, zero final head weights.

    With the final layers at zero a fresh model predicts the identity correction.
    """
    rng = np.random.default_rng(seed)
    p: Dict[str, np.ndarray] = OrderedDict()
    k = cfg.kernel
    for branch, in_c in (("rgb", 3), ("depth", 1)):
        c_prev = in_c
        for i, c in enumerate(cfg.channels):
            p[f"{branch}.conv{i}.weight"] = _conv_param(rng, c, c_prev, k)
            p[f"{branch}.conv{i}.bias"] = np.zeros(c)
            c_prev = c
    c_prev = cfg.cost_channels
    for i, c in enumerate(cfg.post_channels):
        p[f"post.conv{i}.weight"] = _conv_param(rng, c, c_prev, k)
        p[f"post.conv{i}.bias"] = np.zeros(c)
        c_prev = c
    f = cfg.feature_dim
    for head, out_dim in (("rot", 4), ("trans", 3)):
        p[f"{head}.fc.weight"] = _fc_param(rng, f, c_prev)
        p[f"{head}.fc.bias"] = np.zeros(f)
        p[f"{head}.out.weight"] = np.zeros((out_dim, f))
        p[f"{head}.out.bias"] = np.zeros(out_dim)
    return OrderedDict((name, Tensor(v, requires_grad=True, name=name)) for name, v in p.items())


def param_count(params) -> int:
    return int(sum(t.data.size for t in params.values()))


@dataclass
class NetworkOutput:
    rot_feature: Tensor
    trans_feature: Tensor
    quat: Tensor
    trans: Tensor


def _branch(params, prefix: str, x: Tensor, strides, leak: float) -> Tensor:
    for i, stride in enumerate(strides):
        x = leaky_relu(conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride=stride), leak)
    return x


def rms_normalize_channels(x: Tensor, eps: float) -> Tensor:
    """Divide each pixel's feature vector by its channel RMS (``eps`` keeps empty pixels finite)."""
    return x / ((x * x).mean(axis=1, keepdims=True) + eps).sqrt()


def forward(params, cfg: NetworkConfig, rgb, depth) -> NetworkOutput:
    """Run the network on ``rgb (b, 3, h, w)`` and metric ``depth (b, 1, h, w)``."""
    rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"rgb must be (b, 3, h, w), got {rgb.shape}")
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ValueError(f"depth must be (b, 1, h, w), got {depth.shape}")
    if rgb.shape[0] != depth.shape[0] or rgb.shape[2:] != depth.shape[2:]:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} are not aligned")
    if rgb.shape[2:] != (cfg.height, cfg.width):
        raise ValueError(f"input size {rgb.shape[2:]} != configured {(cfg.height, cfg.width)}")

    f_rgb = _branch(params, "rgb", rgb, cfg.branch_strides, cfg.leak)
    f_depth = _branch(params, "depth", depth * (1.0 / cfg.depth_scale), cfg.branch_strides, cfg.leak)
    # unit-RMS features keep the cost volume O(1) whatever the input scales
    x = correlation(rms_normalize_channels(f_rgb, cfg.feature_eps), rms_normalize_channels(f_depth, cfg.feature_eps), cfg.max_disp)
    for i in range(len(cfg.post_channels)):
        x = leaky_relu(conv2d(x, params[f"post.conv{i}.weight"], params[f"post.conv{i}.bias"], stride=2 if i == 0 else 1), cfg.leak)
    g = global_avg_pool(x)

    rot_f = linear(g, params["rot.fc.weight"], params["rot.fc.bias"])
    trans_f = linear(g, params["trans.fc.weight"], params["trans.fc.bias"])
    # heads regress in units of the training range: q = normalize(e_w + s_r * raw), t = s_t * raw
    raw_q = linear(leaky_relu(rot_f, cfg.leak), params["rot.out.weight"], params["rot.out.bias"])
    quat = l2_normalize_rows(raw_q * cfg.rot_scale + _E_W)
    trans = linear(leaky_relu(trans_f, cfg.leak), params["trans.out.weight"], params["trans.out.bias"]) * cfg.trans_scale
    return NetworkOutput(rot_f, trans_f, quat, trans)


def _cfg_to_meta(cfg: NetworkConfig) -> Dict[str, str]:
    meta = {}
    for k, v in asdict(cfg).items():
        meta[k] = ",".join(str(i) for i in v) if isinstance(v, (tuple, list)) else repr(v)
    return meta


def _meta_to_cfg(meta: Dict[str, str]) -> NetworkConfig:
    kw = {}
    for k, v in meta.items():
        if k not in _CFG_FIELDS:
            continue
        if k in ("channels", "post_channels", "branch_strides"):
            kw[k] = tuple(int(i) for i in v.split(","))
        elif k in ("depth_scale", "rot_scale", "trans_scale", "feature_eps", "leak"):
            kw[k] = float(v)
        else:
            kw[k] = int(v)
    return NetworkConfig(**kw)


_CFG_FIELDS = {f.name for f in fields(NetworkConfig)}


def encode_checkpoint(params, cfg: NetworkConfig, extra: Optional[Dict[str, str]] = None) -> bytes:
    """Checkpoint bytes: magic, ASCII header, then little-endian float64 data.

    Header lines are ``meta <key> <value>`` for the network config and any
    ``extra`` entries, then ``params <count>`` and one ``<name> <d0>x<d1>...``
    line per parameter.
    """
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    meta = _cfg_to_meta(cfg)
    for k, v in (extra or {}).items():
        if k in meta or not k or any(ch.isspace() for ch in k + str(v)):
            raise ValueError(f"bad extra checkpoint metadata {k!r}={v!r}")
        meta[k] = str(v)
    for k, v in meta.items():
        buf.write(f"meta {k} {v}\n".encode("ascii"))
    buf.write(f"params {len(params)}\n".encode("ascii"))
    for name, t in params.items():
        buf.write(f"{name} {'x'.join(str(s) for s in t.shape)}\n".encode("ascii"))
    for t in params.values():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes):
    if not raw.startswith(_CKPT_MAGIC):
        raise FormatError("bad checkpoint magic")
    pos = len(_CKPT_MAGIC)

    def line():
        nonlocal pos
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError("truncated checkpoint header")
        text = raw[pos:nl].decode("ascii")
        pos = nl + 1
        return text

    meta: Dict[str, str] = {}
    while True:
        text = line()
        parts = text.split()
        if parts and parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts and parts[0] == "params" and len(parts) == 2:
            count = int(parts[1])
            break
        else:
            raise FormatError(f"bad checkpoint header line: {text!r}")
    specs = []
    for _ in range(count):
        name, shape = line().split()
        specs.append((name, tuple(int(s) for s in shape.split("x"))))
    params = OrderedDict()
    for name, shape in specs:
        n = int(np.prod(shape))
        chunk = raw[pos : pos + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"truncated data for parameter {name}")
        params[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy(), requires_grad=True, name=name)
        pos += 8 * n
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after checkpoint data")
    extra = {k: v for k, v in meta.items() if k not in _CFG_FIELDS}
    return params, _meta_to_cfg(meta), extra


def save_checkpoint(params, cfg: NetworkConfig, path: Union[str, Path], extra: Optional[Dict[str, str]] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg, extra))


def load_checkpoint(path: Union[str, Path]):
    """Return ``(params, cfg, extra_meta)`` read from ``path``."""
    return decode_checkpoint(Path(path).read_bytes())
