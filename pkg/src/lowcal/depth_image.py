"""Sparse depth rasters from LiDAR scans and the densification methods.

A :class:`DepthImage` holds float32 depths in meters, row-major, with 0
marking pixels that received no return.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import PointCloud, RigidTransform, transform_apply

NEAR_PLANE = 0.1
FILL_RADIUS = 4
_MAGIC = b"LDI1\n"


class FormatError(ValueError):
    """Raised when a file does not conform to its declared binary layout."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True, eq=False)
class DepthImage:
    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"depth raster must be a non-empty 2-D array, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depths must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "DepthImage":
        return cls(np.zeros((height, width), dtype=np.float32))


class InterpolationMethod(str, enum.Enum):
    NONE = "none"
    LINEAR = "linear"
    AVG_POOL = "avg"
    MAX_POOL = "max"
    NEAREST = "nearest"


def project_cloud(
    pc: PointCloud,
    k: CameraIntrinsics,
    extrinsic: Optional[RigidTransform] = None,
) -> DepthImage:
    """Pinhole z-buffer projection of ``pc`` after mapping it by ``extrinsic``.

    Collisions keep the smallest depth; equal depths keep the lowest point index.
    """
    out = np.zeros((k.height, k.width), dtype=np.float32)
    if len(pc) == 0:
        return DepthImage(out)
    pts = pc.points if extrinsic is None else transform_apply(extrinsic, pc.points)
    z = pts[:, 2]
    front = z > NEAR_PLANE
    idx = np.nonzero(front)[0]
    x, y, z = pts[idx, 0], pts[idx, 1], z[idx]
    u = np.rint(k.fx * x / z + k.cx).astype(np.int64)
    v = np.rint(k.fy * y / z + k.cy).astype(np.int64)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    u, v, z, idx = u[inside], v[inside], z[inside], idx[inside]
    if len(z) == 0:
        return DepthImage(out)
    flat = v * k.width + u
    order = np.lexsort((idx, z, flat))
    flat, z = flat[order], z[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    out.reshape(-1)[flat[first]] = z[first]
    return DepthImage(out)


def pool_geometry(size: int, out: int) -> tuple:
    """Stride and kernel of the adaptive pooling rule along one axis.

    ``stride = size // out`` and ``kernel = size - (out - 1) * stride``.
    """
    if out < 1 or out > size:
        raise ValueError(f"pooled size {out} must be in [1, {size}]")
    stride = size // out
    kernel = size - (out - 1) * stride
    return stride, kernel


def _windows(d: DepthImage, out_h: int, out_w: int) -> np.ndarray:
    sh, kh = pool_geometry(d.height, out_h)
    sw, kw = pool_geometry(d.width, out_w)
    return sliding_window_view(d.data, (kh, kw))[::sh, ::sw]


def adaptive_max_pool(d: DepthImage, out_h: int, out_w: int) -> DepthImage:
    return DepthImage(_windows(d, out_h, out_w).max(axis=(2, 3)))


def adaptive_avg_pool(d: DepthImage, out_h: int, out_w: int) -> DepthImage:
    """Window mean over returns only; all-empty windows stay 0."""
    win = _windows(d, out_h, out_w).astype(np.float64)
    total = win.sum(axis=(2, 3))
    count = (win > 0).sum(axis=(2, 3))
    return DepthImage(np.divide(total, count, out=np.zeros_like(total), where=count > 0))


def upsample_nearest(d: DepthImage, height: int, width: int) -> DepthImage:
    rows = np.minimum(np.arange(height) * d.height // height, d.height - 1)
    cols = np.minimum(np.arange(width) * d.width // width, d.width - 1)
    return DepthImage(d.data[np.ix_(rows, cols)])


def _offsets(radius: int) -> list:
    r = int(radius)
    offs = [
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if 0 < dy * dy + dx * dx <= radius * radius
    ]
    # distance first, then row-major position of the source pixel
    offs.sort()
    return offs


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[i, j] = a[i + dy, j + dx]``, zero outside the raster."""
    h, w = a.shape
    out = np.zeros_like(a)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy : ye + dy, xs + dx : xe + dx]
    return out


def interpolate_nearest(d: DepthImage, radius: float = FILL_RADIUS) -> DepthImage:
    """Fill empty pixels with the closest return within ``radius`` pixels."""
    src = d.data
    out = src.copy()
    todo = src == 0
    for _, dy, dx in _offsets(radius):
        if not todo.any():
            break
        cand = _shifted(src, dy, dx)
        hit = todo & (cand > 0)
        out[hit] = cand[hit]
        todo &= ~hit
    return DepthImage(out)


def interpolate_linear(d: DepthImage, radius: float = FILL_RADIUS, power: float = 2.0) -> DepthImage:
    """Inverse-distance-weighted fill from returns within ``radius`` pixels."""
    src = d.data.astype(np.float64)
    num = np.zeros_like(src)
    den = np.zeros_like(src)
    for dist2, dy, dx in _offsets(radius):
        cand = _shifted(src, dy, dx)
        w = (cand > 0) / dist2 ** (power / 2.0)
        num += w * cand
        den += w
    out = src.copy()
    fill = (src == 0) & (den > 0)
    out[fill] = num[fill] / den[fill]
    return DepthImage(out)


def density(d: DepthImage) -> float:
    return float(np.count_nonzero(d.data)) / d.data.size


def densify(
    d: DepthImage,
    method: Union[InterpolationMethod, str],
    pooled_size: Optional[tuple] = None,
) -> DepthImage:
    """Densify ``d`` with ``method`` and return a raster of the input size.

    Pooling methods reduce to ``pooled_size`` (default half resolution) and
    then upsample back by nearest neighbour.
    """
    method = InterpolationMethod(method)
    if method is InterpolationMethod.NONE:
        return d
    if method is InterpolationMethod.NEAREST:
        return interpolate_nearest(d)
    if method is InterpolationMethod.LINEAR:
        return interpolate_linear(d)
    out_h, out_w = pooled_size or (max(1, d.height // 2), max(1, d.width // 2))
    pool = adaptive_max_pool if method is InterpolationMethod.MAX_POOL else adaptive_avg_pool
    return upsample_nearest(pool(d, out_h, out_w), d.height, d.width)


def save_depth_image(d: DepthImage, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_depth_image(d))


def encode_depth_image(d: DepthImage) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(f"{d.width} {d.height}\n".encode("ascii"))
    buf.write(d.data.astype("<f4").tobytes())
    return buf.getvalue()


def decode_depth_image(raw: bytes) -> DepthImage:
    if not raw.startswith(_MAGIC):
        raise FormatError("bad depth-image magic")
    nl = raw.find(b"\n", len(_MAGIC))
    if nl < 0:
        raise FormatError("missing depth-image size line")
    try:
        width, height = (int(v) for v in raw[len(_MAGIC) : nl].decode("ascii").split())
    except ValueError as exc:
        raise FormatError(f"bad depth-image size line: {raw[len(_MAGIC):nl]!r}") from exc
    body = raw[nl + 1 :]
    if width < 1 or height < 1 or len(body) != 4 * width * height:
        raise FormatError(f"expected {4 * width * height} data bytes, found {len(body)}")
    return DepthImage(np.frombuffer(body, dtype="<f4").reshape(height, width))


def load_depth_image(path: Union[str, Path]) -> DepthImage:
    return decode_depth_image(Path(path).read_bytes())
