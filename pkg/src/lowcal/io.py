"""File formats: binary LiDAR scans, PPM images, flat key-value configs, extrinsics."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .depth_image import FormatError
from .geometry import PointCloud, RigidTransform

PathLike = Union[str, Path]


class ConfigError(ValueError):
    """Malformed key-value config; the message names the offending line."""


def encode_cloud(pc: PointCloud) -> bytes:
    """Consecutive little-endian float32 ``(x, y, z, intensity)`` records."""
    n = len(pc)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = pc.points
    if pc.intensity is not None:
        rec[:, 3] = pc.intensity
    return rec.tobytes()


def decode_cloud(raw: bytes) -> PointCloud:
    if len(raw) % 16:
        raise FormatError(f"cloud file length {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def save_cloud(pc: PointCloud, path: PathLike) -> None:
    Path(path).write_bytes(encode_cloud(pc))


def load_cloud(path: PathLike) -> PointCloud:
    return decode_cloud(Path(path).read_bytes())


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 with maxval 255 from a ``(3, h, w)`` array in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be (3, h, w), got {img.shape}")
    _, h, w = img.shape
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    if not raw.startswith(b"P6"):
        raise FormatError("bad PPM magic (expected P6)")
    pos = 2
    vals = []
    for _ in range(3):
        m = _PPM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError("truncated PPM header")
        try:
            vals.append(int(m.group(1)))
        except ValueError as exc:
            raise FormatError(f"bad PPM header token {m.group(1)!r}") from exc
        pos = m.end()
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:]
    if len(body) != 3 * w * h:
        raise FormatError(f"expected {3 * w * h} pixel bytes, found {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(image: np.ndarray, path: PathLike) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_image(path: PathLike) -> np.ndarray:
    """Load a P6 PPM as a float64 ``(3, h, w)`` array in [0, 1]."""
    return decode_ppm(Path(path).read_bytes())


def save_transform(t: RigidTransform, path: PathLike) -> None:
    """One line ``qw qx qy qz tx ty tz`` with round-trip float formatting."""
    Path(path).write_text(" ".join(repr(float(v)) for v in t.as_array()) + "\n", encoding="utf-8")


def load_transform(path: PathLike) -> RigidTransform:
    text = Path(path).read_text(encoding="utf-8").split()
    if len(text) != 7:
        raise FormatError(f"{path}: expected 7 numbers, found {len(text)}")
    return RigidTransform.from_array([float(v) for v in text])


def parse_kv_lines(text: str, source: str = "<config>") -> Dict[str, Tuple[str, int]]:
    """Parse ``key = value`` lines into ``key -> (value, line number)``.

    ``#`` starts a comment and blank lines are skipped.
    """
    out: Dict[str, Tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    return {k: v for k, (v, _) in parse_kv_lines(text, source).items()}


def load_kv(path: PathLike) -> Dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(encoding="utf-8"), source=str(p))
