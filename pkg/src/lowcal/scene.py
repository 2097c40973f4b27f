"""Synthetic LiDAR/camera scenes: a ground plane plus random upright boxes.

The LiDAR frame is x forward, y left, z up; the camera frame is x right,
y down, z forward.  Rays are cast from the LiDAR origin (one ring per
channel, evenly spaced azimuths) and from the camera centre (one per
pixel), so both sensors see exactly the same geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Mapping, Tuple

import numpy as np

from .depth_image import CameraIntrinsics
from .geometry import PointCloud, RigidTransform, matrix_to_quat

# LiDAR axes expressed in camera axes: x_cam = -y_lidar, y_cam = -z_lidar, z_cam = x_lidar
LIDAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SceneConfig:
    channels: int = 8
    horizontal_resolution: int = 64
    azimuth_fov: float = 360.0
    vfov_min: float = -25.0
    vfov_max: float = 5.0
    num_boxes: int = 4
    seed: int = 0
    lidar_height: float = 1.5
    max_range: float = 40.0
    range_noise: float = 0.0
    box_distance: Tuple[float, float] = (3.0, 10.0)
    box_size: Tuple[float, float] = (0.6, 2.0)
    image_width: int = 32
    image_height: int = 32
    camera_hfov: float = 60.0
    camera_offset: Tuple[float, float, float] = (0.1, 0.0, -0.1)

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.horizontal_resolution < 1:
            raise ValueError("horizontal_resolution must be >= 1")
        if not 0.0 < self.azimuth_fov <= 360.0:
            raise ValueError("azimuth_fov must lie in (0, 360]")
        if self.num_boxes < 0:
            raise ValueError("num_boxes must be >= 0")
        if not self.vfov_min <= self.vfov_max:
            raise ValueError("vfov_min must not exceed vfov_max")

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str], **overrides) -> "SceneConfig":
        """Build from string-valued config entries named like the fields."""
        kw: Dict[str, object] = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(float(v) for v in raw.split(","))
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        kw.update(overrides)
        return cls(**kw)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.image_width, self.image_height, self.camera_hfov)

    def extrinsic(self) -> RigidTransform:
        """LiDAR-to-camera transform for a camera at ``camera_offset`` (LiDAR frame)."""
        r = LIDAR_TO_CAMERA_AXES
        return RigidTransform(matrix_to_quat(r), -r @ np.asarray(self.camera_offset, float))


@dataclass(frozen=True)
class Box:
    center: np.ndarray  # (3,) LiDAR frame, geometric centre
    half: np.ndarray  # (3,) half extents along the box axes
    yaw: float  # radians about z
    albedo: float


def _random_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list:
    boxes = []
    half_fov = math.radians(cfg.camera_hfov) / 2.0
    for _ in range(cfg.num_boxes):
        dist = rng.uniform(*cfg.box_distance)
        bearing = rng.uniform(-0.8 * half_fov, 0.8 * half_fov)
        size = rng.uniform(cfg.box_size[0], cfg.box_size[1], size=3)
        center = np.array(
            [dist * math.cos(bearing), dist * math.sin(bearing), -cfg.lidar_height + size[2] / 2.0]
        )
        boxes.append(Box(center, size / 2.0, rng.uniform(0.0, math.pi), rng.uniform(0.35, 1.0)))
    return boxes


def _cast(origins: np.ndarray, dirs: np.ndarray, boxes, lidar_height: float, max_range: float):
    """Nearest hit per ray: returns ``(t, normal, albedo, hit_point)``; ``t = inf`` on miss."""
    n = len(dirs)
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros(n)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (-lidar_height - origins[:, 2]) / dz
    ok = (dz < 0) & (tg > 1e-9)
    best = np.where(ok, tg, best)
    normal[ok] = (0.0, 0.0, 1.0)
    albedo[ok] = 0.55

    for box in boxes:
        c, s = math.cos(-box.yaw), math.sin(-box.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        o = (origins - box.center) @ rot.T
        d = dirs @ rot.T
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-box.half - o) * inv
            t2 = (box.half - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter < best)
        if not hit.any():
            continue
        best[hit] = t_enter[hit]
        axis = tmin[hit].argmax(axis=1)
        local_n = np.zeros((hit.sum(), 3))
        local_n[np.arange(len(axis)), axis] = -np.sign(d[hit][np.arange(len(axis)), axis])
        normal[hit] = local_n @ rot  # back to LiDAR frame
        albedo[hit] = box.albedo

    best = np.where(best <= max_range, best, np.inf)
    pts = origins + dirs * np.where(np.isfinite(best), best, 0.0)[:, None]
    return best, normal, albedo, pts


def lidar_directions(cfg: SceneConfig) -> np.ndarray:
    """Unit ray directions, channel-major then azimuth order.

    Azimuths are evenly spaced over ``azimuth_fov`` degrees starting at
    ``-azimuth_fov / 2`` (0 is straight ahead along LiDAR x).
    """
    if cfg.channels == 1:
        elev = np.array([(cfg.vfov_min + cfg.vfov_max) / 2.0])
    else:
        elev = np.linspace(cfg.vfov_min, cfg.vfov_max, cfg.channels)
    fov = math.radians(cfg.azimuth_fov)
    az = np.arange(cfg.horizontal_resolution) * (fov / cfg.horizontal_resolution) - fov / 2.0
    el = np.radians(elev)[:, None]
    d = np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
    )
    return d.reshape(-1, 3)


def _shade(normal, albedo, pts, hit, light):
    diffuse = np.clip(normal @ light, 0.0, None)
    # floor texture: 1 m checker on the ground plane
    ground = hit & (normal[:, 2] > 0.99) & (albedo == 0.55)
    checker = (np.floor(pts[:, 0]) + np.floor(pts[:, 1])) % 2
    tex = np.where(ground, 0.75 + 0.25 * checker, 1.0)
    return albedo * tex * (0.35 + 0.65 * diffuse)


def generate_scene(cfg: SceneConfig):
    """Return ``(cloud, image, gt_extrinsic)`` for one synthetic scene.

    ``cloud`` is in the LiDAR frame with float32-representable coordinates;
    ``image`` is ``(3, h, w)`` in [0, 1], quantised to 8 bits, rendered from
    the camera placed by ``gt_extrinsic``.
    """
    rng = np.random.default_rng(cfg.seed)
    boxes = _random_boxes(cfg, rng)
    light = np.array([-0.4, 0.3, 0.87])
    light /= np.linalg.norm(light)

    dirs = lidar_directions(cfg)
    t, normal, albedo, pts = _cast(np.zeros_like(dirs), dirs, boxes, cfg.lidar_height, cfg.max_range)
    hit = np.isfinite(t)
    if cfg.range_noise > 0:
        pts = pts + dirs * rng.normal(0.0, cfg.range_noise, size=len(dirs))[:, None]
    intensity = np.clip(albedo * (0.4 + 0.6 * np.abs((normal * dirs).sum(axis=1))), 0.0, 1.0)
    cloud = PointCloud(pts[hit].astype(np.float32).astype(np.float64), intensity[hit].astype(np.float32).astype(np.float64))

    k = cfg.intrinsics()
    gt = cfg.extrinsic()
    cam_center = np.asarray(cfg.camera_offset, float)
    v, u = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    rays = rays_cam @ LIDAR_TO_CAMERA_AXES  # camera -> LiDAR axes
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    origins = np.broadcast_to(cam_center, rays.shape)
    tc, nc, ac, pc = _cast(origins, rays, boxes, cfg.lidar_height, np.inf)
    hit_c = np.isfinite(tc)
    gray = np.where(hit_c, _shade(nc, ac, pc, hit_c, light), 0.9)
    # distance haze couples brightness to depth
    haze = np.where(hit_c, np.exp(-np.where(hit_c, tc, 0.0) / 25.0), 0.0)
    gray = np.where(hit_c, gray * haze + 0.9 * (1.0 - haze), gray)
    gray = np.rint(np.clip(gray, 0.0, 1.0) * 255.0) / 255.0
    image = np.repeat(gray.reshape(1, k.height, k.width), 3, axis=0)
    return cloud, image, gt
