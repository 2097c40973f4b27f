"""Training, single/multi-stage calibration and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .batching import (
    MiscalibRange,
    TrainingSample,
    compose_scl_batch,
    make_samples,
    miscalibration_for,
    regression_target,
    sample_miscalibration,
)
from .depth_image import CameraIntrinsics, FormatError, InterpolationMethod, densify, project_cloud
from .geometry import (
    PointCloud,
    Quaternion,
    RigidTransform,
    quat_compose,
    quat_to_euler,
    subsample_uniform,
    transform_compose,
)
from .losses import (
    LossWeights,
    SclConfig,
    calibration_loss,
    cloud_distance_loss,
    supervised_contrastive_loss,
    total_loss,
)
from .network import NetworkConfig, forward, init_params, load_checkpoint, save_checkpoint
from .io import load_cloud, load_image, load_transform, save_cloud, save_image, save_transform
from .optim import Adam
from .scene import SceneConfig, generate_scene

log = logging.getLogger(__name__)

# cap on points per cloud entering the cloud-distance loss
CLOUD_LOSS_POINTS = 256
MANIFEST_FORMAT = "lowcal-scenes/1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the state at the failing step."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class Model:
    params: dict
    cfg: NetworkConfig
    interpolation: InterpolationMethod = InterpolationMethod.MAX_POOL
    intrinsics: Optional[CameraIntrinsics] = None  # camera the model was trained for

    def save(self, path: Union[str, Path]) -> None:
        extra = {"interpolation": self.interpolation.value}
        if self.intrinsics is not None:
            k = self.intrinsics
            extra["intrinsics"] = ",".join(repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy)) + f",{k.width},{k.height}"
        save_checkpoint(self.params, self.cfg, path, extra)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Model":
        params, cfg, extra = load_checkpoint(path)
        k = None
        if "intrinsics" in extra:
            v = extra["intrinsics"].split(",")
            k = CameraIntrinsics(*(float(i) for i in v[:4]), int(v[4]), int(v[5]))
        return cls(params, cfg, InterpolationMethod(extra.get("interpolation", "max")), k)

    @classmethod
    def initial(cls, cfg: NetworkConfig, seed: int = 0, interpolation=InterpolationMethod.MAX_POOL) -> "Model":
        return cls(init_params(cfg, seed), cfg, InterpolationMethod(interpolation))


@dataclass
class SceneSet:
    """Scenes as ``(lidar_cloud, image, gt_extrinsic)`` triples sharing one camera."""

    scenes: list
    intrinsics: CameraIntrinsics

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, k):
        return self.scenes[k]

    @classmethod
    def generate(cls, cfg: SceneConfig, count: int, first_seed: int = 0, subsample: int = 1) -> "SceneSet":
        scenes = []
        for i in range(count):
            cloud, image, gt = generate_scene(replace(cfg, seed=first_seed + i))
            if subsample > 1:
                cloud = subsample_uniform(cloud, subsample)
            scenes.append((cloud, image, gt))
        return cls(scenes, cfg.intrinsics())

    def save(self, out_dir: Union[str, Path], prefix: str = "scene") -> Path:
        """Write each triple as ``<prefix>_NNNN.{bin,ppm,ext}`` plus ``manifest.json``; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (cloud, image, gt) in enumerate(self.scenes):
            stem = f"{prefix}_{i:04d}"
            save_cloud(cloud, out / f"{stem}.bin")
            save_image(image, out / f"{stem}.ppm")
            save_transform(gt, out / f"{stem}.ext")
            entries.append({"cloud": f"{stem}.bin", "image": f"{stem}.ppm", "extrinsic": f"{stem}.ext"})
        k = self.intrinsics
        manifest = {
            "format": MANIFEST_FORMAT,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            "scenes": entries,
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, manifest: Union[str, Path]) -> "SceneSet":
        path = Path(manifest)
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
            k = CameraIntrinsics(**meta["intrinsics"])
            entries = meta["scenes"]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed scene manifest ({exc})") from exc
        if meta.get("format") != MANIFEST_FORMAT:
            raise FormatError(f"{path}: unsupported manifest format {meta.get('format')!r}")
        base = path.parent
        scenes = [
            (load_cloud(base / e["cloud"]), load_image(base / e["image"]), load_transform(base / e["extrinsic"]))
            for e in entries
        ]
        return cls(scenes, k)


@dataclass(frozen=True)
class TrainConfig:
    range: MiscalibRange = MiscalibRange(10, 1)
    epochs: int = 10
    steps_per_epoch: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    interpolation: InterpolationMethod = InterpolationMethod.MAX_POOL
    scl_enabled: bool = False
    weights: LossWeights = LossWeights()
    scl: SclConfig = SclConfig()
    seed: int = 0
    network: NetworkConfig = NetworkConfig()
    scale_outputs: bool = True
    lr_schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "interpolation", InterpolationMethod(self.interpolation))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps_per_epoch < 0:
            raise ValueError("steps_per_epoch must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.scl_enabled and self.batch_size < 2:
            raise ValueError("contrastive training needs batch size >= 2 (b = 1 has no negatives)")


@dataclass
class CalibrationMetrics:
    """Mean absolute errors: translation in cm, rotation in degrees."""

    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float

    @property
    def avg_translation(self) -> float:
        return (self.x + self.y + self.z) / 3.0

    @property
    def avg_rotation(self) -> float:
        return (self.roll + self.pitch + self.yaw) / 3.0

    def as_row(self) -> Tuple[float, ...]:
        return (self.x, self.y, self.z, self.roll, self.pitch, self.yaw, self.avg_translation, self.avg_rotation)


@dataclass(frozen=True, eq=False)
class EvalCase:
    scene: int
    mis: RigidTransform


@dataclass
class TrainResult:
    model: Model
    losses: List[Tuple[int, int, float]] = field(default_factory=list)
    val_metrics: List[CalibrationMetrics] = field(default_factory=list)


# ----------------------------------------------------------------------------
# input preparation


def depth_input(cloud_cam: PointCloud, k: CameraIntrinsics, method: InterpolationMethod) -> np.ndarray:
    """Projected and densified depth raster for a camera-frame cloud."""
    return densify(project_cloud(cloud_cam, k), method).data.astype(np.float64)


def _loss_points(cloud: PointCloud) -> np.ndarray:
    step = max(1, math.ceil(len(cloud) / CLOUD_LOSS_POINTS))
    return cloud.points[::step]


def _prepare(scenes: SceneSet, pairs, method):
    """Network inputs for ``(scene index, miscalibration)`` pairs."""
    rgb, depth, clouds = [], [], []
    k = scenes.intrinsics
    for idx, mis in pairs:
        cloud, image, gt = scenes[idx]
        cam = cloud.transformed(transform_compose(mis, gt))
        rgb.append(image)
        depth.append(depth_input(cam, k, method)[None])
        clouds.append(cam)
    return np.stack(rgb), np.stack(depth), clouds


# ----------------------------------------------------------------------------
# training


def output_scales(rng_range: MiscalibRange) -> dict:
    """Head output units matched to a range: meters per unit and quaternion units per unit."""
    return {
        "trans_scale": rng_range.max_translation / 100.0,
        "rot_scale": math.sin(math.radians(rng_range.max_rotation) / 2.0),
    }


def make_eval_cases(scenes: SceneSet, rng_range: MiscalibRange, seed: int, per_scene: int = 1) -> List[EvalCase]:
    rng = np.random.default_rng(seed)
    return [EvalCase(k, sample_miscalibration(rng, rng_range)) for k in range(len(scenes)) for _ in range(per_scene)]


def _step_pairs(cfg: TrainConfig, samples: Sequence[TrainingSample], scene_idx: Sequence[int]):
    """Returns ``(pairs, rot_labels, trans_labels)`` for one optimisation step."""
    if cfg.scl_enabled:
        batch = compose_scl_batch(samples)
        pairs = [(scene_idx[kk], miscalibration_for(samples, i, j)) for kk, i, j in batch.entries]
        return pairs, batch.rot_labels, batch.trans_labels
    pairs = [(scene_idx[kk], miscalibration_for(samples, kk, kk)) for kk in range(len(samples))]
    return pairs, None, None


def compute_loss(model: Model, cfg: TrainConfig, scenes: SceneSet, pairs, rot_labels=None, trans_labels=None):
    """Total loss and its parts for one batch of ``(scene, miscalibration)`` pairs."""
    rgb, depth, clouds = _prepare(scenes, pairs, model.interpolation)
    out = forward(model.params, model.cfg, rgb, depth)
    targets = [regression_target(mis) for _, mis in pairs]
    gt_q = [t.rotation for t in targets]
    gt_t = np.array([t.translation for t in targets])
    calib = calibration_loss(out.quat, out.trans, gt_q, gt_t, cfg.weights.quat_mix)
    cloud = cloud_distance_loss([_loss_points(c) for c in clouds], out.quat, out.trans, targets)
    scl_r = scl_t = 0.0
    if rot_labels is not None:
        scl_r = supervised_contrastive_loss(out.rot_feature, rot_labels, cfg.scl)
        scl_t = supervised_contrastive_loss(out.trans_feature, trans_labels, cfg.scl)
    total = total_loss(calib, cloud, scl_r, scl_t, cfg.weights)
    parts = {
        "calib": calib.item(),
        "cloud": cloud.item(),
        "scl_rot": float(getattr(scl_r, "item", lambda: scl_r)()),
        "scl_trans": float(getattr(scl_t, "item", lambda: scl_t)()),
    }
    return total, parts, out


def train_single_stage(
    cfg: TrainConfig,
    scenes: SceneSet,
    val_scenes: Optional[SceneSet] = None,
    val_cases: Optional[Sequence[EvalCase]] = None,
    on_step: Optional[Callable[[int, int, float], None]] = None,
    init: Optional[Model] = None,
) -> TrainResult:
    """Train one model for one miscalibration range.

    Each step draws ``b`` scenes and ``b`` perturbations; with contrastive
    training enabled the step runs on the composed ``b³`` batch.
    """
    if len(scenes) == 0:
        raise ValueError("no training scenes")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if init is None:
        net = replace(cfg.network, **output_scales(cfg.range)) if cfg.scale_outputs else cfg.network
        init = Model.initial(net, int(seeds[0].generate_state(1)[0]), cfg.interpolation)
    model = replace(init, interpolation=cfg.interpolation, intrinsics=scenes.intrinsics)
    rng = np.random.default_rng(seeds[1])
    opt = Adam(model.params.values(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(model)
    step = 0
    total_steps = cfg.epochs * cfg.steps_per_epoch
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            if cfg.lr_schedule == "cosine":
                opt.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            scene_idx = rng.integers(0, len(scenes), size=cfg.batch_size)
            samples = make_samples(scenes, scene_idx, rng, cfg.range)
            pairs, rl, tl = _step_pairs(cfg, samples, list(range(cfg.batch_size)))
            pairs = [(int(scene_idx[k]), mis) for k, mis in pairs]
            opt.zero_grad()
            loss, parts, _ = compute_loss(model, cfg, scenes, pairs, rl, tl)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}: {parts}",
                    {"epoch": epoch, "step": step, "parts": parts, "params": {k: v.data.copy() for k, v in model.params.items()}},
                )
            loss.backward()
            opt.step()
            result.losses.append((epoch, step, value))
            if on_step is not None:
                on_step(epoch, step, value)
            step += 1
        if val_scenes is not None and val_cases:
            m = evaluate(model, val_scenes, val_cases)
            result.val_metrics.append(m)
            log.info("epoch %d: avg_t %.3f cm, avg_r %.3f deg", epoch, m.avg_translation, m.avg_rotation)
    return result


# ----------------------------------------------------------------------------
# inference


def _output_to_transform(q_row: np.ndarray, t_row: np.ndarray) -> RigidTransform:
    return RigidTransform(Quaternion.from_array(q_row), t_row)


def calibrate_batch(model: Model, images: np.ndarray, clouds: Sequence[PointCloud], k: CameraIntrinsics) -> List[RigidTransform]:
    depth = np.stack([depth_input(c, k, model.interpolation)[None] for c in clouds])
    out = forward(model.params, model.cfg, np.asarray(images, dtype=np.float64), depth)
    return [_output_to_transform(q, t) for q, t in zip(out.quat.data, out.trans.data)]


def calibrate_single(model: Model, image: np.ndarray, cloud: PointCloud, k: CameraIntrinsics) -> RigidTransform:
    """One forward pass on a camera-frame (miscalibrated) cloud; returns the correction."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, model.cfg.height, model.cfg.width):
        raise ValueError(f"image shape {image.shape} does not match model input {(3, model.cfg.height, model.cfg.width)}")
    return calibrate_batch(model, image[None], [cloud], k)[0]


@dataclass
class StageChain:
    """Models ordered from the widest to the narrowest miscalibration range."""

    stages: List[Tuple[MiscalibRange, Model]]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a stage chain needs at least one stage")
        for (a, _), (b, _) in zip(self.stages, self.stages[1:]):
            if not (b.max_translation < a.max_translation and b.max_rotation < a.max_rotation):
                raise ValueError(f"stage ranges must strictly decrease, got {a} then {b}")

    @property
    def models(self) -> List[Model]:
        return [m for _, m in self.stages]

    @classmethod
    def from_models(cls, models: Sequence[Model]) -> "StageChain":
        """Chain without recorded ranges; order is taken as given."""
        n = len(models)
        return cls([(MiscalibRange(float(n - i), float(n - i)), m) for i, m in enumerate(models)])


def calibrate_multistage_batch(chain, images, clouds: Sequence[PointCloud], k: CameraIntrinsics) -> List[RigidTransform]:
    models = chain.models if isinstance(chain, StageChain) else list(chain)
    if not models:
        raise ValueError("empty stage chain")
    acc = [RigidTransform.identity() for _ in clouds]
    current = list(clouds)
    for i, model in enumerate(models):
        corr = calibrate_batch(model, images, current, k)
        acc = [transform_compose(c, a) for c, a in zip(corr, acc)] if i else corr
        if i + 1 < len(models):
            current = [c.transformed(a) for c, a in zip(clouds, acc)]
    return acc


def calibrate_multistage(chain, image: np.ndarray, cloud: PointCloud, k: CameraIntrinsics) -> RigidTransform:
    """Refine sequentially: each stage sees the cloud re-projected under all previous corrections."""
    models = chain.models if isinstance(chain, StageChain) else list(chain)
    if not models:
        raise ValueError("empty stage chain")
    acc = None
    current = cloud
    for model in models:
        corr = calibrate_single(model, image, current, k)
        acc = corr if acc is None else transform_compose(corr, acc)
        current = cloud.transformed(acc)
    return acc


# ----------------------------------------------------------------------------
# evaluation


def residual_errors(pred: RigidTransform, true: RigidTransform) -> np.ndarray:
    """Per-axis absolute errors ``(x, y, z)`` in cm and ``(roll, pitch, yaw)`` in degrees."""
    t_err = np.abs(pred.translation - true.translation) * 100.0
    e = quat_to_euler(quat_compose(pred.rotation.conjugate(), true.rotation))
    return np.concatenate([t_err, np.abs(e.as_array())])


def metrics_from_errors(errors: np.ndarray) -> CalibrationMetrics:
    errors = np.asarray(errors, dtype=np.float64).reshape(-1, 6)
    if len(errors) == 0:
        raise ValueError("no errors to average")
    return CalibrationMetrics(*(float(v) for v in errors.mean(axis=0)))


def evaluate(predictor, scenes: SceneSet, cases: Sequence[EvalCase], batch: int = 32) -> CalibrationMetrics:
    """Mean absolute error of ``predictor`` against the true corrections.

    ``predictor`` is a :class:`Model`, a :class:`StageChain` / model list, or
    a callable ``(images, camera_clouds) -> corrections``.
    """
    if not cases:
        raise ValueError("empty test set")
    if isinstance(predictor, Model):
        predict = lambda imgs, clouds: calibrate_batch(predictor, imgs, clouds, scenes.intrinsics)  # noqa: E731
    elif isinstance(predictor, (StageChain, list, tuple)):
        predict = lambda imgs, clouds: calibrate_multistage_batch(predictor, imgs, clouds, scenes.intrinsics)  # noqa: E731
    else:
        predict = predictor
    errs = []
    for start in range(0, len(cases), batch):
        chunk = cases[start : start + batch]
        images, clouds = [], []
        for c in chunk:
            cloud, image, gt = scenes[c.scene]
            images.append(image)
            clouds.append(cloud.transformed(transform_compose(c.mis, gt)))
        preds = predict(np.stack(images), clouds)
        errs.extend(residual_errors(p, regression_target(c.mis)) for p, c in zip(preds, chunk))
    return metrics_from_errors(np.array(errs))
