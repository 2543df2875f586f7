"""Synthetic multi-person scenes: articulated poses placed in the voxel space,
ring cameras, and analytic per-camera joint heatmaps standing in for a 2D
pose backbone.

A scene on disk is a directory holding ``scene.json`` (format tag, cameras,
skeleton, generator config, per-frame poses in mm) and, optionally, one
``heatmaps/<frame>.ovxt`` tensor of shape ``(C, K, height, width)`` per frame.
Frames without stored heatmaps are re-rendered deterministically on read.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .scenecam import CMU15, Camera, PoseSkeleton, SkeletonDef, VoxelSpace, project_points, ring_cameras
from .volume import TensorFileError, read_tensor, write_tensor

SCENE_FORMAT = "OVXS"
SCENE_VERSION = 1


class SceneFileError(ValueError):
    pass


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    min_persons: int = 1
    max_persons: int = 4
    space: VoxelSpace = field(default_factory=VoxelSpace)
    camera_count: int = 5
    ring_radius: float = 7500.0
    camera_height: float = 2500.0
    camera_target_height: float = 900.0
    focal_px: float = 134.0
    image_size: tuple[int, int] = (320, 240)
    sigma_px: float = 2.5
    dropout_prob: float = 0.0
    jitter_px: float = 0.0
    min_center_distance: float = 600.0
    placement_margin: float = 800.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_attempts: int = 2000

    def __post_init__(self):
        if isinstance(self.space, dict):
            self.space = VoxelSpace.from_dict(self.space)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.min_persons < 0 or self.max_persons < self.min_persons:
            raise ValueError("person count range must satisfy 0 <= min_persons <= max_persons")
        if self.camera_count < 1:
            raise ValueError("camera_count must be >= 1")
        if self.sigma_px <= 0:
            raise ValueError("sigma_px must be positive")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")

    def cameras(self) -> list[Camera]:
        return ring_cameras(self.camera_count, self.space.center, self.ring_radius, self.camera_height,
                            self.camera_target_height, self.focal_px, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"] = self.space.to_dict()
        d["image_size"] = list(self.image_size)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class Frame:
    frame_id: int
    poses: list[PoseSkeleton]
    heatmaps: list[np.ndarray]  # per camera (K, height, width)


# --------------------------------------------------------------------------
# poses
# --------------------------------------------------------------------------

def _limb_dir(fwd, side, flex, abd):
    """Unit vector hanging down, swung forward by ``flex`` and out by ``abd`` (radians)."""
    up = np.array([0.0, 0.0, 1.0])
    return math.cos(abd) * (math.sin(flex) * fwd - math.cos(flex) * up) + math.sin(abd) * side


def sample_pose(rng: np.random.Generator, root_xy, scale: float = 1.0) -> PoseSkeleton:
    """Standing/walking/reaching pose in the CMU 15-joint layout, feet near the floor."""
    yaw = rng.uniform(-math.pi, math.pi)
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    left = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    s = scale
    pitch = math.radians(rng.uniform(-10, 30))
    roll = math.radians(rng.uniform(-10, 10))
    trunk = math.cos(pitch) * math.cos(roll) * up + math.sin(pitch) * fwd + math.sin(roll) * left
    trunk /= np.linalg.norm(trunk)

    J = np.zeros((15, 3))
    J[2] = 0.0  # mid_hip at local origin
    J[0] = J[2] + 500 * s * trunk
    J[1] = J[0] + 170 * s * trunk + 80 * s * fwd
    for side_sign, (sh, el, wr, hp, kn, an) in ((1, (3, 4, 5, 6, 7, 8)), (-1, (9, 10, 11, 12, 13, 14))):
        side = side_sign * left
        J[sh] = J[0] + 180 * s * side - 20 * s * trunk
        flex = math.radians(rng.uniform(-40, 120))
        abd = math.radians(rng.uniform(0, 80))
        elbow = math.radians(rng.uniform(0, 120))
        J[el] = J[sh] + 280 * s * _limb_dir(fwd, side, flex, abd)
        J[wr] = J[el] + 250 * s * _limb_dir(fwd, side, flex + elbow, abd)
        J[hp] = J[2] + 100 * s * side
        hflex = math.radians(rng.uniform(-30, 60))
        habd = math.radians(rng.uniform(0, 20))
        knee = math.radians(rng.uniform(0, 90))
        J[kn] = J[hp] + 420 * s * _limb_dir(fwd, side, hflex, habd)
        J[an] = J[kn] + 410 * s * _limb_dir(fwd, side, hflex - knee, habd)
    J[:, 2] += 80.0 * s - min(J[8, 2], J[14, 2])
    root = (J[6] + J[12]) / 2.0
    J[:, 0] += root_xy[0] - root[0]
    J[:, 1] += root_xy[1] - root[1]
    return PoseSkeleton(J)


def _xy_extent(pose: PoseSkeleton):
    j = pose.joints[pose.valid]
    return j[:, 0].min(), j[:, 0].max(), j[:, 1].min(), j[:, 1].max()


def _overlap(a, b) -> bool:
    return not (a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2])


def place_poses(config: SceneConfig, rng: np.random.Generator, count: int) -> list[PoseSkeleton]:
    """Rejection-sample ``count`` poses with disjoint BEV joint extents and spread roots."""
    sp = config.space
    lo = np.asarray(sp.origin[:2]) + config.placement_margin
    hi = np.asarray(sp.origin[:2]) + np.asarray(sp.extent[:2]) - config.placement_margin
    poses, roots, extents = [], [], []
    attempts = 0
    while len(poses) < count:
        attempts += 1
        if attempts > config.max_attempts:
            raise SceneGenerationError(
                f"could not place {count} persons within {config.max_attempts} attempts")
        xy = rng.uniform(lo, hi)
        if any(np.hypot(*(xy - r)) < config.min_center_distance for r in roots):
            continue
        pose = sample_pose(rng, xy, rng.uniform(*config.scale_range))
        ext = _xy_extent(pose)
        if any(_overlap(ext, e) for e in extents):
            continue
        inside = (pose.joints[:, :2] >= sp.origin[:2]) & (pose.joints[:, :2] < np.add(sp.origin[:2], sp.extent[:2]))
        if not inside.all():
            continue
        poses.append(pose)
        roots.append(xy)
        extents.append(ext)
    return poses


# --------------------------------------------------------------------------
# heatmaps
# --------------------------------------------------------------------------

# tails past this many sigmas are zeroed; untruncated tails underflow to
# float32 subnormals, which slow every downstream conv several-fold
TRUNCATE_SIGMAS = 5.0


def _gauss_1d(grid: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    d = grid - mu
    g = np.exp(-(d ** 2) / (2 * sigma ** 2))
    g[np.abs(d) > TRUNCATE_SIGMAS * sigma] = 0.0
    return g


def render_heatmaps(poses: Iterable[PoseSkeleton], cameras: list[Camera], sigma_px: float,
                    K: int = 15, dropout_prob: float = 0.0, jitter_px: float = 0.0,
                    rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Unit-peak Gaussian blobs at each joint's projection, max-combined across persons.

    Blobs are truncated at ``TRUNCATE_SIGMAS`` along each image axis.

    Joints behind a camera or projecting outside its image are omitted. Dropout
    and jitter draw from ``rng`` and are skipped entirely when both are zero.
    """
    poses = list(poses)
    noisy = dropout_prob > 0 or jitter_px > 0
    if noisy and rng is None:
        raise ValueError("an rng is required for dropout/jitter")
    out = []
    for cam in cameras:
        w, h = cam.image_size
        hm = np.zeros((K, h, w), dtype=np.float32)
        us = np.arange(w, dtype=np.float64)
        vs = np.arange(h, dtype=np.float64)
        for pose in poses:
            pix, depth = project_points(cam, pose.joints)
            for k in range(K):
                if not pose.valid[k] or depth[k] <= 0:
                    continue
                u, v = pix[k]
                if noisy:
                    if rng.random() < dropout_prob:
                        continue
                    if jitter_px > 0:
                        u, v = u + rng.normal(0, jitter_px), v + rng.normal(0, jitter_px)
                if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
                    continue
                gu = _gauss_1d(us, u, sigma_px)
                gv = _gauss_1d(vs, v, sigma_px)
                np.maximum(hm[k], np.outer(gv, gu).astype(np.float32), out=hm[k])
        out.append(hm)
    return out


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_id)])


def sample_scene(config: SceneConfig, seed: int, frame_id: int = 0, render: bool = True) -> Frame:
    """One frame, fully determined by ``(seed, frame_id)``."""
    rng = frame_rng(seed, frame_id)
    count = int(rng.integers(config.min_persons, config.max_persons + 1))
    poses = place_poses(config, rng, count)
    heatmaps = render_frame_heatmaps(config, poses, seed, frame_id) if render else []
    return Frame(frame_id, poses, heatmaps)


def render_frame_heatmaps(config: SceneConfig, poses, seed: int, frame_id: int) -> list[np.ndarray]:
    noise_rng = np.random.default_rng([int(seed), int(frame_id), 1])
    return render_heatmaps(poses, config.cameras(), config.sigma_px, K=CMU15.joint_count,
                           dropout_prob=config.dropout_prob, jitter_px=config.jitter_px, rng=noise_rng)


def generate_frames(config: SceneConfig, seed: int, count: int, start: int = 0,
                    render: bool = True) -> Iterator[Frame]:
    for fid in range(start, start + count):
        yield sample_scene(config, seed, fid, render=render)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _scene_dir(path) -> Path:
    p = Path(path)
    return p.parent if p.name == "scene.json" else p


def write_scene(path, config: SceneConfig, seed: int, frames: Iterable[Frame],
                store_heatmaps: bool = True, extra: dict | None = None) -> Path:
    root = _scene_dir(path)
    root.mkdir(parents=True, exist_ok=True)
    if store_heatmaps:
        (root / "heatmaps").mkdir(exist_ok=True)
    records = []
    for fr in frames:
        rec = {"frame_id": fr.frame_id,
               "poses": [{"joints": p.joints.tolist(), "valid": p.valid.astype(int).tolist()}
                         for p in fr.poses],
               "heatmaps": None}
        if store_heatmaps:
            if not fr.heatmaps:
                raise ValueError(f"frame {fr.frame_id} has no rendered heatmaps to store")
            rel = f"heatmaps/{fr.frame_id:06d}.ovxt"
            write_tensor(root / rel, np.stack(fr.heatmaps))
            rec["heatmaps"] = rel
        records.append(rec)
    header = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": int(seed),
        "config": config.to_dict(),
        "skeleton": CMU15.to_dict(),
        "cameras": [c.to_dict() for c in config.cameras()],
        "frames": records,
    }
    if extra:
        header["extra"] = extra
    (root / "scene.json").write_text(json.dumps(header, indent=1))
    return root


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    cameras: list[Camera]
    skeleton: SkeletonDef
    root: Path
    records: list[dict]
    header: dict

    def __len__(self):
        return len(self.records)

    def frames(self, render_missing: bool = True) -> Iterator[Frame]:
        for rec in self.records:
            yield self.frame(rec, render_missing)

    def frame(self, rec: dict, render_missing: bool = True) -> Frame:
        poses = [PoseSkeleton(np.array(p["joints"], dtype=np.float64), np.array(p["valid"], dtype=bool))
                 for p in rec["poses"]]
        if rec["heatmaps"] is not None:
            try:
                stack = read_tensor(self.root / rec["heatmaps"])
            except (OSError, TensorFileError) as exc:
                raise SceneFileError(f"frame {rec['frame_id']}: {exc}") from exc
            heatmaps = list(stack)
        elif render_missing:
            heatmaps = render_frame_heatmaps(self.config, poses, self.seed, rec["frame_id"])
        else:
            heatmaps = []
        return Frame(int(rec["frame_id"]), poses, heatmaps)


def read_scene(path) -> Scene:
    root = _scene_dir(path)
    try:
        header = json.loads((root / "scene.json").read_text())
    except FileNotFoundError as exc:
        raise SceneFileError(f"{root}: no scene.json") from exc
    except json.JSONDecodeError as exc:
        raise SceneFileError(f"{root}/scene.json: truncated or malformed ({exc})") from exc
    if header.get("format") != SCENE_FORMAT:
        raise SceneFileError(f"{root}: not a scene file (format {header.get('format')!r})")
    if header.get("version") != SCENE_VERSION:
        raise SceneFileError(f"{root}: unsupported scene version {header.get('version')}")
    config = SceneConfig(**header["config"])
    cameras = [Camera.from_dict(c) for c in header["cameras"]]
    return Scene(config, int(header["seed"]), cameras, SkeletonDef.from_dict(header["skeleton"]),
                 root, header["frames"], header)
