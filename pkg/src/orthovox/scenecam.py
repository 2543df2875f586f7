"""World geometry shared by every stage: pinhole cameras, the voxel grid and
the skeleton definition.

Conventions
-----------
* World units are millimeters. ``x`` maps to grid axis ``L``, ``y`` to ``W``
  and ``z`` (height, floor at ``z = 0``) to ``H``.
* A voxel ``(i, j, k)`` is sampled at its center ``origin + (idx + 0.5) * cell``.
* Continuous grid coordinates are ``(p - origin) / cell``; ``floor`` of that is
  the containing cell and the fractional part is what the offset head regresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Ideal pinhole camera.

    ``rotation``/``translation`` map world points into the camera frame:
    ``p_cam = R @ p + t``. The camera looks down its +z axis, image rows grow
    along +y.
    """

    id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]  # (width_px, height_px)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError(f"camera {self.id}: rotation is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if min(self.image_size) <= 0:
            raise ValueError(f"camera {self.id}: image_size must be positive")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["id"], np.array(d["intrinsics"]), np.array(d["rotation"]),
                   np.array(d["translation"]), tuple(d["image_size"]))


def look_at_camera(cam_id: str, eye, target, focal_px: float,
                   image_size: tuple[int, int]) -> Camera:
    """Build a camera at ``eye`` looking at ``target`` with world +z up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w, h = image_size
    K = np.array([[focal_px, 0.0, (w - 1) / 2.0],
                  [0.0, focal_px, (h - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(cam_id, K, R, -R @ eye, image_size)


def ring_cameras(count: int, center, radius: float, height: float, target_height: float,
                 focal_px: float, image_size: tuple[int, int]) -> list[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at the ring axis."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for c in range(count):
        a = 2.0 * np.pi * c / count + np.pi / 4.0
        eye = [center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height]
        target = [center[0], center[1], target_height]
        cams.append(look_at_camera(f"cam{c:02d}", eye, target, focal_px, image_size))
    return cams


def project_point(camera: Camera, world_point) -> tuple[np.ndarray, float, bool]:
    """Project one world point.

    Returns ``(pixel, depth, in_front)``; ``in_front`` is False when the point
    sits on or behind the image plane (depth <= 0). The pixel is still computed
    in that case but is meaningless.
    """
    pix, depth = project_points(camera, np.asarray(world_point, dtype=np.float64)[None])
    return pix[0], float(depth[0]), bool(depth[0] > 0)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of ``(N, 3)`` world points to ``(N, 2)`` pixels and depths."""
    pc = points @ camera.rotation.T + camera.translation
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
        xn = pc[:, 0] / safe
        yn = pc[:, 1] / safe
    K = camera.intrinsics
    u = K[0, 0] * xn + K[0, 1] * yn + K[0, 2]
    v = K[1, 1] * yn + K[1, 2]
    return np.stack([u, v], axis=1), depth


@dataclass(frozen=True)
class VoxelSpace:
    """Axis-aligned voxel grid over a box of world space."""

    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: tuple[float, float, float] = (8000.0, 8000.0, 2000.0)
    resolution: tuple[int, int, int] = (80, 80, 20)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if len(self.origin) != 3 or len(self.extent) != 3 or len(self.resolution) != 3:
            raise ValueError("origin, extent and resolution must have 3 components")
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        if min(self.resolution) < 1:
            raise ValueError("resolution must be >= 1")

    @property
    def cell_size(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.resolution)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.extent) / 2.0

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        lo = np.asarray(self.origin)
        return bool(np.all(p >= lo) and np.all(p < lo + np.asarray(self.extent)))

    def centers(self) -> np.ndarray:
        """All voxel centers as an ``(L*W*H, 3)`` array in C order of ``(i, j, k)``."""
        axes = [self.origin[a] + (np.arange(self.resolution[a]) + 0.5) * self.cell_size[a]
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "extent": list(self.extent),
                "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelSpace":
        return cls(tuple(d["origin"]), tuple(d["extent"]), tuple(d["resolution"]))


def cube_space(center, edge_mm: float, resolution: int) -> VoxelSpace:
    """Cubic space of side ``edge_mm`` centered at ``center`` with equal per-axis counts."""
    center = np.asarray(center, dtype=np.float64)
    origin = center - edge_mm / 2.0
    return VoxelSpace(tuple(origin), (edge_mm,) * 3, (resolution,) * 3)


def voxel_center(space: VoxelSpace, index) -> np.ndarray:
    idx = np.asarray(index)
    res = np.asarray(space.resolution)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= res):
        raise IndexError(f"voxel index {tuple(index)} outside resolution {space.resolution}")
    return np.asarray(space.origin) + (idx + 0.5) * space.cell_size


def world_to_continuous_grid(space: VoxelSpace, point) -> np.ndarray:
    return (np.asarray(point, dtype=np.float64) - np.asarray(space.origin)) / space.cell_size


@dataclass(frozen=True)
class SkeletonDef:
    joint_names: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        k = len(self.joint_names)
        for a, b in self.limbs:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"limb ({a}, {b}) references a joint outside 0..{k - 1}")
            if a == b:
                raise ValueError(f"limb ({a}, {b}) is a self-loop")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def to_dict(self) -> dict:
        return {"joint_names": list(self.joint_names), "limbs": [list(l) for l in self.limbs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonDef":
        return cls(tuple(d["joint_names"]), tuple(tuple(l) for l in d["limbs"]))


# CMU Panoptic 15-joint layout.
CMU15 = SkeletonDef(
    joint_names=("neck", "nose", "mid_hip", "l_shoulder", "l_elbow", "l_wrist", "l_hip",
                 "l_knee", "l_ankle", "r_shoulder", "r_elbow", "r_wrist", "r_hip",
                 "r_knee", "r_ankle"),
    limbs=((0, 1), (0, 2), (0, 3), (3, 4), (4, 5), (0, 9), (9, 10), (10, 11),
           (2, 6), (2, 12), (6, 7), (7, 8), (12, 13), (13, 14)),
)


@dataclass
class PoseSkeleton:
    joints: np.ndarray  # (K, 3) mm
    valid: np.ndarray = field(default=None)  # (K,) bool

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if self.valid is None:
            self.valid = np.ones(len(self.joints), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (len(self.joints),):
            raise ValueError("valid mask must have one entry per joint")
        if not np.all(np.isfinite(self.joints[self.valid])):
            raise ValueError("valid joints must have finite coordinates")


def root_joint(pose: PoseSkeleton, skeleton: SkeletonDef = CMU15) -> np.ndarray:
    """Root = midpoint of the two hips when both are valid, otherwise joint 0."""
    names = skeleton.joint_names
    if "l_hip" in names and "r_hip" in names:
        lh, rh = names.index("l_hip"), names.index("r_hip")
        if pose.valid[lh] and pose.valid[rh]:
            return (pose.joints[lh] + pose.joints[rh]) / 2.0
    return pose.joints[0].copy()
