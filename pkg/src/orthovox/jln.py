"""Per-person joint localization: tri-plane heatmap estimation, center-of-mass
decoding, pairwise confidence-weighted fusion into 3D, and the JLN losses.

Plane coordinates are grid indices of the person cube (voxel ``n`` has
coordinate ``n``); world = cube origin + coord * cell + cell / 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenecam import PoseSkeleton, VoxelSpace
from .volume import (FeatureVolume, build_person_volume, mask_person_volume,
                     project_triplanes)

PLANES = ("xy", "xz", "yz")
LAMBDA_CONF = 1.0

# (plane, column of that plane's coords) feeding each world axis
ROUTES = {
    0: ((0, 0), (1, 0)),  # x: xy[:, 0], xz[:, 0]
    1: ((0, 1), (2, 0)),  # y: xy[:, 1], yz[:, 0]
    2: ((1, 1), (2, 1)),  # z: xz[:, 1], yz[:, 1]
}


@dataclass
class PlanePoseEstimate:
    tag: str
    heatmaps: np.ndarray  # (K, A, B)
    coords: np.ndarray  # (K, 2)


@dataclass
class FusionWeights:
    logits: np.ndarray  # (3, K) in plane order xy, xz, yz

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[0] != 3:
            raise ValueError(f"fusion logits must be (3, K), got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("fusion logits must be finite")


@dataclass
class FusedPose:
    joints: np.ndarray  # (K, 3) world mm
    pair_weights: np.ndarray  # (K, 3, 2): per axis, weights of its two planes
    low_confidence: np.ndarray = field(default=None)  # (K,) bool

    def __post_init__(self):
        if self.low_confidence is None:
            self.low_confidence = np.zeros(len(self.joints), dtype=bool)

    def to_dict(self, person_id: int) -> dict:
        return {"person_id": int(person_id), "joints_mm": self.joints.round(6).tolist(),
                "pair_weights": self.pair_weights.round(6).tolist(),
                "low_confidence": [bool(b) for b in self.low_confidence]}


# --------------------------------------------------------------------------
# soft-argmax
# --------------------------------------------------------------------------

def _normalized(hm: np.ndarray):
    hm = np.asarray(hm, dtype=np.float64)
    if np.any(hm < 0):
        raise ValueError("soft_argmax_2d expects non-negative maps")
    total = hm.sum(axis=(-2, -1), keepdims=True)
    empty = total[..., 0, 0] <= 0
    p = np.where(total > 0, hm / np.where(total > 0, total, 1.0), 1.0 / (hm.shape[-1] * hm.shape[-2]))
    return p, total, empty


def soft_argmax_2d(heatmap: np.ndarray, return_empty: bool = False):
    """Center of mass of each ``(..., A, B)`` map, in grid units.

    Maps are normalized by their sum; an all-zero map is treated as uniform
    and lands on the grid center (flagged through ``return_empty``).
    """
    hm = np.asarray(heatmap)
    if hm.ndim < 2 or hm.shape[-1] == 0 or hm.shape[-2] == 0:
        raise ValueError(f"soft_argmax_2d needs a non-empty (..., A, B) map, got {hm.shape}")
    p, _, empty = _normalized(hm)
    A, B = hm.shape[-2:]
    ci = (p.sum(axis=-1) * np.arange(A)).sum(axis=-1)
    cj = (p.sum(axis=-2) * np.arange(B)).sum(axis=-1)
    coords = np.stack([ci, cj], axis=-1)
    return (coords, empty) if return_empty else coords


def soft_argmax_2d_backward(heatmap: np.ndarray, dcoords: np.ndarray) -> np.ndarray:
    """Gradient of ``soft_argmax_2d`` w.r.t. the (un-normalized) input maps."""
    hm = np.asarray(heatmap, dtype=np.float64)
    p, total, empty = _normalized(hm)
    A, B = hm.shape[-2:]
    coords = soft_argmax_2d(hm)
    gi = np.arange(A)[:, None] - coords[..., 0, None, None]
    gj = np.arange(B)[None, :] - coords[..., 1, None, None]
    g = dcoords[..., 0, None, None] * gi + dcoords[..., 1, None, None] * gj
    safe = np.where(total > 0, total, 1.0)
    out = g / safe
    out[empty] = 0.0
    return out


# --------------------------------------------------------------------------
# plane estimation and losses
# --------------------------------------------------------------------------

def plane_stack(volume: FeatureVolume) -> np.ndarray:
    """``(3, K, L', L')`` plane batch in the order xy, xz, yz."""
    K, L, W, H = volume.data.shape
    if not (L == W == H):
        raise ValueError(f"person volume must be cubic, got {L}x{W}x{H}")
    return np.stack([p.data for p in project_triplanes(volume)])


def estimate_planes(volume: FeatureVolume, pose_net) -> list[PlanePoseEstimate]:
    """Run the three plane features through ``pose_net`` as one batch of 3."""
    batch = plane_stack(volume)
    hm = np.asarray(pose_net(batch.astype(np.float32)))
    coords = soft_argmax_2d(hm)
    return [PlanePoseEstimate(t, hm[n], coords[n]) for n, t in enumerate(PLANES)]


def gt_plane_coords(pose: PoseSkeleton, cube: VoxelSpace) -> np.ndarray:
    """Orthographic projections of GT joints into cube grid coordinates, ``(3, K, 2)``."""
    g = (pose.joints - np.asarray(cube.origin)) / cube.cell_size - 0.5
    return np.stack([g[:, [0, 1]], g[:, [0, 2]], g[:, [1, 2]]])


def _valid_mask(valid, shape):
    if valid is None:
        return np.ones(shape[:-1], dtype=bool)
    return np.asarray(valid, dtype=bool)


def loss_hm(coords: np.ndarray, gt_coords: np.ndarray, valid=None, return_grad: bool = False):
    """L1 between predicted and GT plane coordinates, summed over planes and joints."""
    d = np.asarray(coords, dtype=np.float64) - gt_coords
    m = _valid_mask(valid, d.shape[1:])[None, :, None]
    loss = float((np.abs(d) * m).sum())
    return (loss, np.sign(d) * m) if return_grad else loss


def loss_conf(fused: FusedPose | np.ndarray, gt: PoseSkeleton, return_grad: bool = False):
    """L1 in mm between fused and GT joints, summed over valid joints."""
    j = fused.joints if isinstance(fused, FusedPose) else np.asarray(fused, dtype=np.float64)
    d = j - gt.joints
    m = np.asarray(gt.valid, dtype=bool)[:, None]
    loss = float((np.abs(d) * m).sum())
    return (loss, np.sign(d) * m) if return_grad else loss


def loss_jln(l_hm: float, l_conf: float, lambda_conf: float = LAMBDA_CONF) -> float:
    return l_hm + lambda_conf * l_conf


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------

def _pair_softmax(a, b):
    m = np.maximum(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    s = ea + eb
    return ea / s, eb / s


def fuse(coords: np.ndarray, weights: FusionWeights | np.ndarray, cube: VoxelSpace) -> FusedPose:
    """Assemble each world axis from its two observing planes.

    ``coords`` is ``(3, K, 2)`` (plane order xy, xz, yz); each axis takes a
    per-joint softmax over the two planes' logits.
    """
    logits = weights.logits if isinstance(weights, FusionWeights) else FusionWeights(weights).logits
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != 3 or coords.shape[1] != logits.shape[1]:
        raise ValueError(f"coords {coords.shape} inconsistent with logits {logits.shape}")
    K = coords.shape[1]
    grid = np.zeros((K, 3))
    pw = np.zeros((K, 3, 2))
    for axis, ((pa, ca), (pb, cb)) in ROUTES.items():
        wa, wb = _pair_softmax(logits[pa], logits[pb])
        grid[:, axis] = wa * coords[pa, :, ca] + wb * coords[pb, :, cb]
        pw[:, axis, 0], pw[:, axis, 1] = wa, wb
    cs = cube.cell_size
    joints = np.asarray(cube.origin) + grid * cs + cs / 2.0
    return FusedPose(joints, pw)


def fuse_backward(coords: np.ndarray, logits: np.ndarray, cube: VoxelSpace,
                  djoints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``fuse`` w.r.t. ``coords`` (3, K, 2) and ``logits`` (3, K)."""
    coords = np.asarray(coords, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    dgrid = np.asarray(djoints, dtype=np.float64) * cube.cell_size
    dc = np.zeros_like(coords)
    dl = np.zeros_like(logits)
    for axis, ((pa, ca), (pb, cb)) in ROUTES.items():
        wa, wb = _pair_softmax(logits[pa], logits[pb])
        g = dgrid[:, axis]
        xa, xb = coords[pa, :, ca], coords[pb, :, cb]
        dc[pa, :, ca] += g * wa
        dc[pb, :, cb] += g * wb
        # d(wa*xa + wb*xb)/d la = wa*wb*(xa - xb)
        t = g * wa * wb * (xa - xb)
        dl[pa] += t
        dl[pb] -= t
    return dc, dl


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------

def confidence_input(heatmaps: np.ndarray) -> np.ndarray:
    """Plane heatmaps rescaled so a uniform map reads 1 everywhere."""
    A, B = heatmaps.shape[-2:]
    return heatmaps * float(A * B)


def localize_person(heatmaps, cameras, box, pose_net, conf_net, space: VoxelSpace | None = None,
                    fine_res: int = 64, edge_mm: float = 2000.0) -> FusedPose:
    """Person cube around ``box`` -> mask -> tri-planes -> plane heatmaps -> fused 3D pose.

    Joints whose planes were all empty are flagged ``low_confidence``.
    """
    if space is not None and not space.contains(box.center):
        raise ValueError(f"box center {np.asarray(box.center).tolist()} lies outside the space")
    vol = build_person_volume(heatmaps, cameras, box, fine_res, edge_mm, only_inside_box=True)
    return localize_in_volume(vol, pose_net, conf_net)


def localize_in_volume(volume: FeatureVolume, pose_net, conf_net) -> FusedPose:
    return fuse_planes(estimate_planes(volume, pose_net), conf_net, volume)


def fuse_planes(planes: list[PlanePoseEstimate], conf_net, volume: FeatureVolume) -> FusedPose:
    """Confidence logits from the plane heatmaps, then pairwise fusion."""
    hm = np.stack([p.heatmaps for p in planes])
    coords = np.stack([p.coords for p in planes])
    _, empty = soft_argmax_2d(hm, return_empty=True)
    logits = np.asarray(conf_net(confidence_input(hm).astype(np.float32)), dtype=np.float64)
    fused = fuse(coords, FusionWeights(logits), volume.space)
    flat = np.all(volume.data.reshape(volume.data.shape[0], -1) <= 0, axis=1)
    fused.low_confidence = empty.all(axis=0) | flat
    return fused


def localize_masked(volume: FeatureVolume, box, pose_net, conf_net) -> FusedPose:
    return localize_in_volume(mask_person_volume(volume, box), pose_net, conf_net)


# --------------------------------------------------------------------------
# analytic stand-ins
# --------------------------------------------------------------------------

@dataclass
class AnalyticPoseNet:
    """Keeps the core of each plane feature above ``core`` times its peak.

    Ideal features are symmetric blobs, so their center of mass is the joint.
    All-zero planes stay zero (uniform fallback downstream).
    """

    core: float = 0.5

    def __call__(self, planes: np.ndarray) -> np.ndarray:
        p = np.asarray(planes, dtype=np.float64)
        peak = p.max(axis=(-2, -1), keepdims=True)
        return np.clip(p - self.core * peak, 0.0, None)


class ZeroConfidence:
    """Equal logits everywhere: fusion reduces to plain averages."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[:2])
