"""Feature volumes built by back-projecting per-camera joint heatmaps, and the
orthographic max-pool reductions used by detection and joint localization.

Volumes are stored as ``(K, L, W, H)`` float32 arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenecam import Camera, VoxelSpace, cube_space, project_points

TENSOR_MAGIC = b"OVXT"
TENSOR_VERSION = 1


class TensorFileError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise TensorFileError(f"{source}: bad magic {data[:4]!r}")
    try:
        version, rank = struct.unpack_from("<II", data, 4)
        dims = struct.unpack_from(f"<{rank}I", data, 12)
    except struct.error as exc:
        raise TensorFileError(f"{source}: truncated header") from exc
    if version != TENSOR_VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    off = 12 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - off != 4 * count:
        raise TensorFileError(f"{source}: payload has {len(data) - off} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), str(path))


@dataclass
class FeatureVolume:
    data: np.ndarray  # (K, L, W, H)
    space: VoxelSpace


@dataclass
class PlaneFeature:
    tag: str  # "xy", "xz" or "yz"
    data: np.ndarray  # (K, A, B)


@dataclass
class ColumnFeature:
    data: np.ndarray  # (P, K, H)


def _check_inputs(heatmaps: Sequence[np.ndarray], cameras: Sequence[Camera]):
    if len(cameras) == 0:
        raise ValueError("at least one camera is required")
    if len(heatmaps) != len(cameras):
        raise ValueError(f"{len(heatmaps)} heatmaps for {len(cameras)} cameras")
    K = None
    for hm, cam in zip(heatmaps, cameras):
        if hm.ndim != 3 or hm.shape[1:] != (cam.height, cam.width):
            raise ValueError(f"heatmap shape {hm.shape} does not match camera {cam.id} "
                             f"image size {cam.image_size}")
        if K is None:
            K = hm.shape[0]
        elif hm.shape[0] != K:
            raise ValueError("all heatmaps must have the same joint count")
    return K


def _live_corners(hm: np.ndarray) -> np.ndarray:
    """``live[v, u]``: any channel non-zero in the 2x2 block whose top-left is ``(v, u)``."""
    nz = np.any(hm != 0, axis=0)
    live = nz.copy()
    live[:-1] |= nz[1:]
    live[:, :-1] |= live[:, 1:].copy()
    return live


def sample_points(heatmaps: Sequence[np.ndarray], cameras: Sequence[Camera],
                  points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear-sample every camera's heatmap stack at the projections of ``points``.

    Returns ``(sum, count)`` where ``sum`` is ``(N, K)`` and ``count`` the number
    of cameras whose full 2x2 neighbourhood lies inside the image (and with
    the point in front of the camera). Cameras are accumulated in list order.
    """
    K = _check_inputs(heatmaps, cameras)
    n = len(points)
    total = np.zeros((n, K), dtype=np.float64)
    count = np.zeros(n, dtype=np.int32)
    for hm, cam in zip(heatmaps, cameras):
        pix, depth = project_points(cam, points)
        u, v = pix[:, 0], pix[:, 1]
        with np.errstate(invalid="ignore"):
            u0 = np.floor(u)
            v0 = np.floor(v)
            ok = (depth > 0) & (u0 >= 0) & (u0 + 1 <= cam.width - 1) & (v0 >= 0) & (v0 + 1 <= cam.height - 1)
        idx = np.nonzero(ok)[0]
        if idx.size == 0:
            continue
        count[idx] += 1
        # points whose 2x2 neighbourhood is all zero add exactly 0; skip the gather
        live = _live_corners(hm)
        idx = idx[live[v0[idx].astype(np.int64), u0[idx].astype(np.int64)]]
        if idx.size == 0:
            continue
        fu = (u[idx] - u0[idx]).astype(np.float32)[:, None]
        fv = (v[idx] - v0[idx]).astype(np.float32)[:, None]
        flat = v0[idx].astype(np.int64) * cam.width + u0[idx].astype(np.int64)
        table = np.ascontiguousarray(hm.reshape(K, -1).T)  # (h*w, K) row gather
        s = np.take(table, flat, axis=0)
        s *= (1 - fu) * (1 - fv)
        s += np.take(table, flat + 1, axis=0) * (fu * (1 - fv))
        s += np.take(table, flat + cam.width, axis=0) * ((1 - fu) * fv)
        s += np.take(table, flat + cam.width + 1, axis=0) * (fu * fv)
        total[idx] += s
    return total, count


def _aggregate(total: np.ndarray, count: np.ndarray) -> np.ndarray:
    out = np.zeros_like(total)
    hit = count > 0
    out[hit] = total[hit] / count[hit, None]
    return np.clip(out, 0.0, 1.0)


def build_volume(heatmaps: Sequence[np.ndarray], cameras: Sequence[Camera], space: VoxelSpace) -> FeatureVolume:
    """Mean of in-view bilinear heatmap samples at every voxel center."""
    total, count = sample_points(heatmaps, cameras, space.centers())
    vals = _aggregate(total, count)
    L, W, H = space.resolution
    data = vals.T.reshape(-1, L, W, H).astype(np.float32)
    return FeatureVolume(data, space)


def person_cube(center, edge_mm: float = 2000.0, resolution: int = 64) -> VoxelSpace:
    return cube_space(center, edge_mm, resolution)


def build_person_volume(heatmaps, cameras, box, fine_res: int = 64, edge_mm: float = 2000.0,
                        only_inside_box: bool = False) -> FeatureVolume:
    """Fresh back-projection over a cube of side ``edge_mm`` centered on the box.

    ``only_inside_box`` samples just the voxels the box mask keeps and leaves
    the rest at zero; the result equals ``mask_person_volume`` of the full cube.
    """
    space = person_cube(box.center, edge_mm, fine_res)
    if not only_inside_box:
        return build_volume(heatmaps, cameras, space)
    keep = _box_column_mask(space, box)
    L, W, H = space.resolution
    K = heatmaps[0].shape[0]
    data = np.zeros((K, L, W, H), dtype=np.float32)
    ii, jj = np.nonzero(keep)
    if ii.size:
        cs = space.cell_size
        xs = space.origin[0] + (ii + 0.5) * cs[0]
        ys = space.origin[1] + (jj + 0.5) * cs[1]
        zs = space.origin[2] + (np.arange(H) + 0.5) * cs[2]
        pts = np.stack([np.repeat(xs, H), np.repeat(ys, H), np.tile(zs, ii.size)], axis=1)
        vals = _aggregate(*sample_points(heatmaps, cameras, pts)).astype(np.float32)
        data[:, ii, jj, :] = vals.T.reshape(K, ii.size, H)
    return FeatureVolume(data, space)


def _box_column_mask(space: VoxelSpace, box) -> np.ndarray:
    cs = space.cell_size
    L, W, _ = space.resolution
    xs = space.origin[0] + (np.arange(L) + 0.5) * cs[0]
    ys = space.origin[1] + (np.arange(W) + 0.5) * cs[1]
    cx, cy = box.center[0], box.center[1]
    hx, hy = box.size_xy[0] / 2.0, box.size_xy[1] / 2.0
    inx = np.abs(xs - cx) <= hx
    iny = np.abs(ys - cy) <= hy
    return inx[:, None] & iny[None, :]


def mask_person_volume(volume: FeatureVolume, box) -> FeatureVolume:
    """Zero every voxel whose center lies outside the box's horizontal rectangle."""
    keep = _box_column_mask(volume.space, box)
    return FeatureVolume(volume.data * keep[None, :, :, None], volume.space)


def project_bev(volume: FeatureVolume) -> PlaneFeature:
    return PlaneFeature("xy", volume.data.max(axis=3))


def extract_columns(volume: FeatureVolume, bev_cells) -> ColumnFeature:
    K, L, W, H = volume.data.shape
    cells = np.asarray(bev_cells, dtype=np.int64).reshape(-1, 2)
    if len(cells) and (np.any(cells < 0) or np.any(cells[:, 0] >= L) or np.any(cells[:, 1] >= W)):
        raise IndexError(f"BEV cell outside the {L}x{W} grid")
    cols = volume.data[:, cells[:, 0], cells[:, 1], :]  # (K, P, H)
    return ColumnFeature(np.ascontiguousarray(cols.transpose(1, 0, 2)))


def project_triplanes(volume: FeatureVolume) -> tuple[PlaneFeature, PlaneFeature, PlaneFeature]:
    d = volume.data
    return (PlaneFeature("xy", d.max(axis=3)),
            PlaneFeature("xz", d.max(axis=2)),
            PlaneFeature("yz", d.max(axis=1)))
