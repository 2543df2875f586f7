"""Human detection from the bird's-eye view: training targets, the weighted
detection losses, NMS + top-P decoding into 3D boxes, and an analytic
(learning-free) stand-in for the detection heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scenecam import CMU15, PoseSkeleton, SkeletonDef, VoxelSpace, root_joint, world_to_continuous_grid
from .volume import FeatureVolume, extract_columns

log = logging.getLogger(__name__)

LAMBDA_SIZE = 0.02
LAMBDA_OFF = 0.1
LAMBDA_1D = 1.0
BOX_HEIGHT_MM = 2000.0
DEFAULT_MARGIN_MM = 200.0
DEFAULT_SIGMA_MM = 200.0
DEFAULT_TOP_P = 10
DEFAULT_THRESHOLD = 0.3


@dataclass
class BevTargets:
    confidence: np.ndarray  # (L, W)
    size: np.ndarray  # (2, L, W) mm
    offset: np.ndarray  # (2, L, W) fractional cell
    cells: list[tuple[int, int, int]]  # supervised (i, j, person index)
    person_count: int
    skipped: int = 0


@dataclass
class Detection3D:
    bev_cell: tuple[int, int]
    center: np.ndarray  # (3,) mm
    size_xy: np.ndarray  # (2,) mm
    score: float
    score_2d: float = 1.0
    score_1d: float = 1.0
    height: float = BOX_HEIGHT_MM

    def to_dict(self) -> dict:
        return {"bev_cell": [int(c) for c in self.bev_cell], "center_mm": [float(v) for v in self.center],
                "size_mm": [float(v) for v in self.size_xy], "height_mm": float(self.height),
                "score": float(self.score), "score_2d": float(self.score_2d), "score_1d": float(self.score_1d)}


def gt_box_size(pose: PoseSkeleton, skeleton: SkeletonDef = CMU15, margin: float = DEFAULT_MARGIN_MM) -> np.ndarray:
    """Root-centered horizontal box covering every valid joint, plus ``margin`` per side."""
    r = root_joint(pose, skeleton)
    j = pose.joints[pose.valid]
    half = np.abs(j[:, :2] - r[:2]).max(axis=0)
    return 2.0 * (half + margin)


def gt_boxes(poses, skeleton: SkeletonDef = CMU15, margin: float = DEFAULT_MARGIN_MM) -> list[Detection3D]:
    out = []
    for p in poses:
        r = root_joint(p, skeleton)
        out.append(Detection3D((0, 0), r, gt_box_size(p, skeleton, margin), 1.0))
    return out


def make_bev_targets(poses, space: VoxelSpace, sigma_cells: float | None = None,
                     margin: float = DEFAULT_MARGIN_MM, skeleton: SkeletonDef = CMU15,
                     neighborhood: str = "center") -> BevTargets:
    """Gaussian center heatmap, size and offset maps for a list of GT poses.

    Grid point ``(i, j)`` is the voxel-column center, so a person standing
    exactly on a column center scores 1.0 there. Persons whose root falls
    outside the space are skipped (and counted). ``neighborhood="4"`` also
    supervises the four edge neighbours of the floored center cell.
    """
    L, W, _ = space.resolution
    if sigma_cells is None:
        sigma_cells = DEFAULT_SIGMA_MM / space.cell_size[0]
    conf = np.zeros((L, W), dtype=np.float64)
    size = np.zeros((2, L, W), dtype=np.float64)
    offset = np.zeros((2, L, W), dtype=np.float64)
    cells: list[tuple[int, int, int]] = []
    ii, jj = np.meshgrid(np.arange(L), np.arange(W), indexing="ij")
    skipped = 0
    n = 0
    for idx, pose in enumerate(poses):
        r = root_joint(pose, skeleton)
        g = world_to_continuous_grid(space, r)
        ci, cj = int(np.floor(g[0])), int(np.floor(g[1]))
        if not (0 <= ci < L and 0 <= cj < W):
            skipped += 1
            continue
        n += 1
        ti, tj = g[0] - 0.5, g[1] - 0.5
        np.maximum(conf, np.exp(-((ii - ti) ** 2 + (jj - tj) ** 2) / (2 * sigma_cells ** 2)), out=conf)
        s = gt_box_size(pose, skeleton, margin)
        frac = (g[0] - ci, g[1] - cj)
        targets = [(ci, cj)]
        if neighborhood == "4":
            targets += [(ci + di, cj + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                        if 0 <= ci + di < L and 0 <= cj + dj < W]
        for (a, b) in targets:
            size[:, a, b] = s
            offset[:, a, b] = (g[0] - a, g[1] - b) if (a, b) != (ci, cj) else frac
            cells.append((a, b, idx))
    if skipped:
        log.warning("make_bev_targets: skipped %d person(s) outside the space", skipped)
    return BevTargets(conf, size, offset, cells, n, skipped)


def make_height_targets(root_z, space: VoxelSpace, sigma_cells: float | None = None) -> np.ndarray:
    """``(P, H)`` 1D Gaussians centered at each root height (cell-center convention)."""
    H = space.resolution[2]
    if sigma_cells is None:
        sigma_cells = DEFAULT_SIGMA_MM / space.cell_size[2]
    k = np.arange(H)
    z = (np.asarray(root_z, dtype=np.float64).reshape(-1, 1) - space.origin[2]) / space.cell_size[2] - 0.5
    return np.exp(-((k[None, :] - z) ** 2) / (2 * sigma_cells ** 2))


# --------------------------------------------------------------------------
# losses (each optionally returns d loss / d prediction)
# --------------------------------------------------------------------------

def loss_2d(pred_conf, target_conf, return_grad: bool = False):
    diff = np.asarray(pred_conf, dtype=np.float64) - target_conf
    loss = float((diff ** 2).sum())
    return (loss, 2.0 * diff) if return_grad else loss


def _loss_at_cells(pred, target_map, targets: BevTargets, return_grad: bool):
    pred = np.asarray(pred, dtype=np.float64)
    grad = np.zeros_like(pred)
    if not targets.cells:
        return (0.0, grad) if return_grad else 0.0
    idx = np.array([(i, j) for i, j, _ in targets.cells])
    d = pred[:, idx[:, 0], idx[:, 1]] - target_map[:, idx[:, 0], idx[:, 1]]
    n = max(targets.person_count, 1)
    loss = float(np.abs(d).sum() / n)
    if return_grad:
        np.add.at(grad, (slice(None), idx[:, 0], idx[:, 1]), np.sign(d) / n)
        return loss, grad
    return loss


def loss_size(pred_size, targets: BevTargets, return_grad: bool = False):
    """L1 on the supervised cells only, divided by the person count."""
    return _loss_at_cells(pred_size, targets.size, targets, return_grad)


def loss_offset(pred_offset, targets: BevTargets, return_grad: bool = False):
    return _loss_at_cells(pred_offset, targets.offset, targets, return_grad)


def loss_1d(pred_cols, target_cols, return_grad: bool = False):
    """Squared error summed over bins, averaged over the proposal count."""
    pred = np.asarray(pred_cols, dtype=np.float64)
    P = max(pred.shape[0], 1)
    diff = pred - target_cols
    loss = float((diff ** 2).sum() / P)
    return (loss, 2.0 * diff / P) if return_grad else loss


def loss_hdn(l_2d: float, l_size: float, l_off: float, l_1d: float,
             lambda_size: float = LAMBDA_SIZE, lambda_off: float = LAMBDA_OFF,
             lambda_1d: float = LAMBDA_1D) -> float:
    return l_2d + lambda_size * l_size + lambda_off * l_off + lambda_1d * l_1d


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def nms_mask(conf: np.ndarray) -> np.ndarray:
    """Cells that are maxima of their 3x3 neighbourhood.

    On a plateau of equal values only the lexicographically lowest ``(i, j)``
    survives: a cell must strictly beat earlier neighbours and tie-or-beat
    later ones.
    """
    L, W = conf.shape
    pad = np.pad(conf, 1, constant_values=-np.inf)
    keep = np.ones_like(conf, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[1 + di:1 + di + L, 1 + dj:1 + dj + W]
            earlier = (di, dj) < (0, 0)
            keep &= (conf > nb) if earlier else (conf >= nb)
    return keep


def top_proposals(conf: np.ndarray, top_p: int = DEFAULT_TOP_P) -> list[tuple[int, int]]:
    """NMS survivors ordered by confidence (ties: lower index first), at most ``top_p``."""
    keep = nms_mask(conf)
    ii, jj = np.nonzero(keep)
    order = sorted(range(len(ii)), key=lambda n: (-conf[ii[n], jj[n]], ii[n], jj[n]))
    return [(int(ii[n]), int(jj[n])) for n in order[:top_p]]


def decode_detections(pred_conf, pred_size, pred_offset, volume: FeatureVolume, net_1d,
                      threshold: float = DEFAULT_THRESHOLD, top_p: int = DEFAULT_TOP_P) -> list[Detection3D]:
    """NMS, top-P proposals, column heights from ``net_1d``, product scores, threshold.

    ``net_1d`` maps ``(P, K, H)`` columns to ``(P, H)`` height heatmaps.
    """
    space = volume.space
    cs = space.cell_size
    props = top_proposals(np.asarray(pred_conf), top_p)
    if not props:
        return []
    cols = extract_columns(volume, props).data
    hz = np.asarray(net_1d(cols))
    dets = []
    for p, (i, j) in enumerate(props):
        kz = int(np.argmax(hz[p]))
        s1 = float(hz[p, kz])
        s2 = float(pred_conf[i, j])
        score = s2 * s1
        if score < threshold:
            continue
        x = (i + float(pred_offset[0, i, j])) * cs[0] + space.origin[0]
        y = (j + float(pred_offset[1, i, j])) * cs[1] + space.origin[1]
        z = space.origin[2] + (kz + 0.5) * cs[2]
        size = np.array([float(pred_size[0, i, j]), float(pred_size[1, i, j])])
        dets.append(Detection3D((i, j), np.array([x, y, z]), size, score, s2, s1))
    return dets


# --------------------------------------------------------------------------
# analytic heads
# --------------------------------------------------------------------------

@dataclass
class AnalyticHDN:
    """Learning-free detection heads computed directly from the BEV features.

    Root likelihood is the mean of the hip channels. The heatmap is that map
    blurred and scaled to a unit peak; offsets are the local center of mass
    of the peak cores; sizes are a constant fill. The 1D head takes the hip
    channels of a column, scaled to a unit peak.
    """

    skeleton: SkeletonDef = CMU15
    blur_cells: float = 1.5
    window: int = 7
    core: float = 0.5
    box_mm: float = 2000.0
    hips: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.hips = (self.skeleton.index("l_hip"), self.skeleton.index("r_hip"))

    def heads(self, bev: np.ndarray):
        root = bev[list(self.hips)].mean(axis=0).astype(np.float64)
        blurred = ndimage.gaussian_filter(root, self.blur_cells, mode="constant")
        peak = blurred.max()
        conf = blurred / peak if peak > 0 else blurred
        local_max = ndimage.maximum_filter(root, self.window, mode="constant")
        w = np.clip(root - self.core * local_max, 0.0, None)
        L, W = root.shape
        gi, gj = np.meshgrid(np.arange(L) + 0.5, np.arange(W) + 0.5, indexing="ij")
        size = self.window
        mass = ndimage.uniform_filter(w, size, mode="constant") * size * size
        mi = ndimage.uniform_filter(w * gi, size, mode="constant") * size * size
        mj = ndimage.uniform_filter(w * gj, size, mode="constant") * size * size
        offset = np.full((2, L, W), 0.5)
        ok = mass > 1e-9
        offset[0][ok] = mi[ok] / mass[ok] - np.arange(L)[:, None].repeat(W, 1)[ok]
        offset[1][ok] = mj[ok] / mass[ok] - np.arange(W)[None, :].repeat(L, 0)[ok]
        sizes = np.full((2, L, W), self.box_mm)
        return conf, offset, sizes

    def height(self, columns: np.ndarray) -> np.ndarray:
        col = columns[:, list(self.hips), :].mean(axis=1).astype(np.float64)
        peak = col.max(axis=1, keepdims=True)
        return np.divide(col, peak, out=np.zeros_like(col), where=peak > 0)
