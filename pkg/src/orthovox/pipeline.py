"""Model bundle and end-to-end inference: volume -> BEV detection -> per-person
tri-plane localization."""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .hdn import Detection3D, decode_detections
from .jln import FusedPose, estimate_planes, fuse_planes
from .nncore import (ConfidenceNet, HDN1DNet, HDN2DNet, PoseNet, build_confidence_net, build_hdn_1d,
                     build_hdn_2d_backbone, build_pose_net)
from .scenecam import CMU15, Camera, VoxelSpace
from .volume import build_person_volume, build_volume, project_bev

HEAT_PRIOR = -4.0  # sigmoid(-4) ~ 0.018: most BEV cells are background


@dataclass
class Models:
    hdn2d: HDN2DNet
    hdn1d: HDN1DNet
    pose: PoseNet
    conf: ConfidenceNet

    NAMES = ("hdn2d", "hdn1d", "pose", "conf")

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.items():
            for key, arr in net.state_dict().items():
                out[f"{name}/{key}"] = arr
        return out

    def load_state(self, tensors: dict[str, np.ndarray]):
        for name, net in self.items():
            prefix = f"{name}/"
            net.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})

    def train(self, mode: bool = True):
        for _, net in self.items():
            net.train(mode)

    def eval(self):
        self.train(False)


def build_models(cfg: RunConfig, K: int = CMU15.joint_count) -> Models:
    seed = cfg.train.seed
    n = cfg.nets
    return Models(
        build_hdn_2d_backbone(K, n.hdn_width, seed=1000 * seed + 0, heat_prior=HEAT_PRIOR),
        build_hdn_1d(K, n.hdn1d_width, seed=1000 * seed + 1, heat_prior=HEAT_PRIOR),
        build_pose_net(K, n.pose_width, seed=1000 * seed + 2, beta=n.pose_beta),
        build_confidence_net(K, n.conf_width, seed=1000 * seed + 3),
    )


def _stage(timer, name):
    return timer.stage(name) if timer is not None else nullcontext()


def detect(volume, models: Models, cfg: RunConfig) -> list[Detection3D]:
    models.eval()
    bev = project_bev(volume).data
    heat, off, size = models.hdn2d(bev[None].astype(np.float32))
    return decode_detections(heat[0, 0], size[0], off[0], volume, models.hdn1d,
                             threshold=cfg.hdn.threshold, top_p=cfg.hdn.top_p)


def infer_frame(heatmaps, cameras: list[Camera], space: VoxelSpace, models: Models, cfg: RunConfig,
                timer=None) -> tuple[list[Detection3D], list[FusedPose]]:
    """Full pipeline for one frame. ``timer`` (optional) receives named stages."""
    models.eval()
    with _stage(timer, "volume"):
        volume = build_volume(heatmaps, cameras, space)
    with _stage(timer, "hdn"):
        dets = detect(volume, models, cfg)
    poses = []
    for det in dets:
        with _stage(timer, "jln_features"):
            pv = build_person_volume(heatmaps, cameras, det, cfg.jln.fine_res, cfg.jln.cube_mm,
                                     only_inside_box=True)
        with _stage(timer, "jln"):
            planes = estimate_planes(pv, models.pose)
        with _stage(timer, "fusion"):
            poses.append(fuse_planes(planes, models.conf, pv))
    return dets, poses
