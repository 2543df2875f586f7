"""Cost measurement: analytic MAC counts, per-stage wall-clock timers and the
granularity / person-count / camera-count sweeps."""

from __future__ import annotations

import csv
import io
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .hdn import decode_detections, gt_boxes
from .jln import estimate_planes, fuse_planes
from .nncore import Module
from .pipeline import Models, build_models
from .scenecam import CMU15
from .synthgen import SceneConfig, frame_rng, place_poses, render_heatmaps
from .volume import build_person_volume, build_volume, project_bev

STAGES = ("heatmap_oracle", "volume", "hdn", "jln_features", "jln", "fusion", "other")


def count_macs(graph: Module, input_shape: Sequence[int]) -> int:
    """Exact MACs of one inference forward on an input of ``input_shape``.

    Convolution: output elements x input channels x kernel volume.
    Deconvolution: input elements x output channels x kernel volume.
    Fully connected: in x out (per sample). Everything else is free.
    """
    was_training = graph.training
    graph.eval()
    graph(np.zeros(tuple(input_shape), dtype=np.float32))
    total = sum(int(m.macs()) for m in graph.leaves())
    graph.train(was_training)
    return total


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter):
        self.clock = clock
        self.seconds: dict[str, float] = {}
        self._open: list[str] = []

    @contextmanager
    def stage(self, name: str):
        t0 = self.clock()
        self._open.append(name)
        try:
            yield
        finally:
            self._open.pop()
            self.seconds[name] = self.seconds.get(name, 0.0) + self.clock() - t0

    def ms(self) -> dict[str, float]:
        return {k: 1000.0 * v for k, v in self.seconds.items()}


@dataclass
class CostPoint:
    sweep: str
    axis_value: float
    stage_ms: dict[str, float]
    macs: dict[str, int] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    runs: int = 1


@dataclass
class CostReport:
    points: list[CostPoint] = field(default_factory=list)
    config_digest: str = ""

    def series(self, sweep: str, stage: str) -> tuple[list[float], list[float]]:
        pts = [p for p in self.points if p.sweep == sweep]
        return [p.axis_value for p in pts], [p.stage_ms.get(stage, 0.0) for p in pts]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sweep", "axis_value", "stage", "best_ms", "macs", "params", "runs", "config_digest"])
        for p in self.points:
            for stage, ms in p.stage_ms.items():
                w.writerow([p.sweep, p.axis_value, stage, f"{ms:.4f}", p.macs.get(stage, ""),
                            p.params.get(stage, ""), p.runs, self.config_digest])
        return buf.getvalue()


def _best_ms(fns: dict, runs: int, warmup: int = 1) -> dict:
    """Fastest of ``runs`` timed calls per entry of ``fns``.

    Scheduler noise only adds time, so the minimum is the stablest estimate of
    a deterministic stage's cost. Calls are interleaved round-robin across
    entries, so a noise burst cannot cover every sample of one sweep point.
    """
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    best = {key: float("inf") for key in fns}
    for _ in range(runs):
        for key, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            best[key] = min(best[key], 1000.0 * (time.perf_counter() - t0))
    return best


def network_macs(models: Models, cfg: RunConfig, K: int = CMU15.joint_count) -> dict[str, int]:
    L, W, H = (int(v) for v in cfg.space.resolution)
    r = cfg.jln.fine_res
    return {"hdn": count_macs(models.hdn2d, (1, K, L, W)) + count_macs(models.hdn1d, (cfg.hdn.top_p, K, H)),
            "jln": count_macs(models.pose, (3, K, r, r)),
            "fusion": count_macs(models.conf, (3, K, r, r))}


def _bench_scene(cfg: RunConfig, persons: int, seed: int):
    sc = cfg.scene_config()
    rng = frame_rng(seed, 0)
    poses = place_poses(sc, rng, persons)
    return sc, poses


def sweep_granularity(cfg: RunConfig, models: Models | None = None, resolutions=(64, 48, 32), runs: int = 5,
                      seed: int = 0, threads: int | None = 1) -> CostReport:
    """JLN cost per person-cube resolution: MACs of the plane stack and best wall time."""
    models = models or build_models(cfg)
    models.eval()
    sc, poses = _bench_scene(cfg, 1, seed)
    cams = sc.cameras()
    hms = render_heatmaps(poses, cams, sc.sigma_px, K=CMU15.joint_count)
    box = gt_boxes(poses, margin=cfg.hdn.margin_mm)[0]
    rep = CostReport(config_digest=cfg.digest())
    K = CMU15.joint_count
    with threadpool_limits(threads):
        fns = {}
        for r in resolutions:
            feat = partial(build_person_volume, hms, cams, box, r, cfg.jln.cube_mm, only_inside_box=True)
            pv = feat()
            fns[r, "feat"] = feat
            fns[r, "inf"] = lambda pv=pv: fuse_planes(estimate_planes(pv, models.pose), models.conf, pv)
        best = _best_ms(fns, runs)
        for r in resolutions:
            t_feat, t_inf = best[r, "feat"], best[r, "inf"]
            macs = {"jln": count_macs(models.pose, (3, K, r, r)), "fusion": count_macs(models.conf, (3, K, r, r))}
            rep.points.append(CostPoint("granularity", r, {"jln_features": t_feat, "jln": t_inf,
                                                           "jln_total": t_feat + t_inf},
                                        macs, {"jln": models.pose.param_count(),
                                               "fusion": models.conf.param_count()}, runs))
    return rep


def sweep_persons(cfg: RunConfig, models: Models | None = None, counts=range(1, 11), runs: int = 5,
                  seed: int = 0, boxes: str = "gt", threads: int | None = 1) -> CostReport:
    """Stage times as the person count grows, cameras fixed.

    ``boxes="gt"`` localizes the GT boxes so the JLN stage always sees ``n``
    persons; ``boxes="hdn"`` uses whatever the detector returns.
    """
    models = models or build_models(cfg)
    models.eval()
    counts = list(counts)
    sc, all_poses = _bench_scene(cfg, max(counts) if counts else 0, seed)
    cams = sc.cameras()
    space = cfg.voxel_space()
    rep = CostReport(config_digest=cfg.digest())
    macs = network_macs(models, cfg)
    def stages(n):
        poses = all_poses[:n]
        hms = render_heatmaps(poses, cams, sc.sigma_px, K=CMU15.joint_count)
        vol = build_volume(hms, cams, space)
        bev = project_bev(vol).data[None].astype(np.float32)

        def hdn():
            heat, off, size = models.hdn2d(bev)
            return decode_detections(heat[0, 0], size[0], off[0], vol, models.hdn1d,
                                     cfg.hdn.threshold, cfg.hdn.top_p)

        dets = hdn()
        targets = gt_boxes(poses, margin=cfg.hdn.margin_mm) if boxes == "gt" else dets

        def jln():
            for box in targets:
                pv = build_person_volume(hms, cams, box, cfg.jln.fine_res, cfg.jln.cube_mm, only_inside_box=True)
                fuse_planes(estimate_planes(pv, models.pose), models.conf, pv)

        return hdn, jln

    with threadpool_limits(threads):
        fns = {}
        for n in counts:
            fns[n, "hdn"], fns[n, "jln"] = stages(n)
        best = _best_ms(fns, runs)
    for n in counts:
        rep.points.append(CostPoint("persons", n, {"hdn": best[n, "hdn"], "jln": best[n, "jln"]}, macs, runs=runs))
    return rep


def sweep_cameras(cfg: RunConfig, models: Models | None = None, counts=range(1, 13), runs: int = 5,
                  seed: int = 0, persons: int = 2, threads: int | None = 1) -> CostReport:
    """Volume-build time and network MACs as the camera count grows."""
    models = models or build_models(cfg)
    models.eval()
    space = cfg.voxel_space()
    rep = CostReport(config_digest=cfg.digest())
    base = cfg.scene_config()
    poses = place_poses(base, frame_rng(seed, 0), persons)
    macs = network_macs(models, cfg)
    with threadpool_limits(threads):
        fns = {}
        for c in counts:
            sc = SceneConfig(**{**base.__dict__, "camera_count": int(c)})
            cams = sc.cameras()
            hms = render_heatmaps(poses, cams, sc.sigma_px, K=CMU15.joint_count)
            fns[c, "volume"] = partial(build_volume, hms, cams, space)
            bev = project_bev(fns[c, "volume"]()).data[None].astype(np.float32)
            fns[c, "hdn"] = partial(models.hdn2d, bev)
        best = _best_ms(fns, runs)
    for c in counts:
        rep.points.append(CostPoint("cameras", c, {"volume": best[c, "volume"], "hdn": best[c, "hdn"]}, macs, runs=runs))
    return rep
