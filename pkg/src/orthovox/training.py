"""Joint HDN/JLN training with per-batch alternating Adam updates.

Features are precomputed once per frame: the BEV map, the GT-cell columns
(plus negatives) for the height head, and jittered GT-centered person cubes
reduced to their three planes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import RunConfig
from .hdn import (BevTargets, Detection3D, gt_box_size, loss_1d, loss_2d, loss_hdn, loss_offset, loss_size,
                  make_bev_targets, make_height_targets)
from .jln import (confidence_input, fuse, fuse_backward, gt_plane_coords, loss_conf, loss_hm, loss_jln,
                  plane_stack, soft_argmax_2d, soft_argmax_2d_backward)
from .nncore import AdamState, CheckpointError, TrainingError, adam_step, load_checkpoint, save_checkpoint
from .pipeline import Models, build_models
from .scenecam import CMU15, PoseSkeleton, VoxelSpace, root_joint, world_to_continuous_grid
from .volume import build_person_volume, build_volume, extract_columns, project_bev

log = logging.getLogger(__name__)

NEGATIVE_COLUMNS = 2
NEGATIVE_MIN_CELLS = 5


@dataclass
class PersonSample:
    planes: np.ndarray  # (3, K, L', L') float32
    gt_coords: np.ndarray  # (3, K, 2)
    pose: PoseSkeleton
    cube: VoxelSpace


@dataclass
class FrameSample:
    frame_id: int
    bev: np.ndarray  # (K, L, W) float32
    targets: BevTargets
    columns: np.ndarray  # (P, K, H) float32
    column_targets: np.ndarray  # (P, H)
    persons: list[PersonSample] = field(default_factory=list)


def prepare_frame(frame, cameras, cfg: RunConfig, rng: np.random.Generator) -> FrameSample:
    space = cfg.voxel_space()
    vol = build_volume(frame.heatmaps, cameras, space)
    sigma = cfg.hdn.sigma_mm / space.cell_size[0]
    targets = make_bev_targets(frame.poses, space, sigma, cfg.hdn.margin_mm, neighborhood=cfg.hdn.neighborhood)
    L, W, H = space.resolution
    cells, heights = [], []
    roots = []
    for pose in frame.poses:
        r = root_joint(pose)
        g = np.floor(world_to_continuous_grid(space, r)).astype(int)
        if not (0 <= g[0] < L and 0 <= g[1] < W):
            continue
        roots.append(g[:2])
        for di, dj in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = g[0] + di, g[1] + dj
            if 0 <= a < L and 0 <= b < W:
                cells.append((a, b))
                heights.append(r[2])
    col_t = [make_height_targets(heights, space, cfg.hdn.sigma_mm / space.cell_size[2])] if heights else []
    neg = []
    tries = 0
    while len(neg) < NEGATIVE_COLUMNS and tries < 100:
        tries += 1
        c = rng.integers(0, [L, W])
        if all(np.max(np.abs(c - r)) >= NEGATIVE_MIN_CELLS for r in roots):
            neg.append((int(c[0]), int(c[1])))
    if neg:
        col_t.append(np.zeros((len(neg), H)))
    all_cells = cells + neg
    columns = extract_columns(vol, all_cells).data if all_cells else np.zeros((0, vol.data.shape[0], H), np.float32)
    column_targets = np.concatenate(col_t) if col_t else np.zeros((0, H))
    sample = FrameSample(frame.frame_id, project_bev(vol).data.astype(np.float32), targets, columns, column_targets)
    for pose in frame.poses:
        sample.persons.append(prepare_person(frame.heatmaps, cameras, pose, cfg, rng))
    return sample


def prepare_person(heatmaps, cameras, pose: PoseSkeleton, cfg: RunConfig, rng: np.random.Generator) -> PersonSample:
    """GT box with uniform center jitter, cube built around it, masked, reduced to planes."""
    j = cfg.train.jitter_mm
    center = root_joint(pose) + (rng.uniform(-j, j, 3) if j > 0 else 0.0)
    box = Detection3D((0, 0), center, gt_box_size(pose, margin=cfg.hdn.margin_mm), 1.0)
    pv = build_person_volume(heatmaps, cameras, box, cfg.jln.fine_res, cfg.jln.cube_mm, only_inside_box=True)
    return PersonSample(plane_stack(pv).astype(np.float32), gt_plane_coords(pose, pv.space), pose, pv.space)


def prepare_dataset(frames: Iterable, cameras, cfg: RunConfig, progress: Callable | None = None) -> list[FrameSample]:
    out = []
    for n, fr in enumerate(frames):
        rng = np.random.default_rng([cfg.train.seed, int(fr.frame_id), 7])
        out.append(prepare_frame(fr, cameras, cfg, rng))
        if progress:
            progress(n + 1)
    return out


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def _check(name: str, value: float, where: str):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {name} at {where}")


def hdn_step(models: Models, batch: list[FrameSample], state: AdamState | None, where: str = "") -> dict:
    """Forward/backward over one HDN batch; applies Adam when ``state`` is given."""
    net2, net1 = models.hdn2d, models.hdn1d
    net2.train(True)
    net1.train(True)
    net2.zero_grad()
    net1.zero_grad()
    B = len(batch)
    x = np.stack([s.bev for s in batch])
    heat, off, size = net2(x)
    dheat = np.zeros_like(heat)
    doff = np.zeros_like(off)
    dsize = np.zeros_like(size)
    comp = {"l_2d": 0.0, "l_size": 0.0, "l_off": 0.0}
    for b, s in enumerate(batch):
        l2, g2 = loss_2d(heat[b, 0], s.targets.confidence, return_grad=True)
        ls, gs = loss_size(size[b], s.targets, return_grad=True)
        lo, go = loss_offset(off[b], s.targets, return_grad=True)
        comp["l_2d"] += l2 / B
        comp["l_size"] += ls / B
        comp["l_off"] += lo / B
        dheat[b, 0] = g2 / B
        dsize[b] = gs * (0.02 / B)
        doff[b] = go * (0.1 / B)
    cols = np.concatenate([s.columns for s in batch])
    col_t = np.concatenate([s.column_targets for s in batch])
    if len(cols):
        hz = net1(cols)
        l1, g1 = loss_1d(hz, col_t, return_grad=True)
        net1.backward(g1.astype(hz.dtype))
    else:
        l1 = 0.0
    comp["l_1d"] = l1
    comp["l_hdn"] = loss_hdn(comp["l_2d"], comp["l_size"], comp["l_off"], comp["l_1d"])
    _check("L_HDN", comp["l_hdn"], where)
    net2.backward(dheat.astype(heat.dtype), doff.astype(off.dtype), dsize.astype(size.dtype))
    if state is not None:
        params = dict(net2.named_parameters("hdn2d"))
        params.update(net1.named_parameters("hdn1d"))
        adam_step(state, params)
    return comp


def jln_step(models: Models, persons: list[PersonSample], state: AdamState | None, where: str = "") -> dict:
    pose_net, conf_net = models.pose, models.conf
    pose_net.train(True)
    conf_net.train(True)
    pose_net.zero_grad()
    conf_net.zero_grad()
    n = len(persons)
    if n == 0:
        return {"l_hm": 0.0, "l_conf": 0.0, "l_jln": 0.0}
    x = np.concatenate([p.planes for p in persons])  # (3n, K, A, B)
    hm = pose_net(x)
    K = hm.shape[1]
    coords = soft_argmax_2d(hm).reshape(n, 3, K, 2)
    logits = conf_net(confidence_input(hm))  # heatmaps enter the confidence net detached
    logits = np.asarray(logits, dtype=np.float64).reshape(n, 3, K)
    dcoords = np.zeros_like(coords)
    dlogits = np.zeros_like(logits)
    l_hm = l_conf = 0.0
    for i, p in enumerate(persons):
        lh, gh = loss_hm(coords[i], p.gt_coords, p.pose.valid, return_grad=True)
        fused = fuse(coords[i], logits[i], p.cube)
        lc, gc = loss_conf(fused, p.pose, return_grad=True)
        _, dl = fuse_backward(coords[i], logits[i], p.cube, gc)
        l_hm += lh / n
        l_conf += lc / n
        dcoords[i] = gh / n
        dlogits[i] = dl / n
    l_jln = loss_jln(l_hm, l_conf)
    _check("L_JLN", l_jln, where)
    dhm = soft_argmax_2d_backward(hm, dcoords.reshape(3 * n, K, 2))
    pose_net.backward(dhm.astype(hm.dtype))
    conf_net.backward(dlogits.reshape(3 * n, K).astype(hm.dtype))
    if state is not None:
        params = dict(pose_net.named_parameters("pose"))
        params.update(conf_net.named_parameters("conf"))
        adam_step(state, params)
    return {"l_hm": l_hm, "l_conf": l_conf, "l_jln": l_jln}


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

class Trainer:
    """Alternating optimisation: each HDN batch is followed by a JLN batch made
    of the persons in the same frames. One Adam state per network family."""

    def __init__(self, cfg: RunConfig, data: list[FrameSample], models: Models | None = None):
        self.cfg = cfg
        self.data = data
        self.models = models or build_models(cfg)
        self.hdn_opt = AdamState(lr=cfg.train.lr)
        self.jln_opt = AdamState(lr=cfg.train.lr)
        self.epoch = 0  # completed epochs
        self.history: list[dict] = []

    def batches(self, epoch: int) -> list[list[FrameSample]]:
        order = np.random.default_rng([self.cfg.train.seed, epoch]).permutation(len(self.data))
        bs = self.cfg.train.batch_size
        return [[self.data[i] for i in order[k:k + bs]] for k in range(0, len(order), bs)]

    def step(self, batch: list[FrameSample], where: str = "", update: bool = True) -> dict:
        h = hdn_step(self.models, batch, self.hdn_opt if update else None, where)
        persons = [p for s in batch for p in s.persons]
        j = jln_step(self.models, persons, self.jln_opt if update else None, where)
        return {**h, **j}

    def train_epoch(self, on_step: Callable | None = None) -> dict:
        epoch = self.epoch + 1
        sums: dict[str, float] = {}
        batches = self.batches(epoch)
        for b, batch in enumerate(batches):
            comp = self.step(batch, where=f"epoch {epoch}, batch {b + 1}")
            for k, v in comp.items():
                sums[k] = sums.get(k, 0.0) + v
            if on_step:
                on_step(epoch, b + 1, comp)
        means = {k: v / max(len(batches), 1) for k, v in sums.items()}
        means["epoch"] = epoch
        self.history.append(means)
        self.epoch = epoch
        log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in means.items() if k != "epoch"))
        return means

    def fit(self, epochs: int | None = None, checkpoint_dir=None, on_step: Callable | None = None) -> list[dict]:
        target = self.cfg.train.epochs if epochs is None else epochs
        while self.epoch < target:
            self.train_epoch(on_step)
            if checkpoint_dir is not None:
                save_training_checkpoint(Path(checkpoint_dir) / f"epoch{self.epoch:03d}.ovxc", self)
                save_training_checkpoint(Path(checkpoint_dir) / "last.ovxc", self)
        return self.history

    def state_tensors(self) -> dict[str, np.ndarray]:
        t = self.models.state()
        t.update(self.hdn_opt.tensors("adam_hdn"))
        t.update(self.jln_opt.tensors("adam_jln"))
        t["meta/epoch"] = np.array([self.epoch], dtype=np.float32)
        t["meta/config"] = _encode_text(json.dumps(self.cfg.to_dict(), sort_keys=True))
        t["meta/history"] = _encode_text(json.dumps(self.history))
        return t

    def load_tensors(self, t: dict[str, np.ndarray]):
        self.models.load_state({k: v for k, v in t.items() if not k.startswith(("adam_", "meta/"))})
        if "adam_hdn/step" in t:
            self.hdn_opt.load_tensors("adam_hdn", t)
            self.jln_opt.load_tensors("adam_jln", t)
        self.epoch = int(t["meta/epoch"][0]) if "meta/epoch" in t else 0
        self.history = json.loads(_decode_text(t["meta/history"])) if "meta/history" in t else []


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_training_checkpoint(path, trainer: Trainer):
    save_checkpoint(path, trainer.state_tensors())


def checkpoint_config(tensors: dict[str, np.ndarray]) -> RunConfig:
    if "meta/config" not in tensors:
        raise CheckpointError("checkpoint carries no config")
    return RunConfig.from_dict(json.loads(_decode_text(tensors["meta/config"])))


def load_models(path) -> tuple[Models, RunConfig]:
    t = load_checkpoint(path)
    cfg = checkpoint_config(t)
    models = build_models(cfg)
    models.load_state({k: v for k, v in t.items() if not k.startswith(("adam_", "meta/"))})
    models.eval()
    return models, cfg


def resume_trainer(path, data: list[FrameSample]) -> Trainer:
    t = load_checkpoint(path)
    trainer = Trainer(checkpoint_config(t), data)
    trainer.load_tensors(t)
    return trainer
