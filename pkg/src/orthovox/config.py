"""Run configuration: defaults, JSON files, ``ORTHOVOX_<SECTION>_<FIELD>`` env
overrides, validation and a stable digest echoed into every artifact."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .scenecam import VoxelSpace
from .synthgen import SceneConfig

ENV_PREFIX = "ORTHOVOX_"


class ConfigError(ValueError):
    pass


@dataclass
class SpaceSection:
    origin: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    extent: list = field(default_factory=lambda: [8000.0, 8000.0, 2000.0])
    resolution: list = field(default_factory=lambda: [80, 80, 20])


@dataclass
class SceneSection:
    min_persons: int = 1
    max_persons: int = 4
    camera_count: int = 5
    ring_radius: float = 7500.0
    camera_height: float = 2500.0
    camera_target_height: float = 900.0
    focal_px: float = 134.0
    image_width: int = 320
    image_height: int = 240
    sigma_px: float = 2.5
    dropout_prob: float = 0.0
    jitter_px: float = 0.0


@dataclass
class NetSection:
    hdn_width: int = 32
    hdn1d_width: int = 16
    pose_width: int = 16
    conf_width: int = 16
    pose_beta: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    jitter_mm: float = 100.0


@dataclass
class HdnSection:
    top_p: int = 10
    threshold: float = 0.3
    sigma_mm: float = 200.0
    margin_mm: float = 200.0
    neighborhood: str = "center"


@dataclass
class JlnSection:
    cube_mm: float = 2000.0
    fine_res: int = 64


@dataclass
class EvalSection:
    match_radius_mm: float = 500.0
    ap_thresholds: list = field(default_factory=lambda: [25.0, 50.0, 100.0, 150.0])
    pcp_variant: str = "mean"


SECTIONS = {"space": SpaceSection, "scene": SceneSection, "nets": NetSection, "train": TrainSection,
            "hdn": HdnSection, "jln": JlnSection, "eval": EvalSection}


@dataclass
class RunConfig:
    space: SpaceSection = field(default_factory=SpaceSection)
    scene: SceneSection = field(default_factory=SceneSection)
    nets: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    hdn: HdnSection = field(default_factory=HdnSection)
    jln: JlnSection = field(default_factory=JlnSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversions ------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for section, body in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"{section}: unknown config section")
            if not isinstance(body, dict):
                raise ConfigError(f"{section}: expected an object")
            target = getattr(cfg, section)
            names = {f.name: f for f in fields(target)}
            for key, value in body.items():
                if key not in names:
                    raise ConfigError(f"{section}.{key}: unknown field")
                setattr(target, key, _coerce(f"{section}.{key}", getattr(target, key), value))
        cfg.validate()
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def voxel_space(self) -> VoxelSpace:
        s = self.space
        return VoxelSpace(tuple(map(float, s.origin)), tuple(map(float, s.extent)), tuple(map(int, s.resolution)))

    def scene_config(self) -> SceneConfig:
        s = self.scene
        return SceneConfig(min_persons=s.min_persons, max_persons=s.max_persons, space=self.voxel_space(),
                           camera_count=s.camera_count, ring_radius=s.ring_radius,
                           camera_height=s.camera_height, camera_target_height=s.camera_target_height,
                           focal_px=s.focal_px, image_size=(s.image_width, s.image_height),
                           sigma_px=s.sigma_px, dropout_prob=s.dropout_prob, jitter_px=s.jitter_px)

    def validate(self):
        checks = [
            ("space.extent", all(float(v) > 0 for v in self.space.extent) and len(self.space.extent) == 3,
             "three positive lengths"),
            ("space.origin", len(self.space.origin) == 3, "three coordinates"),
            ("space.resolution", len(self.space.resolution) == 3 and all(int(v) >= 1 for v in self.space.resolution),
             "three positive counts"),
            ("scene.min_persons", self.scene.min_persons >= 0, ">= 0"),
            ("scene.max_persons", self.scene.max_persons >= self.scene.min_persons, ">= scene.min_persons"),
            ("scene.camera_count", self.scene.camera_count >= 1, ">= 1"),
            ("scene.sigma_px", self.scene.sigma_px > 0, "> 0"),
            ("scene.dropout_prob", 0.0 <= self.scene.dropout_prob <= 1.0, "in [0, 1]"),
            ("nets.hdn_width", self.nets.hdn_width >= 1, ">= 1"),
            ("nets.hdn1d_width", self.nets.hdn1d_width >= 1, ">= 1"),
            ("nets.pose_width", self.nets.pose_width >= 1, ">= 1"),
            ("nets.conf_width", self.nets.conf_width >= 1, ">= 1"),
            ("nets.pose_beta", self.nets.pose_beta > 0, "> 0"),
            ("train.epochs", self.train.epochs >= 1, ">= 1"),
            ("train.batch_size", self.train.batch_size >= 1, ">= 1"),
            ("train.lr", self.train.lr > 0, "> 0"),
            ("train.jitter_mm", self.train.jitter_mm >= 0, ">= 0"),
            ("hdn.top_p", self.hdn.top_p >= 1, ">= 1"),
            ("hdn.threshold", 0.0 <= self.hdn.threshold <= 1.0, "in [0, 1]"),
            ("hdn.sigma_mm", self.hdn.sigma_mm > 0, "> 0"),
            ("hdn.margin_mm", self.hdn.margin_mm >= 0, ">= 0"),
            ("hdn.neighborhood", self.hdn.neighborhood in ("center", "4"), "'center' or '4'"),
            ("jln.cube_mm", self.jln.cube_mm > 0, "> 0"),
            ("jln.fine_res", self.jln.fine_res >= 8, ">= 8"),
            ("eval.match_radius_mm", self.eval.match_radius_mm > 0, "> 0"),
            ("eval.pcp_variant", self.eval.pcp_variant in ("mean", "both"), "'mean' or 'both'"),
        ]
        for name, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{name}: must be {rule}")
        try:
            self.scene_config()
        except ValueError as exc:
            raise ConfigError(f"scene: {exc}") from exc
        return self


def _coerce(name: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected a boolean")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def env_overrides(environ=None) -> dict:
    """``ORTHOVOX_TRAIN_EPOCHS=3`` -> ``{"train": {"epochs": 3}}``; non-string fields parse as JSON when possible."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        section = next((s for s in SECTIONS if rest.startswith(s + "_")), None)
        if section is None:
            continue
        name = rest[len(section) + 1:]
        default = getattr(SECTIONS[section](), name, None)
        try:
            value = raw if isinstance(default, str) else json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, body in extra.items():
        out.setdefault(section, {}).update(body)
    return out


def load_config(path=None, environ=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- environment <- explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    return RunConfig.from_dict(data)
