"""Run configuration: one JSON document pins every stage's knobs and seeds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

from .gscene import DensifyConfig
from .physics import LossWeights, OptimizeConfig
from .poseref import RefineConfig
from .util import read_json, write_json


class ConfigError(Exception):
    pass


@dataclass
class SynthConfig:
    n_views: int = 6
    image_size: int = 64
    focal: float = 70.0
    camera_radius: float = 1.2
    camera_height: float = 0.3
    joint_count: int = 8
    shape_count: int = 2
    bone_length: float = 0.12
    body_radius: float = 0.05
    ring_segments: int = 8
    rings_per_bone: int = 3
    n_frames: int = 80
    target_frame: int = 0
    object_radius: float = 0.09
    object_subdivisions: int = 2
    object_gap: float = 0.004
    contact_threshold: float = 0.05
    detection_noise_px: float = 1.0
    init_pose_noise_deg: float = 5.0
    init_trans_noise: float = 0.01
    init_shape_noise: float = 0.2
    marker_count: int = 48
    marker_noise: float = 0.0
    gaussian_opacity: float = 0.95
    modulation_hidden: int = 64
    modulation_freqs: int = 10
    modulation_init_scale: float = 0.1
    seed: int = 0


@dataclass
class IcpConfig:
    iters: int = 300
    tol: float = 1e-12


@dataclass
class SdfConfig:
    dims: int = 64
    pad: float = 0.15


@dataclass
class ContactTrainConfig:
    feature_dim: int = 128
    projected_dim: int = 32
    train_frames: int = 64
    heldout_every: int = 5
    epochs: int = 400
    lr: float = 1e-2
    tau: float = 0.5
    scale_dim: str = "projected"
    noise_sigma: float = 0.05
    keep_prob: float = 0.6
    seed: int = 0


@dataclass
class BenchmarkConfig:
    gaussians: int = 10000
    image_size: int = 256
    frames: int = 100
    seed: int = 0


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    sdf: SdfConfig = field(default_factory=SdfConfig)
    contact: ContactTrainConfig = field(default_factory=ContactTrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    physics_enabled: bool = True
    seed: int = 0

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["optimize"]["background"] = list(doc["optimize"]["background"])
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        try:
            opt = dict(doc.get("optimize", {}))
            if "background" in opt:
                opt["background"] = tuple(opt["background"])
            if "densify" in opt:
                opt["densify"] = DensifyConfig(**opt["densify"])
            return cls(
                synth=SynthConfig(**doc.get("synth", {})),
                refine=RefineConfig(**doc.get("refine", {})),
                icp=IcpConfig(**doc.get("icp", {})),
                sdf=SdfConfig(**doc.get("sdf", {})),
                contact=ContactTrainConfig(**doc.get("contact", {})),
                weights=LossWeights(**doc.get("weights", {})),
                optimize=OptimizeConfig(**opt),
                benchmark=BenchmarkConfig(**doc.get("benchmark", {})),
                physics_enabled=bool(doc.get("physics_enabled", True)),
                seed=int(doc.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run configuration: {exc}") from exc

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = read_json(path)
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_json(doc)

    def apply_overrides(
        self,
        seed: int | None = None,
        views: int | None = None,
        grid_dims: int | None = None,
        no_physics: bool = False,
    ) -> "RunConfig":
        if seed is not None:
            self.seed = seed
            self.synth.seed = seed
            self.contact.seed = seed
            self.optimize.seed = seed
        if views is not None:
            if views < 1:
                raise ConfigError("--views must be >= 1")
            self.synth.n_views = views
        if grid_dims is not None:
            if grid_dims < 2:
                raise ConfigError("--grid-dims must be >= 2")
            self.sdf.dims = grid_dims
        if no_physics:
            self.physics_enabled = False
        return self
