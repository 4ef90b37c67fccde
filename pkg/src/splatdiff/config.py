"""Run configuration: a sectioned JSON document sufficient to reproduce a run.

Every command resolves its configuration (defaults < config file < CLI
flags) and writes the result next to its outputs. Checkpoints embed a
digest of the architecture-determining sections so loading a checkpoint
under a different architecture fails fast.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DatasetSpec
from .errors import ConfigError
from .guidance import GuidanceConfig
from .ioutil import atomic_write_text
from .nn.denoiser import DenoiserConfig
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, DEFAULT_T_STAR, make_linear_schedule
from .teacher import TeacherConfig
from .trainer import TrainConfig


@dataclass
class ScheduleSection:
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    t_star: int = DEFAULT_T_STAR

    def build(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end, self.t_star)


@dataclass
class ModelSection:
    image_size: int = 64
    stride: int = 4
    enc_channels: tuple = (32, 64)
    global_dim: int = 64
    time_dim: int = 64
    hidden_dim: int = 256
    hidden_layers: int = 4
    residual_scale: float = 1.0
    teacher_channels: tuple = (32, 64, 64)

    def denoiser_config(self, total_steps: int) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size, stride=self.stride, enc_channels=tuple(self.enc_channels),
            global_dim=self.global_dim, time_dim=self.time_dim, hidden_dim=self.hidden_dim,
            hidden_layers=self.hidden_layers, total_steps=total_steps,
            residual_scale=self.residual_scale,
        )

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(image_size=self.image_size, stride=self.stride,
                             channels=tuple(self.teacher_channels))


@dataclass
class TrainSection:
    stage: int = 1
    steps: int = 800
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    t_policy: str = ""          # resolved per stage if empty
    unroll_steps: int = 10
    lambda_policy: str = "late_heavy"
    w_cyc: float = 1.0
    use_3dgs_loss: bool | None = None   # resolved per stage if None
    use_image_loss: bool = True
    use_cycle_loss: bool = True
    cycle_steps: int = 10
    start_at_T: bool = False
    eval_every: int = 0
    eval_scenes: int = 8
    teacher_steps: int = 900
    teacher_batch: int = 8
    teacher_lr: float = 1e-3

    def train_config(self, stage: int) -> TrainConfig:
        t_policy = self.t_policy or ("uniform_full" if stage == 1 else "above_t_star")
        use_3dgs = self.use_3dgs_loss if self.use_3dgs_loss is not None else (stage == 1)
        return TrainConfig(
            stage=stage, steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, t_policy=t_policy, unroll_steps=self.unroll_steps,
            lambda_policy=self.lambda_policy, w_cyc=self.w_cyc, use_3dgs_loss=use_3dgs,
            use_image_loss=self.use_image_loss, use_cycle_loss=self.use_cycle_loss,
            cycle_steps=self.cycle_steps, start_at_T=self.start_at_T,
            eval_every=self.eval_every, eval_scenes=self.eval_scenes,
        )


@dataclass
class GuidanceSection:
    strength: float = 1.0
    steps: int = 10
    substep_mask: tuple | None = None
    gs_steps: int = 300
    gs_lr: float = 5e-3

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(strength=self.strength, steps=self.steps,
                              substep_mask=self.substep_mask, gs_steps=self.gs_steps,
                              gs_lr=self.gs_lr)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)

    _SECTIONS = ("dataset", "schedule", "model", "train", "guidance")

    def to_dict(self) -> dict:
        out = {}
        for name in self._SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in section.items()}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        types = {"dataset": DatasetSpec, "schedule": ScheduleSection, "model": ModelSection,
                 "train": TrainSection, "guidance": GuidanceSection}
        for name, payload in doc.items():
            if name not in types:
                raise ConfigError(f"unknown config section: {name}")
            current = dataclasses.asdict(getattr(cfg, name))
            fields = {f.name: f for f in dataclasses.fields(types[name])}
            for key, value in payload.items():
                if key not in fields:
                    raise ConfigError(f"unknown key {name}.{key}")
                if isinstance(current[key], tuple) and isinstance(value, list):
                    value = tuple(value)
                current[key] = value
            for key in list(current):
                if isinstance(current[key], list):
                    current[key] = tuple(current[key])
            setattr(cfg, name, types[name](**current))
        return cfg

    def apply_overrides(self, overrides: dict) -> None:
        """Dotted-path overrides like {"train.lr": 1e-4} from CLI flags."""
        for path, value in overrides.items():
            if value is None:
                continue
            section_name, _, key = path.partition(".")
            if section_name not in self._SECTIONS or not key:
                raise ConfigError(f"unknown config override: {path}")
            section = getattr(self, section_name)
            if not hasattr(section, key):
                raise ConfigError(f"unknown config override: {path}")
            setattr(section, key, value)

    # -- digests -----------------------------------------------------------

    def _digest_of(self, doc: dict) -> str:
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def denoiser_digest(self) -> str:
        doc = {"kind": "denoiser", "model": self.to_dict()["model"], "schedule": self.to_dict()["schedule"]}
        return self._digest_of(doc)

    def teacher_digest(self) -> str:
        model = self.to_dict()["model"]
        doc = {"kind": "teacher",
               "arch": {k: model[k] for k in ("image_size", "stride", "teacher_channels")}}
        return self._digest_of(doc)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from None
    return RunConfig.from_dict(doc)


def save_resolved_config(cfg: RunConfig, out_dir) -> None:
    atomic_write_text(Path(out_dir) / "config.json",
                      json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
