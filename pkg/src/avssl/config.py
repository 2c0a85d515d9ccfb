"""Run configuration: one YAML file with data, model, loss, train and eval sections."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .contrastive import LossConfig
from .data import DataConfig
from .nets import ModelConfig

AUDIO_MODES = ("raw", "resize", "resize_random_hop")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr_max: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    warmup_epochs: float = 1.0
    lambda_temp: float = 0.5
    use_audio: bool = True
    audio_mode: str = "raw"
    spatial_aug: bool = True
    speed_task: bool = True
    direction_task: bool = True
    order_task: bool = True
    eval_every: int = 5  # epochs; 0 disables periodic evaluation


@dataclass(frozen=True)
class EvalConfig:
    crops: int = 4
    ks: tuple = (1, 5, 20)
    probe_iters: int = 500
    probe_lr: float = 0.1
    head_clips: int = 4  # labelled clips per test instance for head accuracy
    fingerprint_suite: str = "t"
    manipulation_seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_path: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        t, d, m = self.train, self.data, self.model
        if t.lr_max <= 0:
            raise ConfigError("lr_max must be positive")
        if t.batch_size < 2 or t.epochs < 1:
            raise ConfigError("need batch_size >= 2 and epochs >= 1")
        if not 0 <= t.warmup_epochs <= t.epochs:
            raise ConfigError("warmup must lie within the run")
        if t.audio_mode not in AUDIO_MODES:
            raise ConfigError(f"audio_mode must be one of {AUDIO_MODES}")
        if (m.clip_len, m.height, m.width, m.channels) != (d.clip_len, d.height, d.width, d.channels):
            raise ConfigError("model input shape must match the data config")

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "data_path": self.data_path,
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }
        out["train"]["betas"] = list(self.train.betas)
        out["eval"]["ks"] = list(self.eval.ks)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def section(kind, key):
            values = dict(d.get(key) or {})
            bad = set(values) - {f.name for f in fields(kind)}
            if bad:
                raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
            for name in ("betas", "ks", "video_channels", "audio_channels"):
                if name in values:
                    values[name] = tuple(values[name])
            return kind(**values)

        try:
            return cls(
                seed=int(d.get("seed", 0)),
                data_path=d.get("data_path"),
                data=section(DataConfig, "data"),
                model=section(ModelConfig, "model"),
                loss=section(LossConfig, "loss"),
                train=section(TrainConfig, "train"),
                eval=section(EvalConfig, "eval"),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(loss={"variant": "nnclr"}, train={"epochs": 2})``."""
        kwargs = {}
        for key, values in sections.items():
            current = getattr(self, key)
            kwargs[key] = replace(current, **values) if isinstance(values, dict) else values
        return replace(self, **kwargs)

    def effective_model(self) -> ModelConfig:
        """Model config with the predictor dropped when the loss variant has none."""
        return replace(self.model, use_predictor=self.model.use_predictor and self.loss.uses_predictor)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return RunConfig.from_dict(raw or {})


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
