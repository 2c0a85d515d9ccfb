"""Desk-scale encoders, projection/predictor MLPs and temporal-task heads.

All modules are functional in the train/eval switch: every forward takes
``train`` explicitly, which decides whether batch norm uses batch statistics
(and updates its running averages) or the stored running statistics.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .container import ContainerError, read_container, write_container

HEAD_CLASSES = {"speed": 4, "direction": 2, "order": 3}
ORDER_PAIRS = ("vv", "va", "av", "aa")


class Module:
    """Parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, BatchNormState):
                out += [(f"{full}.gamma", value.gamma), (f"{full}.beta", value.beta)]
            elif isinstance(value, Module):
                out += value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out += item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        out += item.named_parameters(f"{full}.{key}.")
        return out

    def batch_norms(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                out.append((full, value))
            elif isinstance(value, Module):
                out += value.batch_norms(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out += item.batch_norms(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        out += item.batch_norms(f"{full}.{key}.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        for name, bn in self.batch_norms():
            arrays[f"{name}.running_mean"] = bn.running_mean
            arrays[f"{name}.running_var"] = bn.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.data.shape:
                raise ad.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.data.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for name, bn in self.batch_norms():
            bn.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """Affine layer. ``bias=False`` for layers followed by batch norm, whose
    shift parameter makes a bias redundant (its gradient is identically 0)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _uniform(rng, (n_out,), n_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"Linear expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class ConvBlock(Module):
    """conv ("same" padding for odd kernels, no bias) -> batch norm -> relu.

    ``kernel`` defaults to 3 along every axis."""

    def __init__(self, c_in: int, c_out: int, ndim: int, stride: int, rng: np.random.Generator, kernel=None):
        kernel = tuple(kernel) if kernel is not None else (3,) * ndim
        self.weight = _uniform(rng, (c_out, c_in) + kernel, c_in * int(np.prod(kernel)))
        self.bn = BatchNormState(c_out)
        self.stride = stride
        self.padding = tuple(k // 2 for k in kernel)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = ad.conv(x, self.weight, None, stride=self.stride, padding=self.padding)
        return ad.relu(ad.batch_norm(h, self.bn, train))


class MLP(Module):
    """Linear layers with batch norm + relu between them.

    ``out_bn`` adds batch norm on the output layer (used by the projection
    MLPs, not by predictors or classifier heads).
    """

    def __init__(self, widths: list[int], rng: np.random.Generator, out_bn: bool = False):
        n = len(widths) - 1
        self.layers = [Linear(a, b, rng, bias=(i == n - 1 and not out_bn)) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.norms = [BatchNormState(w) for w in widths[1:-1]]
        self.out_norm = BatchNormState(widths[-1]) if out_bn else None

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        for layer, bn in zip(self.layers[:-1], self.norms):
            x = ad.relu(ad.batch_norm(layer(x), bn, train))
        x = self.layers[-1](x)
        if self.out_norm is not None:
            x = ad.batch_norm(x, self.out_norm, train)
        return x

    def batch_norms(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out = [(f"{prefix}norms.{i}", bn) for i, bn in enumerate(self.norms)]
        if self.out_norm is not None:
            out.append((f"{prefix}out_norm", self.out_norm))
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}layers.{i}.")
        for name, bn in self.batch_norms(prefix):
            out += [(f"{name}.gamma", bn.gamma), (f"{name}.beta", bn.beta)]
        return out


@dataclass(frozen=True)
class ModelConfig:
    clip_len: int = 16
    height: int = 16
    width: int = 16
    channels: int = 1
    spec_size: int = 64
    video_channels: tuple = (8, 16)
    video_time_kernel: int = 5
    audio_time_kernel: int = 5
    audio_channels: tuple = (8, 16)
    d_v: int = 64
    d_a: int = 64
    hidden: int = 128
    d_e: int = 32
    use_predictor: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["video_channels"] = list(self.video_channels)
        d["audio_channels"] = list(self.audio_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["video_channels"] = tuple(d["video_channels"])
        d["audio_channels"] = tuple(d["audio_channels"])
        return cls(**d)


class VideoEncoder(Module):
    """Stride-2 3-D conv blocks, global average pool over (T, H, W), then a
    linear layer with batch norm and relu up to ``d_v``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        chans = (cfg.channels,) + tuple(cfg.video_channels)
        kernel = (cfg.video_time_kernel, 3, 3)
        self.blocks = [ConvBlock(a, b, 3, 2, rng, kernel) for a, b in zip(chans[:-1], chans[1:])]
        self.fc = Linear(chans[-1], cfg.d_v, rng, bias=False)
        self.bn = BatchNormState(cfg.d_v)
        self.input_shape = (cfg.clip_len, cfg.height, cfg.width, cfg.channels)

    def __call__(self, clips, train: bool) -> Tensor:
        """clips: [N, T, H, W, C] -> features [N, d_v]."""
        clips = np.asarray(clips.data if isinstance(clips, Tensor) else clips, dtype=np.float64)
        if clips.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"video clip shape {clips.shape[1:]} != {self.input_shape}")
        x = Tensor(np.ascontiguousarray(np.moveaxis(clips, -1, 1)))
        return self.forward_tensor(x, train)

    def forward_tensor(self, x: Tensor, train: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, train)
        pooled = x.mean(axis=(2, 3, 4))
        return ad.relu(ad.batch_norm(self.fc(pooled), self.bn, train))


class AudioEncoder(Module):
    """Stride-2 2-D conv blocks over [freq, time]; pooled over time only so the
    frequency layout (pitch) survives, then linear + batch norm + relu to ``d_a``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        chans = (1,) + tuple(cfg.audio_channels)
        kernel = (3, cfg.audio_time_kernel)
        self.blocks = [ConvBlock(a, b, 2, 2, rng, kernel) for a, b in zip(chans[:-1], chans[1:])]
        n_freq = cfg.spec_size
        for _ in self.blocks:
            n_freq = (n_freq - 1) // 2 + 1
        self.fc = Linear(chans[-1] * n_freq, cfg.d_a, rng, bias=False)
        self.bn = BatchNormState(cfg.d_a)
        self.input_shape = (cfg.spec_size, cfg.spec_size)

    def __call__(self, specs, train: bool) -> Tensor:
        """specs: [N, F, T] -> features [N, d_a]."""
        specs = np.asarray(specs.data if isinstance(specs, Tensor) else specs, dtype=np.float64)
        if specs.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"spectrogram shape {specs.shape[1:]} != {self.input_shape}")
        return self.forward_tensor(Tensor(specs[:, None]), train)

    def forward_tensor(self, x: Tensor, train: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, train)
        pooled = x.mean(axis=3)
        flat = pooled.reshape(pooled.shape[0], -1)
        return ad.relu(ad.batch_norm(self.fc(flat), self.bn, train))


class AVModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1234]))
        h, e = cfg.hidden, cfg.d_e
        self.video_encoder = VideoEncoder(cfg, rng)
        self.audio_encoder = AudioEncoder(cfg, rng)
        self.proj_v = MLP([cfg.d_v, h, h, e], rng, out_bn=True)
        self.proj_a = MLP([cfg.d_a, h, h, e], rng, out_bn=True)
        self.pred_v = MLP([e, h, e], rng) if cfg.use_predictor else None
        self.pred_a = MLP([e, h, e], rng) if cfg.use_predictor else None
        dims = {"v": cfg.d_v, "a": cfg.d_a}
        self.heads = {
            "speed_v": MLP([cfg.d_v, h, h, HEAD_CLASSES["speed"]], rng),
            "speed_a": MLP([cfg.d_a, h, h, HEAD_CLASSES["speed"]], rng),
            "direction_v": MLP([cfg.d_v, h, h, HEAD_CLASSES["direction"]], rng),
            "direction_a": MLP([cfg.d_a, h, h, HEAD_CLASSES["direction"]], rng),
        }
        for pair in ORDER_PAIRS:
            width = dims[pair[0]] + dims[pair[1]]
            self.heads[f"order_{pair}"] = MLP([width, h, h, HEAD_CLASSES["order"]], rng)

    # forward pieces -----------------------------------------------------

    def video_encode(self, clips, train: bool = False) -> Tensor:
        return self.video_encoder(clips, train)

    def audio_encode(self, specs, train: bool = False) -> Tensor:
        return self.audio_encoder(specs, train)

    def project(self, features: Tensor, which: str, train: bool = False) -> Tensor:
        return {"v": self.proj_v, "a": self.proj_a}[which](features, train)

    def predict(self, embedding: Tensor, which: str, train: bool = False) -> Tensor:
        mlp = {"v": self.pred_v, "a": self.pred_a}[which]
        if mlp is None:
            return embedding
        if embedding.shape[-1] != mlp.in_width:
            raise ad.ShapeError(f"predictor expects width {mlp.in_width}, got {embedding.shape[-1]}")
        return mlp(embedding, train)

    def head_forward(self, kind: str, inputs: list[Tensor], train: bool = False) -> Tensor:
        """``kind`` is speed_v/a, direction_v/a (one input) or order_xy (two inputs)."""
        if kind not in self.heads:
            raise KeyError(f"unknown head {kind!r}")
        arity = 2 if kind.startswith("order_") else 1
        if len(inputs) != arity:
            raise ValueError(f"head {kind} takes {arity} input(s), got {len(inputs)}")
        x = inputs[0] if arity == 1 else ad.concat(inputs, axis=1)
        return self.heads[kind](x, train)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AVModel, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = v
    doc = {"kind": "avssl-checkpoint", "model_config": model.config.to_dict(), **(meta or {})}
    write_container(path, doc, arrays)


def load_checkpoint(path) -> tuple[AVModel, dict, dict[str, np.ndarray]]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "avssl-checkpoint":
        raise ContainerError(f"{path} is not a checkpoint")
    model = AVModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, meta, extra


def parameter_digest(model: Module) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
