"""Synthetic paired video/audio dataset.

Each class has a prototype:

* video: a sinusoidal grating drifting along a class-specific direction (all
  directions have a positive vertical component, so forward and backward
  playback differ in the sign of vertical motion), layered over an
  instance-specific static texture and a slow brightness ramp across the
  timeline;
* audio: a linear chirp (instantaneous frequency rising from ``f0`` to
  ``2 * f0`` over the timeline) with a class-specific base frequency, gated
  by a periodic sharp-attack/slow-decay note envelope and a slow loudness
  ramp. Harmonic mix, note phase and pitch jitter are instance-specific.

The grating's temporal frequency and the note rate are the same for every
class, so playback speed is observable without knowing the class. The two
ramps share the timeline, which makes clip order observable in both
modalities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import ContainerError, read_container, write_container

FORMAT_VERSION = 1
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 8
    instances_per_class: int = 32
    frames: int = 128
    height: int = 16
    width: int = 16
    channels: int = 1
    waveform_len: int = 16384
    sample_rate: int = 8000
    clip_len: int = 16
    test_fraction: float = 0.25
    grating_period: float = 20.0  # frames per grating cycle at 1x
    note_period: float = 0.25  # seconds
    glide_octaves: float = 1.0  # upward pitch glide within each note
    glide_tau: float = 0.03  # seconds
    noise_std: float = 0.01

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DatasetError("need at least 2 classes")
        if self.instances_per_class < 2:
            raise DatasetError("need at least 2 instances per class")
        if self.frames < 8 * self.clip_len:
            raise DatasetError("frames must be >= 8 * clip_len so every speed class fits")
        if self.waveform_len % self.frames:
            raise DatasetError("waveform_len must be a multiple of frames")
        n_test = self.n_test_per_class
        if n_test < 1 or n_test >= self.instances_per_class:
            raise DatasetError("test_fraction leaves an empty split")

    @property
    def samples_per_frame(self) -> int:
        return self.waveform_len // self.frames

    @property
    def n_test_per_class(self) -> int:
        return int(round(self.instances_per_class * self.test_fraction))


@dataclass(eq=False)
class AVSample:
    instance_id: int
    class_id: int
    video: np.ndarray  # [T, H, W, C] float32 in [0, 1]
    waveform: np.ndarray  # [L] float32 in [-1, 1]
    sample_rate: int
    # timeline position of frame j is timeline_offset + timeline_stride * j
    timeline_offset: float = 0.0
    timeline_stride: float = 1.0
    tags: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, AVSample):
            return NotImplemented
        return (
            self.meta() == other.meta()
            and self.video.dtype == other.video.dtype
            and np.array_equal(self.video, other.video)
            and np.array_equal(self.waveform, other.waveform)
        )

    @property
    def samples_per_frame(self) -> float:
        return len(self.waveform) / self.video.shape[0]

    def frame_to_sample(self, t: float) -> int:
        return int(round(t * self.samples_per_frame))

    def meta(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "sample_rate": self.sample_rate,
            "timeline_offset": self.timeline_offset,
            "timeline_stride": self.timeline_stride,
            "tags": list(self.tags),
        }


@dataclass(eq=False)
class Dataset:
    manifest: dict
    splits: dict[str, list[AVSample]]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest == other.manifest and all(
            len(self.splits[s]) == len(other.splits.get(s, []))
            and all(a == b for a, b in zip(self.splits[s], other.splits[s]))
            for s in self.splits
        )

    @property
    def config(self) -> DataConfig:
        return DataConfig(**self.manifest["config"])

    def split(self, name: str) -> list[AVSample]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}")
        return self.splits[name]


# ---------------------------------------------------------------------------
# generation


def class_prototype(cfg: DataConfig, class_id: int) -> dict:
    frac = class_id / (cfg.n_classes - 1)
    return {
        # within (0, 90) deg so a horizontal flip (theta -> 180 - theta) never
        # lands on another class's orientation
        "orientation": math.radians(20.0 + 65.0 * frac),
        "spatial_freq": 2.0 + (class_id % 2),
        "base_freq": 110.0 * 2.2**frac,
    }


def instance_rng(seed: int, instance_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, instance_id]))


def _video(cfg: DataConfig, proto: dict, rng: np.random.Generator) -> np.ndarray:
    T, H, W = cfg.frames, cfg.height, cfg.width
    y, x = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    texture = np.zeros((H, W))
    for _ in range(2):
        th = rng.uniform(0, math.pi)
        fr = rng.integers(1, 4)
        texture += np.cos(2 * math.pi * fr * (x * math.cos(th) + y * math.sin(th)) + rng.uniform(0, 2 * math.pi))
    texture /= math.sqrt(2)
    texture += 0.3 * rng.normal(size=(H, W))
    phase = rng.uniform(0, 2 * math.pi)
    th, fs = proto["orientation"], proto["spatial_freq"]
    spatial = 2 * math.pi * fs * (x * math.cos(th) + y * math.sin(th))
    t = np.arange(T)[:, None, None]
    # phase k.x - w t is constant along x moving in +k, i.e. drift with +y component
    grating = np.sin(spatial[None] - 2 * math.pi * t / cfg.grating_period + phase)
    ramp = t / (T - 1)
    frames = 0.15 + 0.4 * ramp + 0.16 * texture[None] + 0.12 * grating
    frames = np.clip(frames, 0.0, 1.0)
    return np.repeat(frames[..., None], cfg.channels, axis=-1).astype(np.float32)


def _waveform(cfg: DataConfig, proto: dict, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    L, sr = cfg.waveform_len, cfg.sample_rate
    duration = L / sr
    t = np.arange(L) / sr
    f0 = proto["base_freq"] * rng.uniform(0.97, 1.03)
    slope = f0 / duration  # Hz per second: one octave over the timeline
    offset = rng.uniform(0, cfg.note_period)
    tau = np.mod(t - offset, cfg.note_period)
    # each note starts on the chirp and glides upward; the glide is what makes
    # a reversed clip look different at the scale of a few spectrogram pixels
    glide = 2.0 ** (cfg.glide_octaves * (1.0 - np.exp(-tau / cfg.glide_tau)))
    phase = 2 * math.pi * np.cumsum((f0 + slope * t) * glide) / sr
    amps = np.concatenate([[1.0], rng.uniform(0.05, 0.2, size=2)])
    tone = sum(a * np.sin((h + 1) * phase + rng.uniform(0, 2 * math.pi)) for h, a in enumerate(amps))
    tone /= amps.sum()
    envelope = np.minimum(tau / 0.005, 1.0) * np.exp(-tau / 0.06)
    loudness = 0.35 + 0.5 * t / duration
    wave = loudness * envelope * tone + cfg.noise_std * rng.normal(size=L)
    wave = np.clip(wave, -1.0, 1.0).astype(np.float32)
    return wave, {"base_freq": f0, "chirp_slope": slope}


def generate_sample(cfg: DataConfig, seed: int, instance_id: int) -> tuple[AVSample, dict]:
    """Generate one instance; returns the sample and its generator parameters."""
    class_id = instance_id // cfg.instances_per_class
    proto = class_prototype(cfg, class_id)
    rng = instance_rng(seed, instance_id)
    video = _video(cfg, proto, rng)
    waveform, audio_params = _waveform(cfg, proto, rng)
    sample = AVSample(instance_id, class_id, video, waveform, cfg.sample_rate)
    return sample, {**proto, **audio_params}


def split_ids(cfg: DataConfig, seed: int) -> dict[str, list[int]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1]))
    train, test = [], []
    for c in range(cfg.n_classes):
        ids = c * cfg.instances_per_class + rng.permutation(cfg.instances_per_class)
        test.extend(int(i) for i in sorted(ids[: cfg.n_test_per_class]))
        train.extend(int(i) for i in sorted(ids[cfg.n_test_per_class :]))
    return {"train": sorted(train), "test": sorted(test)}


def generate_dataset(cfg: DataConfig, seed: int, out_dir=None) -> Dataset:
    cfg.validate()
    ids = split_ids(cfg, seed)
    manifest = {
        "version": FORMAT_VERSION,
        "seed": int(seed),
        "config": asdict(cfg),
        "counts": {
            "classes": cfg.n_classes,
            "instances": cfg.n_classes * cfg.instances_per_class,
            "train": len(ids["train"]),
            "test": len(ids["test"]),
        },
        "splits": ids,
    }
    splits = {name: [generate_sample(cfg, seed, i)[0] for i in ids[name]] for name in SPLITS}
    ds = Dataset(manifest, splits)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


# ---------------------------------------------------------------------------
# persistence


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, samples in ds.splits.items():
        arrays = {}
        for s in samples:
            arrays[f"{s.instance_id}/video"] = s.video
            arrays[f"{s.instance_id}/waveform"] = s.waveform
        meta = {"manifest": ds.manifest, "split": name, "samples": [s.meta() for s in samples]}
        write_container(out / f"{name}.avd", meta, arrays)
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_file = root / "manifest.json"
    if not manifest_file.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"dataset version {manifest.get('version')} != {FORMAT_VERSION}")
    splits = {}
    for name in manifest["splits"]:
        meta, arrays = read_container(root / f"{name}.avd")
        if meta["manifest"] != manifest:
            raise ContainerError(f"{name}.avd was written with a different manifest")
        samples = []
        for m in meta["samples"]:
            iid = m["instance_id"]
            samples.append(
                AVSample(
                    instance_id=iid,
                    class_id=m["class_id"],
                    video=arrays[f"{iid}/video"],
                    waveform=arrays[f"{iid}/waveform"],
                    sample_rate=m["sample_rate"],
                    timeline_offset=m["timeline_offset"],
                    timeline_stride=m["timeline_stride"],
                    tags=m["tags"],
                )
            )
        if [s.instance_id for s in samples] != manifest["splits"][name]:
            raise DatasetError(f"{name}.avd instance ids disagree with the manifest")
        splits[name] = samples
    return Dataset(manifest, splits)


# ---------------------------------------------------------------------------
# batching


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 7])).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def sample_batch(ds: Dataset, split: str, batch_size: int, seed: int, epoch: int = 0, step: int = 0) -> list[AVSample]:
    """Batch ``step`` of ``epoch``: a slice of a per-epoch permutation, so no
    instance repeats within an epoch (a trailing partial batch is dropped)."""
    samples = ds.split(split)
    if not samples:
        raise DatasetError(f"split {split!r} is empty")
    if batch_size > len(samples):
        raise DatasetError(f"batch_size {batch_size} exceeds split size {len(samples)}")
    if not 0 <= step < steps_per_epoch(len(samples), batch_size):
        raise DatasetError(f"step {step} out of range for this epoch")
    order = epoch_order(len(samples), seed, epoch)
    return [samples[i] for i in order[step * batch_size : (step + 1) * batch_size]]
