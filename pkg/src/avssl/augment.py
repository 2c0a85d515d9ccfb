"""Temporal/spatial augmentations, STFT spectrograms and manipulation suites.

Temporal transforms act on axis 0 of any array, so the same code handles
frame sequences ``[T, H, W, C]`` and waveforms ``[L]``. Audio windows are the
video windows scaled by ``samples_per_frame``; speed and direction are shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data import AVSample, Dataset

SPEEDS = (1, 2, 4, 8)
FORWARD, BACKWARD = "forward", "backward"


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalParams:
    speed: int = 1
    direction: str = FORWARD
    crop_start: int = 0
    out_len: int = 16

    def __post_init__(self):
        if self.speed not in SPEEDS:
            raise AugmentError(f"speed must be one of {SPEEDS}, got {self.speed}")
        if self.direction not in (FORWARD, BACKWARD):
            raise AugmentError(f"bad direction {self.direction!r}")
        if self.crop_start < 0 or self.out_len < 1:
            raise AugmentError("crop_start must be >= 0 and out_len >= 1")

    @property
    def span(self) -> int:
        """Source length covered by the window."""
        return self.speed * self.out_len

    def scaled(self, ratio: float) -> "TemporalParams":
        return replace(self, crop_start=int(round(self.crop_start * ratio)), out_len=int(round(self.out_len * ratio)))


def temporal_transform(signal: np.ndarray, params: TemporalParams) -> np.ndarray:
    """``out[j] = signal[crop_start + speed * j]``, index-reversed when backward."""
    if params.crop_start + params.span > len(signal):
        raise AugmentError(
            f"window [{params.crop_start}, {params.crop_start + params.span}) exceeds length {len(signal)}"
        )
    out = signal[params.crop_start : params.crop_start + params.span : params.speed]
    if params.direction == BACKWARD:
        out = out[::-1]
    return np.ascontiguousarray(out)


def audio_params(params: TemporalParams, samples_per_frame: float) -> TemporalParams:
    return params.scaled(samples_per_frame)


def aligned_pair_transform(video: np.ndarray, waveform: np.ndarray, params: TemporalParams):
    """Apply one temporal transform to both modalities of the same clip."""
    ratio = len(waveform) / len(video)
    return temporal_transform(video, params), temporal_transform(waveform, audio_params(params, ratio))


def random_temporal_params(rng: np.random.Generator, length: int, out_len: int, speed=None, direction=None) -> TemporalParams:
    speed = SPEEDS[rng.integers(len(SPEEDS))] if speed is None else speed
    direction = (FORWARD, BACKWARD)[rng.integers(2)] if direction is None else direction
    span = speed * out_len
    if span > length:
        raise AugmentError(f"source of length {length} too short for speed {speed}")
    crop_start = int(rng.integers(0, length - span + 1))
    return TemporalParams(int(speed), direction, crop_start, out_len)


# ---------------------------------------------------------------------------
# spectrograms


@dataclass
class Spectrogram:
    values: np.ndarray  # [freq, time]
    n_fft: int
    hop: int


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * math.pi * np.arange(n) / n)


def stft_frames(waveform: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed frames ``[n_frames, n_fft]`` (no padding)."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if len(waveform) < n_fft:
        raise AugmentError(f"waveform of length {len(waveform)} shorter than n_fft={n_fft}")
    n_frames = 1 + (len(waveform) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return waveform[idx] * _hann(n_fft)


def stft_magnitude(waveform: np.ndarray, n_fft: int = 256, hop: int = 64) -> np.ndarray:
    """One-sided STFT magnitude ``[n_fft // 2 + 1, n_frames]``."""
    return np.abs(np.fft.rfft(stft_frames(waveform, n_fft, hop), axis=1)).T


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation matrix with half-pixel centers (identity when n_in == n_out)."""
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1 - w)
    np.add.at(m, (np.arange(n_out), hi), w)
    return m


def resize_2d(values: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return resize_matrix(values.shape[0], rows) @ values @ resize_matrix(values.shape[1], cols).T


def stft_spectrogram(waveform: np.ndarray, n_fft: int = 256, hop: int = 64, size: int | None = 64) -> Spectrogram:
    """log1p STFT magnitude, bilinearly resized to ``size x size`` unless ``size`` is None."""
    values = np.log1p(stft_magnitude(waveform, n_fft, hop))
    if size is not None:
        values = resize_2d(values, size, size)
    return Spectrogram(values, n_fft, hop)


def spectrogram_speed_variant(
    waveform: np.ndarray,
    speed: int,
    n_fft: int = 256,
    hop: int = 64,
    randomize_hop: bool = False,
    rng: np.random.Generator | None = None,
) -> Spectrogram:
    """Speed change applied to the spectrogram instead of the waveform.

    ``waveform`` is the un-subsampled source window. Its log spectrogram is
    resized along time by ``1 / speed``; frequencies are left alone. With
    ``randomize_hop`` the STFT frame step is drawn from ``[0.75, 1.25] * hop``.
    """
    if randomize_hop:
        rng = rng or np.random.default_rng()
        hop = int(rng.integers(int(math.ceil(0.75 * hop)), int(math.floor(1.25 * hop)) + 1))
    values = np.log1p(stft_magnitude(waveform, n_fft, hop))
    n_time = int(round(values.shape[1] / speed))
    if n_time < 2:
        raise AugmentError("time axis shorter than 2 after the speed resize")
    if n_time != values.shape[1]:
        values = values @ resize_matrix(values.shape[1], n_time).T
    return Spectrogram(values, n_fft, hop)


def audio_clip_spectrogram(
    waveform: np.ndarray,
    params: TemporalParams,
    samples_per_frame: float,
    n_fft: int = 256,
    hop: int = 64,
    size: int = 64,
    mode: str = "raw",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Spectrogram ``[size, size]`` for the audio matching video window ``params``.

    ``mode`` is ``"raw"`` (subsample and reverse the waveform, then STFT),
    ``"resize"`` (STFT of the 1x window, resized along time) or
    ``"resize_random_hop"``.
    """
    ap = audio_params(params, samples_per_frame)
    if mode == "raw":
        return stft_spectrogram(temporal_transform(waveform, ap), n_fft, hop, size).values
    if mode not in ("resize", "resize_random_hop"):
        raise AugmentError(f"unknown audio speed mode {mode!r}")
    if ap.crop_start + ap.span > len(waveform):
        raise AugmentError("audio window out of range")
    window = waveform[ap.crop_start : ap.crop_start + ap.span]
    spec = spectrogram_speed_variant(window, params.speed, n_fft, hop, mode == "resize_random_hop", rng)
    values = spec.values[:, ::-1] if params.direction == BACKWARD else spec.values
    return resize_2d(values, size, size)


# ---------------------------------------------------------------------------
# spatial / intensity augmentation (video only)


@dataclass(frozen=True)
class SpatialParams:
    flip: bool = False
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width
    brightness: float = 0.0
    contrast: float = 1.0


def random_spatial_params(rng: np.random.Generator, height: int, width: int) -> SpatialParams:
    side = rng.uniform(0.75, 1.0)
    h, w = max(2, int(round(side * height))), max(2, int(round(side * width)))
    top, left = int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1))
    return SpatialParams(
        flip=bool(rng.integers(2)),
        crop=(top, left, h, w),
        brightness=float(rng.uniform(-0.15, 0.15)),
        contrast=float(rng.uniform(0.85, 1.15)),
    )


def spatial_augment(clip: np.ndarray, params: SpatialParams) -> np.ndarray:
    """Crop (resized back to full size), horizontal flip, contrast, brightness."""
    T, H, W, C = clip.shape
    out = np.asarray(clip, dtype=np.float64)
    if params.crop is not None:
        top, left, h, w = params.crop
        if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
            raise AugmentError(f"crop {params.crop} outside {H}x{W}")
        out = out[:, top : top + h, left : left + w]
        out = np.einsum("ih,thwc,jw->tijc", resize_matrix(h, H), out, resize_matrix(w, W))
    if params.flip:
        out = out[:, :, ::-1]
    if params.contrast != 1.0:
        m = out.mean()
        out = (out - m) * params.contrast + m
    if params.brightness != 0.0:
        out = out + params.brightness
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# manipulation suites for fingerprinting

SUITES = ("ip", "s", "t", "c")


def _noise(s: AVSample, rng, strength):
    video = s.video + rng.normal(scale=0.05 * strength, size=s.video.shape)
    wave_range = float(s.waveform.max() - s.waveform.min())
    wave = s.waveform + rng.normal(scale=0.05 * strength * wave_range, size=s.waveform.shape)
    return video, wave


def _blur_clicks(s: AVSample, rng, strength):
    video = s.video.astype(np.float64)
    if strength > 0:
        video = ndimage.gaussian_filter(video, sigma=(0, 0.8 * strength, 0.8 * strength, 0))
    wave = s.waveform.astype(np.float64).copy()
    n_clicks = 20
    pos = rng.choice(len(wave), n_clicks, replace=False)
    wave[pos] += 0.8 * strength * rng.choice([-1.0, 1.0], n_clicks)
    return video, wave


def _crop_pad(s: AVSample, rng, strength):
    T, H, W, C = s.video.shape
    side = math.sqrt(rng.uniform(0.7, 1.0))
    h, w = max(2, int(round(side * H))), max(2, int(round(side * W)))
    top, left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    dst_top, dst_left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    video = np.zeros_like(s.video, dtype=np.float64)
    video[:, dst_top : dst_top + h, dst_left : dst_left + w] = s.video[:, top : top + h, left : left + w]
    # audio: -20 dB over one random octave
    spec = np.fft.rfft(s.waveform.astype(np.float64))
    freqs = np.fft.rfftfreq(len(s.waveform), d=1.0 / s.sample_rate)
    lo = rng.uniform(100.0, s.sample_rate / 4)
    band = (freqs >= lo) & (freqs < 2 * lo)
    spec[band] *= 10 ** (-20 * strength / 20)
    wave = np.fft.irfft(spec, n=len(s.waveform))
    return video, wave


def _rotate_pitch(s: AVSample, rng, strength):
    angle = rng.uniform(-10.0, 10.0) * strength
    video = ndimage.rotate(s.video.astype(np.float64), angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    ratio = 1.0 + rng.uniform(-0.06, 0.06) * strength
    n = len(s.waveform)
    wave = np.interp(np.arange(n) * ratio, np.arange(n), s.waveform.astype(np.float64))
    return video, wave


def _speed_crop(s: AVSample, rng, strength, min_frames: int = 16):
    T = s.video.shape[0]
    speed = int(rng.choice([2, 4]))
    keep = int(round(T * rng.uniform(0.7, 1.0)))
    n_frames = max(min_frames, keep // speed)
    start = int(rng.integers(0, T - n_frames * speed + 1))
    p = TemporalParams(speed, FORWARD, start, n_frames)
    video, wave = aligned_pair_transform(s.video, s.waveform, p)
    return video, wave, start, speed


_CATEGORIES = {
    "ip": [("noise", _noise), ("blur_clicks", _blur_clicks)],
    "s": [("crop_pad_band", _crop_pad), ("rotate_pitch", _rotate_pitch)],
    "t": [("speed_crop", _speed_crop)],
}


def _apply(sample: AVSample, name, fn, rng, strength) -> AVSample:
    out = fn(sample, rng, strength)
    video, wave = out[0], out[1]
    offset, stride = sample.timeline_offset, sample.timeline_stride
    if len(out) == 4:
        offset = offset + stride * out[2]
        stride = stride * out[3]
    return AVSample(
        sample.instance_id,
        sample.class_id,
        np.clip(video, 0.0, 1.0).astype(np.float32),
        np.clip(wave, -1.0, 1.0).astype(np.float32),
        sample.sample_rate,
        timeline_offset=float(offset),
        timeline_stride=float(stride),
        tags=sample.tags + [name],
    )


def manipulation_suite(sample: AVSample, suite: str, seed: int, strength: float = 1.0) -> AVSample:
    """Manipulated copy of ``sample``; deterministic in (seed, instance_id, suite).

    ``ip``/``s``/``t`` apply every transform of that category; ``c`` applies one
    randomly chosen transform from each of ip, s and t, in that order.
    ``strength`` scales every magnitude; 0 leaves ip and s as identities.
    """
    suite = suite.lower()
    if suite not in SUITES:
        raise AugmentError(f"unknown suite {suite!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, sample.instance_id, SUITES.index(suite)]))
    if suite == "c":
        chosen = [_CATEGORIES[c][rng.integers(len(_CATEGORIES[c]))] for c in ("ip", "s", "t")]
    else:
        chosen = _CATEGORIES[suite]
    out = sample
    for name, fn in chosen:
        out = _apply(out, name, fn, rng, strength)
    return out


def augment_dataset(ds: Dataset, suite: str, seed: int, strength: float = 1.0) -> Dataset:
    manifest = dict(ds.manifest)
    manifest["manipulation"] = {"suite": suite.lower(), "seed": int(seed), "strength": float(strength)}
    splits = {
        name: [manipulation_suite(s, suite, seed, strength) for s in samples] for name, samples in ds.splits.items()
    }
    return Dataset(manifest, splits)
