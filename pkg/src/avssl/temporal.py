"""Temporal pretext tasks: playback speed, playback direction, clip order."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .augment import BACKWARD, FORWARD, SPEEDS, AugmentError, TemporalParams, random_temporal_params
from .autodiff import Tensor

DIRECTIONS = (FORWARD, BACKWARD)
ORDER_LABELS = ("ordered", "overlapping", "reversed")
ORDERED, OVERLAPPING, REVERSED = range(3)


@dataclass(frozen=True)
class TemporalLabels:
    speed_class: int  # index into SPEEDS
    direction: int  # 0 forward, 1 backward

    @property
    def speed(self) -> int:
        return SPEEDS[self.speed_class]

    @property
    def direction_name(self) -> str:
        return DIRECTIONS[self.direction]

    def reversed(self) -> "TemporalLabels":
        return TemporalLabels(self.speed_class, 1 - self.direction)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_temporal_labels(seed_or_rng, length: int, out_len: int) -> tuple[TemporalLabels, TemporalParams]:
    """Uniform draw over the 4 speeds x 2 directions plus a matching window."""
    if length < SPEEDS[-1] * out_len:
        raise AugmentError(f"source of length {length} too short for {SPEEDS[-1]}x clips of {out_len}")
    rng = _rng(seed_or_rng)
    speed_class = int(rng.integers(len(SPEEDS)))
    direction = int(rng.integers(2))
    params = random_temporal_params(rng, length, out_len, SPEEDS[speed_class], DIRECTIONS[direction])
    return TemporalLabels(speed_class, direction), params


def order_label(window_a: tuple[int, int], window_b: tuple[int, int]) -> int:
    """Relation of two half-open intervals ``[start, end)``."""
    if window_a[1] <= window_b[0]:
        return ORDERED
    if window_b[1] <= window_a[0]:
        return REVERSED
    return OVERLAPPING


@dataclass(frozen=True)
class OrderingInstance:
    window_a: tuple[int, int]
    window_b: tuple[int, int]

    @property
    def label(self) -> int:
        return order_label(self.window_a, self.window_b)

    def swapped(self) -> "OrderingInstance":
        return OrderingInstance(self.window_b, self.window_a)


@lru_cache(maxsize=32)
def _start_pairs(length: int, clip_len: int) -> dict[int, np.ndarray]:
    n = length - clip_len + 1
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a, b = a.ravel(), b.ravel()
    labels = np.where(a + clip_len <= b, ORDERED, np.where(b + clip_len <= a, REVERSED, OVERLAPPING))
    return {lab: np.stack([a[labels == lab], b[labels == lab]], axis=1) for lab in range(3)}


def make_ordering_instance(length: int, clip_len: int, label: int | None = None, seed_or_rng=None) -> OrderingInstance:
    """Two windows of ``clip_len`` frames drawn uniformly among all pairs with
    the target relation; with ``label=None`` the relation is drawn uniformly."""
    if clip_len < 1 or length < 2 * clip_len:
        raise AugmentError(f"timeline of {length} cannot hold two disjoint clips of {clip_len}")
    rng = _rng(seed_or_rng)
    if label is None:
        label = int(rng.integers(3))
    if label not in (ORDERED, OVERLAPPING, REVERSED):
        raise ValueError(f"bad order label {label}")
    pairs = _start_pairs(length, clip_len)[label]
    a, b = pairs[rng.integers(len(pairs))]
    return OrderingInstance((int(a), int(a) + clip_len), (int(b), int(b) + clip_len))


# ---------------------------------------------------------------------------
# losses


def temporal_losses(logits: dict[str, Tensor], labels: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Cross-entropy per task.

    ``logits``/``labels`` are keyed by head name (speed_v, speed_a,
    direction_v, direction_a, order_vv, order_va, order_av, order_aa). Speed
    and direction average their two modalities, order averages whichever
    pairings are present. Returns the three task losses and their sum "temp".
    """
    out = {}
    for task in ("speed", "direction", "order"):
        keys = sorted(k for k in logits if k.startswith(task + "_"))
        if not keys:
            continue
        total = None
        for k in keys:
            ce = ad.cross_entropy(logits[k], labels[k])
            total = ce if total is None else total + ce
        out[task] = total * (1.0 / len(keys))
    temp = None
    for v in out.values():
        temp = v if temp is None else temp + v
    out["temp"] = temp if temp is not None else Tensor(0.0)
    return out


def ssl_objective(l_crl, l_temp, weight: float = 0.5):
    """``L_CRL + weight * L_TEMP``."""
    for name, v in (("L_CRL", l_crl), ("L_TEMP", l_temp)):
        value = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(value):
            raise ad.NonFiniteError(f"{name} is not finite: {value}")
    if weight == 0:
        return l_crl
    return l_crl + l_temp * weight
