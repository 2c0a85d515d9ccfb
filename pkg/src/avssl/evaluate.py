"""Feature extraction and the evaluation protocols.

* class retrieval: test-split queries against a train-split index, a hit when
  the classes agree;
* fingerprint retrieval: manipulated test-split queries against the clean test
  split, a hit when the instance ids agree;
* linear probe: multinomial logistic regression on frozen features;
* pretext-head accuracy on held-out clips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment as A
from .augment import FORWARD, TemporalParams
from .autodiff import Tensor
from .data import AVSample
from .nets import AVModel, ORDER_PAIRS
from .temporal import make_ordering_instance, sample_temporal_labels

MODALITIES = ("video", "audio", "fused")


class EvalError(ValueError):
    pass


@dataclass
class FeatureTable:
    instance_ids: np.ndarray  # [N] int
    class_ids: np.ndarray  # [N] int
    features: np.ndarray  # [N, D]
    modality: str

    def __len__(self) -> int:
        return len(self.instance_ids)

    def standardized(self, mean: np.ndarray, std: np.ndarray) -> "FeatureTable":
        return FeatureTable(self.instance_ids, self.class_ids, (self.features - mean) / std, self.modality)

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        std = self.features.std(axis=0)
        return self.features.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def crop_starts(length: int, clip_len: int, crops: int) -> list[int]:
    """``crops`` evenly spaced 1x windows covering the timeline."""
    if length < clip_len:
        raise EvalError(f"sample of {length} frames is shorter than a clip ({clip_len})")
    if crops == 1:
        return [(length - clip_len) // 2]
    return [int(round(x)) for x in np.linspace(0, length - clip_len, crops)]


def _encode_in_chunks(encode, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([encode(inputs[i : i + chunk], train=False).data for i in range(0, len(inputs), chunk)])


def encoder_features(model: AVModel, samples: list[AVSample], modality: str, crops: int = 4) -> np.ndarray:
    """Raw (unstandardized) pre-projection features averaged over temporal crops."""
    cfg = model.config
    clips = []
    for s in samples:
        for start in crop_starts(s.video.shape[0], cfg.clip_len, crops):
            p = TemporalParams(1, FORWARD, start, cfg.clip_len)
            if modality == "video":
                clips.append(A.temporal_transform(s.video, p))
            else:
                clips.append(A.audio_clip_spectrogram(s.waveform, p, s.samples_per_frame, size=cfg.spec_size))
    clips = np.asarray(clips, dtype=np.float64)
    encode = model.video_encode if modality == "video" else model.audio_encode
    feats = _encode_in_chunks(encode, clips)
    return feats.reshape(len(samples), crops, -1).mean(axis=1)


def extract_features(
    model: AVModel,
    samples: list[AVSample],
    modality: str,
    crops: int = 4,
    train_samples: list[AVSample] | None = None,
) -> FeatureTable:
    """Crop-averaged encoder features, standardized with ``train_samples``
    statistics (identity when None). ``fused`` concatenates the standardized
    video and audio features."""
    if modality not in MODALITIES:
        raise EvalError(f"modality must be one of {MODALITIES}")
    ids = np.array([s.instance_id for s in samples])
    classes = np.array([s.class_id for s in samples])
    parts = []
    for m in ("video", "audio") if modality == "fused" else (modality,):
        table = FeatureTable(ids, classes, encoder_features(model, samples, m, crops), m)
        if train_samples is not None:
            ref = FeatureTable(ids[:0], classes[:0], encoder_features(model, train_samples, m, crops), m)
            table = table.standardized(*ref.stats())
        parts.append(table.features)
    return FeatureTable(ids, classes, np.concatenate(parts, axis=1), modality)


def feature_tables(
    model: AVModel, groups: dict[str, list[AVSample]], modality: str, crops: int = 4, reference: str = "train"
) -> dict[str, FeatureTable]:
    """Standardized tables for several sample groups at once.

    Same result as calling :func:`extract_features` per group with
    ``train_samples=groups[reference]``, but every group is encoded once.
    """
    if modality not in MODALITIES:
        raise EvalError(f"modality must be one of {MODALITIES}")
    parts: dict[str, list[np.ndarray]] = {name: [] for name in groups}
    for m in ("video", "audio") if modality == "fused" else (modality,):
        raw = {name: encoder_features(model, samples, m, crops) for name, samples in groups.items()}
        ref = FeatureTable(np.zeros(0), np.zeros(0), raw[reference], m)
        mean, std = ref.stats()
        for name in groups:
            parts[name].append((raw[name] - mean) / std)
    return {
        name: FeatureTable(
            np.array([s.instance_id for s in samples]),
            np.array([s.class_id for s in samples]),
            np.concatenate(parts[name], axis=1),
            modality,
        )
        for name, samples in groups.items()
    }


# ---------------------------------------------------------------------------
# retrieval


def cosine_ranking(queries: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Index rows sorted by descending cosine similarity for every query;
    ties keep the lower index first."""
    if queries.shape[1] != index.shape[1]:
        raise EvalError(f"query width {queries.shape[1]} != index width {index.shape[1]}")
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    xn = index / np.maximum(np.linalg.norm(index, axis=1, keepdims=True), 1e-12)
    return np.argsort(-(qn @ xn.T), axis=1, kind="stable")


def recall_at_k(query_labels, index_labels, ranking: np.ndarray, ks) -> dict[int, float]:
    hits = np.asarray(index_labels)[ranking] == np.asarray(query_labels)[:, None]
    return {int(k): float(hits[:, :k].any(axis=1).mean()) for k in ks}


def knn_retrieval_eval(query: FeatureTable, index: FeatureTable, ks=(1, 5, 20)) -> dict[int, float]:
    """Recall@k where a retrieval is correct when the classes agree."""
    if not len(query) or not len(index):
        raise EvalError("empty feature table")
    return recall_at_k(query.class_ids, index.class_ids, cosine_ranking(query.features, index.features), ks)


def fingerprint_eval(clean: FeatureTable, manipulated: FeatureTable, ks=(1, 5, 20)) -> dict[int, float]:
    """Recall@k where a retrieval is correct when the instance ids agree."""
    if sorted(clean.instance_ids.tolist()) != sorted(manipulated.instance_ids.tolist()):
        raise EvalError("query and index instance ids differ")
    ranking = cosine_ranking(manipulated.features, clean.features)
    return recall_at_k(manipulated.instance_ids, clean.instance_ids, ranking, ks)


# ---------------------------------------------------------------------------
# linear probe


def linear_probe_eval(train: FeatureTable, test: FeatureTable, iters: int = 500, lr: float = 0.1) -> float:
    """Full-batch gradient descent on softmax regression; returns test accuracy."""
    classes = np.unique(train.class_ids)
    if len(classes) < 2:
        raise EvalError("linear probe needs at least two classes")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in train.class_ids])
    X = train.features
    n, d = X.shape
    W, b = np.zeros((d, len(classes))), np.zeros(len(classes))
    onehot = np.eye(len(classes))[y]
    for _ in range(iters):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (X.T @ g)
        b -= lr * g.sum(axis=0)
    pred = classes[np.argmax(test.features @ W + b, axis=1)]
    return float((pred == test.class_ids).mean())


# ---------------------------------------------------------------------------
# pretext heads


def head_accuracy(
    model: AVModel,
    samples: list[AVSample],
    seed: int,
    clips_per_instance: int = 4,
    use_audio: bool = True,
    audio_mode: str = "raw",
) -> dict[str, float]:
    """Accuracy of every pretext head on freshly drawn labelled clips."""
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9001]))
    video, audio, labels = [], [], {"speed": [], "direction": []}
    pairs = ORDER_PAIRS if use_audio else ("vv",)
    order_clips = {p: ([], []) for p in pairs}
    order_labels = {p: [] for p in pairs}

    def clip(s, modality, params):
        if modality == "v":
            return A.temporal_transform(s.video, params)
        return A.audio_clip_spectrogram(s.waveform, params, s.samples_per_frame, size=cfg.spec_size, mode=audio_mode, rng=rng)

    for s in samples:
        T = s.video.shape[0]
        for _ in range(clips_per_instance):
            lab, params = sample_temporal_labels(rng, T, cfg.clip_len)
            labels["speed"].append(lab.speed_class)
            labels["direction"].append(lab.direction)
            video.append(clip(s, "v", params))
            if use_audio:
                audio.append(clip(s, "a", params))
            for pair in pairs:
                inst = make_ordering_instance(T, cfg.clip_len, None, rng)
                order_labels[pair].append(inst.label)
                for side, (m, window) in enumerate(zip(pair, (inst.window_a, inst.window_b))):
                    order_clips[pair][side].append(clip(s, m, TemporalParams(1, FORWARD, window[0], cfg.clip_len)))

    feats = {"v": _encode_in_chunks(model.video_encode, np.asarray(video))}
    if use_audio:
        feats["a"] = _encode_in_chunks(model.audio_encode, np.asarray(audio))
    out = {}
    for m in feats:
        for task in ("speed", "direction"):
            logits = model.head_forward(f"{task}_{m}", [Tensor(feats[m])]).data
            out[f"{task}_{m}"] = float((logits.argmax(axis=1) == np.array(labels[task])).mean())
    for pair in pairs:
        sides = []
        for side, m in enumerate(pair):
            encode = model.video_encode if m == "v" else model.audio_encode
            sides.append(Tensor(_encode_in_chunks(encode, np.asarray(order_clips[pair][side]))))
        logits = model.head_forward(f"order_{pair}", sides).data
        out[f"order_{pair}"] = float((logits.argmax(axis=1) == np.array(order_labels[pair])).mean())
    for task in ("speed", "direction", "order"):
        vals = [v for k, v in out.items() if k.startswith(task + "_")]
        out[task] = float(np.mean(vals))
    return out
