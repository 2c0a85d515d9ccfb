"""Contrastive objective with memory-bank positives and negatives.

Two equivalent code paths compute the same loss:

* per-anchor: :func:`build_pairs_vv` / :func:`build_pairs_cross` assemble an
  explicit :class:`PairSets` and :func:`contrastive_loss` sums over it;
* batched: :func:`batched_term` evaluates every anchor of a batch at once with
  masks over the batch and the bank. Training uses this one.

Similarity is ``d(x, y) = exp(cos(x, y) / temperature)`` with ``y`` treated as
a constant (except in the ``simclr`` variant).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = (
    "ours",
    "no_bank_pos",
    "no_bank_neg",
    "hard_neg",
    "easy_neg",
    "uniform_w",
    "nnclr",
    "simclr",
    "simsiam",
)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    k: int = 5
    # similarity percentile at which bank negatives start: 0.5 is the median
    # neighbour, larger values start closer to the query (harder negatives)
    neg_percentile: float = 0.5
    m: int = 256
    bank_size: int = 2048
    use_vv: bool = True
    use_av_va: bool = True
    use_aa: bool = False
    aligned_cross_modal: bool = True
    shared_bank: bool = False
    symmetrize: bool = True
    variant: str = "ours"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1 or self.m < 0 or self.bank_size < 1:
            raise ValueError("need k >= 1, m >= 0, bank_size >= 1")
        if not 0.0 <= self.neg_percentile <= 1.0:
            raise ValueError("neg_percentile must be in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    # effective settings per variant ------------------------------------

    @property
    def bank_positives(self) -> bool:
        return self.variant not in ("no_bank_pos", "nnclr", "simclr", "simsiam")

    @property
    def bank_negatives(self) -> bool:
        return self.variant not in ("no_bank_neg", "nnclr", "simclr", "simsiam")

    @property
    def batch_negatives(self) -> bool:
        return self.variant != "simsiam"

    @property
    def start_percentile(self) -> float:
        return {"hard_neg": 0.9, "easy_neg": 0.2}.get(self.variant, self.neg_percentile)

    @property
    def stop_gradient(self) -> bool:
        return self.variant != "simclr"

    @property
    def uses_predictor(self) -> bool:
        return self.variant != "simclr"


# ---------------------------------------------------------------------------
# similarity


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def similarity(x, y, temperature: float = 0.2, stop_grad: bool = True) -> Tensor:
    """``exp(cos(x, y) / temperature)``; no gradient reaches ``y`` when ``stop_grad``."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if not (np.linalg.norm(x.data, axis=-1).all() and np.linalg.norm(y.data, axis=-1).all()):
        raise ValueError("similarity of a zero-norm embedding is undefined")
    if stop_grad:
        y = ad.stop_gradient(y)
    cos = (ad.normalize(x, axis=-1) * ad.normalize(y, axis=-1)).sum(axis=-1)
    return ad.exp(cos * (1.0 / temperature))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=-1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return an @ bn.T


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Fixed-capacity FIFO of detached embeddings."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, nu, nu_hat) -> None:
        """Store the mean of two views, ``(nu + nu_hat) / 2``."""
        self.push_values((_as_array(nu) + _as_array(nu_hat)) / 2.0)

    def push_values(self, values) -> None:
        values = np.atleast_2d(np.array(_as_array(values), dtype=np.float64))
        if values.shape[1] != self.dim:
            raise ValueError(f"bank width {self.dim} != pushed width {values.shape[1]}")
        for row in values:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def entries(self) -> np.ndarray:
        """Stored embeddings ordered oldest first, ``[count, dim]``."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]])

    def state(self) -> dict[str, np.ndarray]:
        return {"entries": self.entries()}

    @classmethod
    def from_state(cls, capacity: int, dim: int, entries: np.ndarray) -> "MemoryBank":
        bank = cls(capacity, dim)
        if len(entries):
            bank.push_values(entries)
        return bank


def rank_order(entries: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Bank indices sorted by descending similarity to each query; ties keep
    the older entry first. ``entries`` must be ordered oldest first."""
    sims = cosine_matrix(np.atleast_2d(queries), entries)
    return np.argsort(-sims, axis=1, kind="stable")


def nearest_neighbors(bank: MemoryBank, query, j: int, k: int) -> np.ndarray:
    """Entries ranked ``j..k`` (1-based, inclusive) by similarity to ``query``."""
    if bank.count == 0:
        raise ValueError("nearest_neighbors on an empty bank")
    entries = bank.entries()
    order = rank_order(entries, _as_array(query))[0]
    return entries[order[j - 1 : k]]


def nn_weights(query, neighbors, temperature: float = 0.2) -> np.ndarray:
    """Weights proportional to ``d(query, neighbor)``, normalized to sum to 1."""
    neighbors = np.atleast_2d(_as_array(neighbors))
    if len(neighbors) == 0:
        raise ValueError("nn_weights needs at least one neighbor")
    logits = cosine_matrix(np.atleast_2d(_as_array(query)), neighbors)[0] / temperature
    w = np.exp(logits - logits.max())
    return w / w.sum()


def negative_window(count: int, percentile: float, m: int) -> tuple[int, int]:
    """0-based half-open rank window ``[start, stop)`` of bank negatives.

    The window starts at rank ``ceil((1 - percentile) * count)`` (1-based), so
    ``percentile=0.5`` starts at the median neighbour and larger percentiles
    start closer to the query. It is clamped to the bank contents.
    """
    if count == 0 or m == 0:
        return 0, 0
    first = max(1, math.ceil((1.0 - percentile) * count - 1e-9))
    first = min(first, count)
    return first - 1, min(first - 1 + m, count)


# ---------------------------------------------------------------------------
# explicit pair sets (per anchor)


@dataclass
class PairSets:
    positives: list = field(default_factory=list)  # (Tensor, weight)
    negatives: list = field(default_factory=list)  # Tensor


def _bank_pairs(query: np.ndarray, bank: MemoryBank | None, cfg: LossConfig) -> tuple[list, list]:
    if bank is None or bank.count == 0:
        return [], []
    entries = bank.entries()
    order = rank_order(entries, query)[0]
    positives, negatives = [], []
    if cfg.variant == "nnclr":
        positives = [(Tensor(entries[order[0]]), 1.0)]
    elif cfg.bank_positives:
        nn = entries[order[: cfg.k]]
        weights = np.ones(len(nn)) if cfg.variant == "uniform_w" else nn_weights(query, nn, cfg.temperature)
        positives = [(Tensor(e), float(w)) for e, w in zip(nn, weights)]
    if cfg.bank_negatives:
        start, stop = negative_window(bank.count, cfg.start_percentile, cfg.m)
        negatives = [Tensor(e) for e in entries[order[start:stop]]]
    return positives, negatives


def build_pairs_vv(i: int, anchors: Tensor, partners: Tensor, bank: MemoryBank | None, cfg: LossConfig) -> PairSets:
    """Pairs for intra-modal anchor ``anchors[i]``.

    Positives: the other view ``partners[i]`` (weight 1) plus its ``k`` nearest
    bank entries weighted by similarity to ``partners[i]``. Negatives: the
    anchor-view embeddings of every other batch instance plus the bank window
    of ``partners[i]``'s neighbours.
    """
    query = partners.data[i]
    bank_pos, bank_neg = _bank_pairs(query, bank, cfg)
    exact = [(partners[i], 1.0)]
    if cfg.variant == "nnclr" and bank_pos:
        exact = []
    positives = exact + bank_pos
    negatives = []
    if cfg.batch_negatives:
        negatives = [anchors[j] for j in range(anchors.shape[0]) if j != i]
    return PairSets(positives, negatives + bank_neg)


def build_pairs_cross(i: int, anchors: Tensor, partners: Tensor, bank: MemoryBank | None, cfg: LossConfig) -> PairSets:
    """Pairs for a cross-modal anchor, e.g. video ``anchors[i]`` against audio
    ``partners[i]``. Negatives include other instances of *both* modalities."""
    query = partners.data[i]
    bank_pos, bank_neg = _bank_pairs(query, bank, cfg)
    exact = [(partners[i], 1.0)]
    if cfg.variant == "nnclr" and bank_pos:
        exact = []
    negatives = []
    if cfg.batch_negatives:
        others = [j for j in range(anchors.shape[0]) if j != i]
        negatives = [anchors[j] for j in others] + [partners[j] for j in others]
    return PairSets(exact + bank_pos, negatives + bank_neg)


def contrastive_loss(anchor: Tensor, pairs: PairSets, cfg: LossConfig) -> Tensor:
    """``sum_{(p, w)} -w log(d(a, p) / (d(a, p) + sum_n d(a, n)))`` for one anchor.

    ``anchor`` is already passed through the predictor. In the ``simsiam``
    variant (no negatives) the ratio is taken against the maximum similarity
    ``exp(1 / temperature)`` instead, i.e. ``w * (1 - cos) / temperature``.
    """
    if not pairs.positives:
        raise ValueError("contrastive_loss needs at least one positive")
    lam, sg = cfg.temperature, cfg.stop_gradient
    total = None
    if cfg.variant == "simsiam":
        for p, w in pairs.positives:
            d = similarity(anchor, p, lam, sg)
            term = -(ad.log(d) - 1.0 / lam) * w
            total = term if total is None else total + term
        return total
    neg_sum = None
    for n in pairs.negatives:
        d = similarity(anchor, n, lam, sg)
        neg_sum = d if neg_sum is None else neg_sum + d
    for p, w in pairs.positives:
        d = similarity(anchor, p, lam, sg)
        denom = d if neg_sum is None else d + neg_sum
        term = -(ad.log(d) - ad.log(denom)) * w
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# batched path


def _bank_masks(queries: np.ndarray, bank: MemoryBank | None, cfg: LossConfig):
    """Per-anchor bank positive weights and negative mask, both ``[B, count]``."""
    if bank is None or bank.count == 0:
        return None, None, None
    entries = bank.entries()
    B, n = len(queries), len(entries)
    order = rank_order(entries, queries)
    rows = np.arange(B)[:, None]
    pos_w = np.zeros((B, n))
    if cfg.variant == "nnclr":
        pos_w[rows[:, 0], order[:, 0]] = 1.0
    elif cfg.bank_positives:
        top = order[:, : cfg.k]
        if cfg.variant == "uniform_w":
            pos_w[rows, top] = 1.0
        else:
            logits = cosine_matrix(queries, entries)[rows, top] / cfg.temperature
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            pos_w[rows, top] = w / w.sum(axis=1, keepdims=True)
    neg_mask = np.zeros((B, n))
    if cfg.bank_negatives:
        start, stop = negative_window(n, cfg.start_percentile, cfg.m)
        if stop > start:
            neg_mask[rows, order[:, start:stop]] = 1.0
    return entries, pos_w, neg_mask


def batched_term(
    anchor_pred: Tensor,
    anchors: Tensor,
    partners: Tensor,
    bank: MemoryBank | None,
    cfg: LossConfig,
    cross_modal: bool,
) -> Tensor:
    """Per-anchor losses ``[B]`` for one contrastive term.

    anchor_pred: predictor outputs for the anchors ``[B, D]``; anchors: their
    projection-level embeddings (batch negatives); partners: the positive
    view or aligned other-modality embeddings ``[B, D]``.
    """
    lam = cfg.temperature
    B = anchor_pred.shape[0]
    a = ad.normalize(anchor_pred, axis=1)

    def target(t: Tensor) -> Tensor:
        return ad.normalize(ad.stop_gradient(t) if cfg.stop_gradient else t, axis=1)

    p = target(partners)
    cos_exact = (a * p).sum(axis=1)
    entries, pos_w, neg_mask = _bank_masks(partners.data, bank, cfg)
    if entries is not None:
        e = Tensor(entries / np.linalg.norm(entries, axis=1, keepdims=True))
        cos_bank = a @ e.T  # [B, n]
    exact_w = np.ones(B)
    if cfg.variant == "nnclr" and entries is not None:
        exact_w = np.zeros(B)

    if cfg.variant == "simsiam":
        loss = (1.0 - cos_exact) * (exact_w / lam)
        if entries is not None and pos_w is not None and pos_w.any():
            loss = loss + ((1.0 - cos_bank) * (pos_w / lam)).sum(axis=1)
        return loss

    off_diag = 1.0 - np.eye(B)
    neg_sum = None
    if cfg.batch_negatives:
        batches = [anchors, partners] if cross_modal else [anchors]
        for nb in batches:
            d = ad.exp((a @ target(nb).T) * (1.0 / lam))
            s = (d * off_diag).sum(axis=1)
            neg_sum = s if neg_sum is None else neg_sum + s
    d_bank = None
    if entries is not None:
        d_bank = ad.exp(cos_bank * (1.0 / lam))
        if neg_mask.any():
            s = (d_bank * neg_mask).sum(axis=1)
            neg_sum = s if neg_sum is None else neg_sum + s

    d_exact = ad.exp(cos_exact * (1.0 / lam))
    denom = d_exact if neg_sum is None else d_exact + neg_sum
    loss = (ad.log(denom) - cos_exact * (1.0 / lam)) * exact_w
    if d_bank is not None and pos_w.any():
        denom_bank = d_bank if neg_sum is None else d_bank + neg_sum.reshape(B, 1)
        loss = loss + ((ad.log(denom_bank) - cos_bank * (1.0 / lam)) * pos_w).sum(axis=1)
    return loss


# ---------------------------------------------------------------------------
# banks and the full multi-term objective


def make_banks(cfg: LossConfig, dim: int) -> dict[str, MemoryBank]:
    if cfg.shared_bank:
        shared = MemoryBank(cfg.bank_size, dim)
        return {"v": shared, "a": shared}
    return {"v": MemoryBank(cfg.bank_size, dim), "a": MemoryBank(cfg.bank_size, dim)}


def update_banks(banks: dict[str, MemoryBank], emb: dict[str, list[Tensor]], cfg: LossConfig) -> None:
    """One push per instance per modality (per shared bank when shared)."""
    v_mean = (emb["v"][0].data + emb["v"][1].data) / 2.0
    a_mean = (emb["a"][0].data + emb["a"][1].data) / 2.0 if "a" in emb else None
    if cfg.shared_bank:
        banks["v"].push_values(v_mean if a_mean is None else (v_mean + a_mean) / 2.0)
        return
    banks["v"].push_values(v_mean)
    if a_mean is not None:
        banks["a"].push_values(a_mean)


def crl_objective(
    emb: dict, pred: dict, banks: dict[str, MemoryBank], cfg: LossConfig, frozen: dict | None = None
) -> tuple[Tensor, dict]:
    """Batch mean of l_vv + l_va + l_av (+ l_aa).

    emb[m] = [view_r, view_s] projection embeddings for modality m in {v, a};
    pred[m] = the same passed through the predictor. Each term averages the
    two views as anchors when ``cfg.symmetrize``. Banks are not updated here.

    ``frozen`` (same layout as ``emb``, plain arrays) replaces every
    stop-gradient target, i.e. the partners and the batch negatives, by a
    constant. The value and gradient are unchanged when the arrays equal the
    live embeddings; perturbing parameters then moves only the anchor path,
    which is what finite differences of a stop-gradient objective must see.
    """
    views = (0, 1) if cfg.symmetrize else (0,)
    terms: dict[str, Tensor] = {}
    if frozen is not None and cfg.stop_gradient:
        targets = {m: [Tensor(np.asarray(x)) for x in frozen[m]] for m in emb}
    else:
        targets = emb

    def intra(m: str) -> Tensor:
        parts = [
            batched_term(pred[m][r], targets[m][r], targets[m][1 - r], banks.get(m), cfg, False).mean() for r in views
        ]
        return _average(parts)

    def cross(m: str, o: str) -> Tensor:
        parts = []
        for r in views:
            partner_view = r if cfg.aligned_cross_modal else 1 - r
            parts.append(batched_term(pred[m][r], targets[m][r], targets[o][partner_view], banks.get(o), cfg, True).mean())
        return _average(parts)

    if cfg.use_vv:
        terms["vv"] = intra("v")
    if cfg.use_av_va and "a" in emb:
        terms["va"] = cross("v", "a")
        terms["av"] = cross("a", "v")
    if cfg.use_aa and "a" in emb:
        terms["aa"] = intra("a")
    if not terms:
        return Tensor(0.0), {}
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, terms


def _average(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))
