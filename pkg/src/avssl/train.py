"""Training loop: batch assembly, the combined objective, checkpoints and metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as A
from . import autodiff as ad
from . import contrastive as C
from .augment import FORWARD, TemporalParams
from .autodiff import Tensor
from .config import RunConfig, config_hash, dump_config
from .data import AVSample, Dataset, generate_dataset, generate_sample, load_dataset, sample_batch, steps_per_epoch
from .evaluate import feature_tables, fingerprint_eval, head_accuracy, knn_retrieval_eval, linear_probe_eval
from .nets import AVModel, load_checkpoint, save_checkpoint
from .optim import AdamState, adamw_step, lr_at
from .temporal import make_ordering_instance, sample_temporal_labels, ssl_objective, temporal_losses

CHECKPOINT = "checkpoint.ckpt"
METRICS = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class Batch:
    video: list  # per view: [B, T, H, W, C]
    audio: list  # per view: [B, F, T] (empty when audio is off)
    labels: dict  # head name -> [2B] or [B] int labels
    order: dict  # pair "xy" -> (clips of modality x, clips of modality y)


def _clip(sample: AVSample, modality: str, params: TemporalParams, cfg: RunConfig, rng) -> np.ndarray:
    if modality == "v":
        return A.temporal_transform(sample.video, params)
    return A.audio_clip_spectrogram(
        sample.waveform, params, sample.samples_per_frame, size=cfg.model.spec_size, mode=cfg.train.audio_mode, rng=rng
    )


def order_pairs(cfg: RunConfig) -> tuple[str, ...]:
    if not cfg.train.order_task:
        return ()
    return ("vv", "va", "av", "aa") if cfg.train.use_audio else ("vv",)


def build_batch(samples: list[AVSample], cfg: RunConfig, rng: np.random.Generator) -> Batch:
    """Two augmented views per instance plus ordering clip pairs.

    Each view draws its own speed/direction; audio reuses the video view's
    temporal parameters (aligned). Spatial augmentation touches video views
    only. Ordering clips are 1x forward and spatially untouched so that order
    is their only discriminative factor.
    """
    clip_len, use_audio = cfg.data.clip_len, cfg.train.use_audio
    video, audio = [[], []], [[], []]
    speed, direction = [[], []], [[], []]
    pairs = order_pairs(cfg)
    order = {p: ([], []) for p in pairs}
    order_labels = {p: [] for p in pairs}
    for s in samples:
        T = s.video.shape[0]
        for view in (0, 1):
            lab, params = sample_temporal_labels(rng, T, clip_len)
            clip = _clip(s, "v", params, cfg, rng)
            if cfg.train.spatial_aug:
                clip = A.spatial_augment(clip, A.random_spatial_params(rng, clip.shape[1], clip.shape[2]))
            video[view].append(clip)
            if use_audio:
                audio[view].append(_clip(s, "a", params, cfg, rng))
            speed[view].append(lab.speed_class)
            direction[view].append(lab.direction)
        for pair in pairs:
            inst = make_ordering_instance(T, clip_len, None, rng)
            order_labels[pair].append(inst.label)
            for side, (m, window) in enumerate(zip(pair, (inst.window_a, inst.window_b))):
                order[pair][side].append(_clip(s, m, TemporalParams(1, FORWARD, window[0], clip_len), cfg, rng))
    labels = {}
    for m in ("v", "a") if use_audio else ("v",):
        if cfg.train.speed_task:
            labels[f"speed_{m}"] = np.array(speed[0] + speed[1])
        if cfg.train.direction_task:
            labels[f"direction_{m}"] = np.array(direction[0] + direction[1])
    for pair in pairs:
        labels[f"order_{pair}"] = np.array(order_labels[pair])
    stack = lambda xs: np.asarray(xs, dtype=np.float64)  # noqa: E731
    return Batch(
        video=[stack(v) for v in video],
        audio=[stack(a) for a in audio] if use_audio else [],
        labels=labels,
        order={p: (stack(order[p][0]), stack(order[p][1])) for p in pairs},
    )


# ---------------------------------------------------------------------------
# objective


def _split(t: Tensor, sizes: list[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(t[start : start + n])
        start += n
    return out


def compute_losses(
    model: AVModel, batch: Batch, banks: dict, cfg: RunConfig, frozen: dict | None = None
) -> tuple[Tensor, dict, dict]:
    """Forward pass for one batch. Returns (L_SSL, scalar terms, embeddings).

    ``frozen`` is forwarded to :func:`contrastive.crl_objective`."""
    B = batch.video[0].shape[0]
    use_audio = cfg.train.use_audio

    # one encoder call per modality: both views, then that modality's ordering clips
    feats, order_feats = {}, {}
    for m, views in (("v", batch.video), ("a", batch.audio)):
        if m == "a" and not use_audio:
            continue
        keys = [(pair, i) for pair in batch.order for i in (0, 1) if pair[i] == m]
        arrays = list(views) + [batch.order[pair][i] for pair, i in keys]
        encoder = model.video_encode if m == "v" else model.audio_encode
        parts = _split(encoder(np.concatenate(arrays), train=True), [len(a) for a in arrays])
        feats[m] = parts[:2]
        order_feats.update(zip(keys, parts[2:]))

    emb, pred = {}, {}
    for m, (f_r, f_s) in feats.items():
        e = model.project(ad.concat([f_r, f_s], axis=0), m, train=True)
        p = model.predict(e, m, train=True)
        emb[m] = _split(e, [B, B])
        pred[m] = _split(p, [B, B])

    terms: dict[str, float] = {}
    l_crl, crl_terms = C.crl_objective(emb, pred, banks, cfg.loss, frozen)
    for k, v in crl_terms.items():
        terms[k] = v.item()
    terms["crl"] = l_crl.item()

    l_temp = Tensor(0.0)
    if cfg.train.lambda_temp and batch.labels:
        logits = {}
        for m in feats:
            both = ad.concat(feats[m], axis=0)
            for task in ("speed", "direction"):
                if f"{task}_{m}" in batch.labels:
                    logits[f"{task}_{m}"] = model.head_forward(f"{task}_{m}", [both], train=True)
        for pair in batch.order:
            sides = [order_feats[(pair, 0)], order_feats[(pair, 1)]]
            logits[f"order_{pair}"] = model.head_forward(f"order_{pair}", sides, train=True)
        task_losses = temporal_losses(logits, batch.labels)
        l_temp = task_losses["temp"]
        for k, v in task_losses.items():
            terms[k] = v.item()
    loss = ssl_objective(l_crl, l_temp, cfg.train.lambda_temp)
    terms["loss"] = loss.item()
    return loss, terms, emb


# ---------------------------------------------------------------------------
# training


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


class MetricsWriter:
    """JSONL metrics; ``resume_step`` keeps the records up to that step and
    drops anything a crashed run wrote after its last checkpoint."""

    def __init__(self, path: Path, run_hash: str, resume_step: int | None = None):
        self.path = path
        self.hash = run_hash
        kept = []
        if resume_step is not None and path.exists():
            for line in path.read_text().splitlines():
                if line.strip() and json.loads(line).get("step", 0) <= resume_step:
                    kept.append(line + "\n")
        path.write_text("".join(kept))

    def write(self, record: dict) -> None:
        record = {"config_hash": self.hash, **_jsonable(record)}
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def resolve_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data_path is None:
        return generate_dataset(cfg.data, cfg.seed)
    path = Path(cfg.data_path)
    if not (path / "manifest.json").exists():
        raise TrainingError(f"no dataset at {path}")
    return load_dataset(path)


def evaluate_model(model: AVModel, ds: Dataset, cfg: RunConfig) -> dict:
    """Test-split evaluation: class retrieval, linear probe and fingerprint
    retrieval per modality, plus pretext-head accuracy."""
    train, test = ds.split("train"), ds.split("test")
    suite, seed = cfg.eval.fingerprint_suite, cfg.eval.manipulation_seed
    manipulated = [A.manipulation_suite(s, suite, seed) for s in test]
    out = {}
    modalities = ("video", "audio", "fused") if cfg.train.use_audio else ("video",)
    for m in modalities:
        tables = feature_tables(model, {"train": train, "test": test, "manipulated": manipulated}, m, cfg.eval.crops)
        out[f"retrieval_{m}"] = knn_retrieval_eval(tables["test"], tables["train"], cfg.eval.ks)
        out[f"probe_{m}"] = linear_probe_eval(tables["train"], tables["test"], cfg.eval.probe_iters, cfg.eval.probe_lr)
        out[f"fingerprint_{suite}_{m}"] = fingerprint_eval(tables["test"], tables["manipulated"], cfg.eval.ks)
    out["heads"] = head_accuracy(
        model, test, cfg.seed, cfg.eval.head_clips, cfg.train.use_audio, audio_mode=cfg.train.audio_mode
    )
    return out


def _dump_failure(out: Path, step: int, terms: dict, error: Exception) -> Path:
    path = out / "nonfinite_dump.json"
    path.write_text(json.dumps(_jsonable({"step": step, "terms": terms, "error": str(error)}), indent=2, sort_keys=True))
    return path


def train(cfg: RunConfig, out_dir, resume=None, dataset: Dataset | None = None, log=print) -> dict:
    """Run training; writes checkpoint.ckpt, metrics.jsonl and config.yaml to ``out_dir``.

    Randomness is a pure function of (seed, epoch, step), so a resumed run
    reproduces an uninterrupted one bit for bit.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_hash = config_hash(cfg)
    dump_config(cfg, out / "config.yaml")
    ds = dataset if dataset is not None else resolve_dataset(cfg)
    n_train = len(ds.split("train"))
    if cfg.train.batch_size > n_train:
        raise TrainingError(f"batch_size {cfg.train.batch_size} exceeds the {n_train} training instances")
    per_epoch = steps_per_epoch(n_train, cfg.train.batch_size)
    total = per_epoch * cfg.train.epochs
    warmup = int(round(cfg.train.warmup_epochs * per_epoch))

    model_cfg = cfg.effective_model()
    model = AVModel(model_cfg)
    params = model.parameters()
    state = AdamState.zeros(params)
    banks = C.make_banks(cfg.loss, model_cfg.d_e)
    start = 0
    if resume is not None:
        model, meta, extra = load_checkpoint(resume)
        if meta.get("config_hash") != run_hash:
            raise TrainingError("checkpoint was written by a different config")
        params = model.parameters()
        state = AdamState.from_arrays({k[len("adam/"):]: v for k, v in extra.items() if k.startswith("adam/")})
        banks = _restore_banks(cfg, model_cfg.d_e, extra)
        start = int(meta["step"])
    metrics = MetricsWriter(out / METRICS, run_hash, start if resume is not None else None)

    t0 = time.time()
    last = {}
    for step in range(start, total):
        epoch, within = divmod(step, per_epoch)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, within, 17]))
        samples = sample_batch(ds, "train", cfg.train.batch_size, cfg.seed, epoch, within)
        batch = build_batch(samples, cfg, rng)
        lr = lr_at(step, cfg.train.lr_max, warmup, total)
        terms: dict = {}
        try:
            loss, terms, emb = compute_losses(model, batch, banks, cfg)
            if not math.isfinite(loss.item()):
                raise ad.NonFiniteError(f"loss is {loss.item()}")
            for p in params:
                p.zero_grad()
            ad.backward(loss, params)
            adamw_step(params, [p.grad for p in params], state, lr, cfg.train.weight_decay, tuple(cfg.train.betas))
        except ad.NonFiniteError as e:
            dump = _dump_failure(out, step, terms, e)
            raise TrainingError(f"non-finite value at step {step} ({e}); diagnostics in {dump}") from e
        C.update_banks(banks, emb, cfg.loss)
        last = {"step": step + 1, "epoch": epoch, "lr": lr, **terms}
        metrics.write(last)
        finished_epoch = within == per_epoch - 1
        if finished_epoch and (epoch + 1 == cfg.train.epochs or (cfg.train.eval_every and (epoch + 1) % cfg.train.eval_every == 0)):
            results = evaluate_model(model, ds, cfg)
            metrics.write({"step": step + 1, "epoch": epoch, "eval": results})
            log(f"epoch {epoch + 1}/{cfg.train.epochs} loss {terms['loss']:.4f} eval {_brief(results)} ({time.time() - t0:.0f}s)")
            save_run_checkpoint(out / CHECKPOINT, model, state, banks, cfg, step + 1)
        elif finished_epoch:
            log(f"epoch {epoch + 1}/{cfg.train.epochs} loss {terms['loss']:.4f} ({time.time() - t0:.0f}s)")
            save_run_checkpoint(out / CHECKPOINT, model, state, banks, cfg, step + 1)
    return {"model": model, "last": last, "out": out}


def _brief(results: dict) -> str:
    parts = [f"{k.split('_', 1)[1]} R@1 {v[1]:.2f}" for k, v in results.items() if k.startswith("retrieval_") and 1 in v]
    heads = results.get("heads", {})
    parts += [f"{t} {heads[t]:.2f}" for t in ("speed", "direction", "order") if t in heads]
    return ", ".join(parts)


def save_run_checkpoint(path: Path, model: AVModel, state: AdamState, banks: dict, cfg: RunConfig, step: int) -> None:
    extra = {f"adam/{k}": v for k, v in state.arrays().items()}
    if cfg.loss.shared_bank:
        extra["bank/shared"] = banks["v"].entries()
    else:
        extra["bank/v"] = banks["v"].entries()
        extra["bank/a"] = banks["a"].entries()
    meta = {"step": step, "config": cfg.to_dict(), "config_hash": config_hash(cfg)}
    save_checkpoint(path, model, meta, extra)


def _restore_banks(cfg: RunConfig, dim: int, extra: dict) -> dict:
    def bank(key):
        return C.MemoryBank.from_state(cfg.loss.bank_size, dim, extra[key].reshape(-1, dim))

    if cfg.loss.shared_bank:
        shared = bank("bank/shared")
        return {"v": shared, "a": shared}
    return {"v": bank("bank/v"), "a": bank("bank/a")}


# ---------------------------------------------------------------------------
# full-objective gradient check


def full_gradcheck(cfg: RunConfig, eps: float = 1e-5, n_samples: int = 4, coords_per_param: int = 3) -> dict:
    """Finite-difference check of L_SSL with every term switched on.

    Uses ``n_samples`` synthetic instances, pre-filled memory banks (so bank
    positives and negatives participate), the audio-audio term and all
    pretext heads. Every parameter tensor contributes ``coords_per_param``
    randomly chosen coordinates. Central differences see the stop-gradient
    targets as constants (see ``frozen`` in :func:`compute_losses`);
    coordinates whose perturbation crosses a relu kink or whose derivative is
    below roundoff are counted and skipped.
    """
    cfg = cfg.with_overrides(
        loss={"use_vv": True, "use_av_va": True, "use_aa": True, "k": 3, "m": 8},
        train={"use_audio": True, "lambda_temp": 0.5, "speed_task": True, "direction_task": True, "order_task": True},
    )
    samples = [generate_sample(cfg.data, cfg.seed, i * cfg.data.instances_per_class)[0] for i in range(n_samples)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4242]))
    batch = build_batch(samples, cfg, rng)
    model = AVModel(cfg.effective_model())
    banks = C.make_banks(cfg.loss, model.config.d_e)
    for bank in {id(b): b for b in banks.values()}.values():
        bank.push_values(rng.normal(size=(16, model.config.d_e)))
    # stop-gradient targets are held at their unperturbed values
    _, _, emb = compute_losses(model, batch, banks, cfg)
    frozen = {m: [e.data.copy() for e in views] for m, views in emb.items()}
    params = model.parameters()
    t0 = time.time()
    stats: dict = {}
    err = ad.finite_diff_check(
        lambda: compute_losses(model, batch, banks, cfg, frozen)[0],
        params,
        eps=eps,
        max_coords=coords_per_param,
        rng=np.random.default_rng(cfg.seed),
        skip_below_noise=True,
        skip_kinks=True,
        stats=stats,
    )
    return {
        "max_rel_error": err,
        "n_params": len(params),
        "coords_per_param": coords_per_param,
        **stats,
        "seconds": time.time() - t0,
    }
