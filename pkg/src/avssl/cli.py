"""Command-line entry point: ``avssl <subcommand> ...``.

Every evaluation subcommand prints one JSON object on stdout. Errors go to
stderr with exit status 2 for bad input (config, data, checkpoint) and 1 for
a failed check (gradcheck above tolerance, non-finite training).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import augment as A
from .config import ConfigError, RunConfig, config_hash, load_config
from .container import ContainerError
from .data import DatasetError, generate_dataset, load_dataset, save_dataset
from .evaluate import MODALITIES, EvalError, feature_tables, fingerprint_eval, knn_retrieval_eval, linear_probe_eval
from .nets import load_checkpoint
from .train import CHECKPOINT, METRICS, TrainingError, full_gradcheck, train

GRADCHECK_TOLERANCE = 1e-4

# Loss-design variants, all trained video-only (no audio, no cross-modal terms).
TABLE1 = {
    "ours": {},
    "no_bank_pos": {"loss": {"variant": "no_bank_pos"}},
    "no_bank_neg": {"loss": {"variant": "no_bank_neg"}},
    "hard_neg": {"loss": {"variant": "hard_neg"}},
    "easy_neg": {"loss": {"variant": "easy_neg"}},
    "uniform_w": {"loss": {"variant": "uniform_w"}},
    "nnclr": {"loss": {"variant": "nnclr"}},
    "simclr": {"loss": {"variant": "simclr"}},
    "simsiam": {"loss": {"variant": "simsiam"}},
}
TABLE1_BASE = {"train": {"use_audio": False}, "loss": {"use_av_va": False}}

# Multi-modal design variants around the full model.
TABLE3 = {
    "baseline": {},
    "no_av_clr": {"loss": {"use_av_va": False}},
    "no_vv_clr": {"loss": {"use_vv": False}},
    "with_aa_clr": {"loss": {"use_aa": True}},
    "no_temporal": {"train": {"lambda_temp": 0.0}},
    "unaligned_av": {"loss": {"aligned_cross_modal": False}},
    "shared_bank": {"loss": {"shared_bank": True}},
}
GRIDS = {"table1": (TABLE1_BASE, TABLE1), "table3": ({}, TABLE3)}


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks values must be positive")
    return ks


def _emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_model(path):
    model, meta, _ = load_checkpoint(path)
    return model, RunConfig.from_dict(meta["config"]), meta


def _dataset_tag(ds) -> dict:
    tag = {"seed": ds.manifest.get("seed")}
    if "manipulation" in ds.manifest:
        tag["manipulation"] = ds.manifest["manipulation"]
    return tag


def _recall(r: dict) -> dict:
    return {str(k): v for k, v in r.items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = cfg.seed if args.seed is None else args.seed
    ds = generate_dataset(cfg.data, seed, args.out)
    print(f"wrote {sum(len(v) for v in ds.splits.values())} samples to {args.out}")
    return 0


def cmd_augment(args) -> int:
    ds = load_dataset(args.data)
    out = A.augment_dataset(ds, args.suite, args.seed, args.strength)
    save_dataset(out, args.out)
    print(f"wrote suite {args.suite} (seed {args.seed}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, args.out, resume=args.resume)
    print(f"finished at step {result['last'].get('step')}; checkpoint {Path(args.out) / CHECKPOINT}")
    return 0


def cmd_eval_retrieval(args) -> int:
    model, cfg, meta = _load_model(args.ckpt)
    ds = load_dataset(args.data)
    crops = args.crops or cfg.eval.crops
    tables = feature_tables(model, {"train": ds.split("train"), "test": ds.split("test")}, args.modality, crops)
    recall = knn_retrieval_eval(tables["test"], tables["train"], args.ks)
    _emit(
        {
            "metric": "class_retrieval",
            "modality": args.modality,
            "recall": _recall(recall),
            "crops": crops,
            "config_hash": meta.get("config_hash"),
            "dataset": _dataset_tag(ds),
        }
    )
    return 0


def cmd_eval_fingerprint(args) -> int:
    model, cfg, meta = _load_model(args.ckpt)
    clean, aug = load_dataset(args.clean), load_dataset(args.aug)
    crops = args.crops or cfg.eval.crops
    groups = {"train": clean.split("train"), "clean": clean.split("test"), "aug": aug.split("test")}
    tables = feature_tables(model, groups, args.modality, crops)
    recall = fingerprint_eval(tables["clean"], tables["aug"], args.ks)
    _emit(
        {
            "metric": "fingerprint_retrieval",
            "modality": args.modality,
            "recall": _recall(recall),
            "crops": crops,
            "config_hash": meta.get("config_hash"),
            "dataset": _dataset_tag(aug),
        }
    )
    return 0


def cmd_eval_probe(args) -> int:
    model, cfg, meta = _load_model(args.ckpt)
    ds = load_dataset(args.data)
    tables = feature_tables(model, {"train": ds.split("train"), "test": ds.split("test")}, args.modality, cfg.eval.crops)
    acc = linear_probe_eval(tables["train"], tables["test"], cfg.eval.probe_iters, cfg.eval.probe_lr)
    _emit(
        {
            "metric": "linear_probe",
            "modality": args.modality,
            "accuracy": acc,
            "iters": cfg.eval.probe_iters,
            "lr": cfg.eval.probe_lr,
            "config_hash": meta.get("config_hash"),
            "dataset": _dataset_tag(ds),
        }
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    report = full_gradcheck(cfg, eps=args.eps, coords_per_param=args.coords)
    report["tolerance"] = GRADCHECK_TOLERANCE
    report["passed"] = bool(report["max_rel_error"] <= GRADCHECK_TOLERANCE)
    _emit({k: (float(v) if k == "max_rel_error" else v) for k, v in report.items()})
    return 0 if report["passed"] else 1


def final_eval(run_dir: Path) -> dict:
    """The last evaluation record of a run's metrics stream."""
    last = None
    for line in (run_dir / METRICS).read_text().splitlines():
        record = json.loads(line)
        if "eval" in record:
            last = record
    if last is None:
        raise TrainingError(f"no evaluation record in {run_dir / METRICS}")
    return last


def comparison_row(name: str, cfg: RunConfig, record: dict) -> dict:
    ev = record["eval"]
    row = {"variant": name, "config_hash": record["config_hash"], "step": record["step"]}
    for key, value in sorted(ev.items()):
        if key == "heads":
            row.update({f"head_{t}": value[t] for t in ("speed", "direction", "order") if t in value})
        elif isinstance(value, dict):
            row[f"{key}_r1"] = value.get("1", value.get(1))
        else:
            row[key] = value
    return row


def ablation_configs(base: RunConfig, grid: str) -> dict[str, RunConfig]:
    shared, variants = GRIDS[grid]
    base = base.with_overrides(**shared)
    out = {}
    for name, overrides in variants.items():
        cfg = base
        for section, values in overrides.items():
            cfg = cfg.with_overrides(**{section: values})
        out[name] = cfg
    return out


def markdown_table(rows: list[dict]) -> str:
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else ("" if v is None else str(v))  # noqa: E731
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r.get(c)) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def run_ablation(base: RunConfig, grid: str, out_dir, log=print) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, cfg in ablation_configs(base, grid).items():
        log(f"[{grid}] {name} ({config_hash(cfg)})")
        train(cfg, out / name, log=lambda *_: None)
        rows.append(comparison_row(name, cfg, final_eval(out / name)))
    (out / "comparison.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    (out / "comparison.md").write_text(markdown_table(rows))
    return rows


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else RunConfig()
    rows = run_ablation(base, args.grid, args.out, log=lambda msg: print(msg, file=sys.stderr))
    print(markdown_table(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avssl", description="Desk-scale audio-visual self-supervised learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("augment", help="write a manipulated copy of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--suite", required=True, choices=A.SUITES, type=str.lower)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--strength", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval-retrieval", cmd_eval_retrieval, "class retrieval, test queries against the train index"),
        ("eval-probe", cmd_eval_probe, "linear probe on frozen features"),
    ):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--modality", choices=MODALITIES, default="fused")
        if name == "eval-retrieval":
            s.add_argument("--ks", type=_ks, default=(1, 5, 20))
            s.add_argument("--crops", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("eval-fingerprint", help="instance retrieval of manipulated queries against the clean test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--aug", required=True)
    s.add_argument("--ks", type=_ks, default=(1, 5, 20))
    s.add_argument("--modality", choices=MODALITIES, default="fused")
    s.add_argument("--crops", type=int)
    s.set_defaults(func=cmd_eval_fingerprint)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    s.add_argument("--config")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--coords", type=int, default=3, help="coordinates sampled per parameter tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train every variant of an ablation grid")
    s.add_argument("--config")
    s.add_argument("--grid", required=True, choices=sorted(GRIDS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, ContainerError, EvalError, A.AugmentError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
