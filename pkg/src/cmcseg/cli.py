"""Command-line entry point: ``cmcseg {generate-data,train,evaluate,ablate,report}``.

Every command writes into a run directory (``--out``, or
``$CMCSEG_OUT/<command>-<config hash>``) and finishes by atomically writing
``run.yaml``, the run manifest listing the effective config and every emitted
file. Exit codes: 0 success, 1 runtime failure, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import yaml

from .config import ABLATION_ROWS, PRESETS, ConfigValidationError, TrainConfig, from_dict, load_config
from .io import DatasetSplit, load_dataset, save_dataset
from .model import ConfigError, load_checkpoint

MANIFEST = "run.yaml"
OUT_ENV = "CMCSEG_OUT"
COMPARISON_COLUMNS = ("run", "dice_a", "dice_b", "assd_a", "assd_b", "mean_dice")


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmcseg", description="Semi-supervised bimodal 3-D segmentation on synthetic phantoms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default="paired", help=f"YAML file or preset name ({', '.join(PRESETS)})")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--deterministic", type=_bool, metavar="BOOL")
            sp.add_argument("--labeled-fraction", type=float)
        sp.add_argument("--out", type=Path, help=f"run directory (default ${OUT_ENV}/<command>-<hash>)")

    g = sub.add_parser("generate-data", help="render a synthetic dataset and its split manifest")
    common(g)

    t = sub.add_parser("train", help="train one configuration")
    common(t)
    t.add_argument("--ablation", choices=list(ABLATION_ROWS))
    t.add_argument("--data", type=Path, help="dataset directory from generate-data (default: generate in memory)")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    common(e, config=False)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", default="test", choices=["labeled", "val", "test"])
    e.add_argument("--data", type=Path, help="dataset directory (default: the one recorded by the training run)")

    a = sub.add_parser("ablate", help="run the cumulative ablation table")
    common(a)
    a.add_argument("--seeds", type=int, nargs="+", help="seeds to average over (default: --seed or config seed)")
    a.add_argument("--data", type=Path)

    r = sub.add_parser("report", help="merge evaluation summaries of several runs")
    r.add_argument("runs", type=Path, nargs="+")
    r.add_argument("--out", type=Path)
    return p


# -- helpers ----------------------------------------------------------------

def effective_config(args) -> TrainConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic is not None:
        updates["deterministic"] = args.deterministic
    if args.labeled_fraction is not None:
        if getattr(args, "data", None) is not None:
            raise UsageError("--labeled-fraction cannot be combined with --data (the split is fixed on disk)")
        updates["labeled_fraction"] = args.labeled_fraction
    if updates:
        # round-trip through the validator so flag values get the same checks as file values
        cfg = from_dict(TrainConfig, {**cfg.to_dict(), **updates})
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    return cfg


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(yaml.safe_dump(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:10]


def run_dir(args, command: str, key: str) -> Path:
    if args.out is not None:
        out = args.out
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{key}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, manifest: dict) -> Path:
    missing = [p for p in manifest["artifacts"] if not (out / p).exists()]
    if missing:
        raise RuntimeError(f"declared artifacts were not written: {missing}")
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".run-", suffix=".yaml")
    with os.fdopen(fd, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    os.replace(tmp, out / MANIFEST)
    return out / MANIFEST


def read_manifest(run: Path) -> dict:
    return yaml.safe_load((run / MANIFEST).read_text())


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _split_for(cfg: TrainConfig, data: Path | None) -> DatasetSplit:
    from .trainer import build_split

    return load_dataset(data) if data is not None else build_split(cfg)


def describe_split(split: DatasetSplit, cfg: TrainConfig) -> str:
    return (f"labeled N={len(split.labeled)} unlabeled M={len(split.unlabeled)} "
            f"val={len(split.val)} test={len(split.test)} "
            f"paired={str(cfg.data.paired).lower()} "
            f"misalignment={str(cfg.data.misalignment.enabled).lower()}")


def _clean(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _summary_yaml(summary: dict) -> dict:
    return {
        "mean_dice": _clean(summary["mean_dice"]),
        "mean_assd": _clean(summary["mean_assd"]),
        "per_modality": {m: {k: _clean(v) for k, v in d.items()} for m, d in summary["per_modality"].items()},
    }


def _format_summary(summary: dict) -> str:
    pm = summary["per_modality"]
    return " ".join(f"{m}: dice {pm[m]['dice']:.4f} assd {pm[m]['assd']:.3f}mm" for m in sorted(pm))


# -- figures ----------------------------------------------------------------

def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path):
    # no Software tag, so identical data gives identical bytes across matplotlib builds
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_training(history, val_history, path: Path):
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    if val_history:
        ax.plot([t for t, _ in val_history], [d for _, d in val_history], marker="o", label="val Dice")
        ax.set_ylabel("mean Dice")
        ax.set_ylim(0, 1)
    else:
        ax.plot([r["epoch"] for r in history], [r["sup"] for r in history], label="supervised loss")
        ax.set_ylabel("loss")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_per_class(summary: dict, path: Path):
    plt = _figure()
    per_class = summary["per_class"]
    classes = sorted({c for _, c in per_class})
    mods = sorted({m for m, _ in per_class})
    width = 0.8 / max(len(mods), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, m in enumerate(mods):
        vals = [per_class[(m, c)]["dice"] for c in classes]
        ax.bar([c + (i - (len(mods) - 1) / 2) * width for c in classes], vals, width, label=f"modality {m}")
    ax.set_xticks(classes)
    ax.set_xlabel("class")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


# -- commands ---------------------------------------------------------------

def cmd_generate_data(args) -> int:
    from .trainer import build_split

    cfg = effective_config(args)
    started = _now()
    out = run_dir(args, "data", config_hash(cfg))
    split = build_split(cfg)
    save_dataset(split, out, extra={"config": cfg.to_dict()})
    print(describe_split(split, cfg))
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    write_manifest(out, {"run_id": out.name, "command": "generate-data", "config": cfg.to_dict(),
                         "started": started, "finished": _now(), "artifacts": artifacts,
                         "summary": {"labeled": len(split.labeled), "unlabeled": len(split.unlabeled),
                                     "val": len(split.val), "test": len(split.test),
                                     "paired": cfg.data.paired, "misaligned": cfg.data.misalignment.enabled}})
    return 0


def cmd_train(args) -> int:
    from .metrics import write_eval_csv
    from .trainer import best_model, evaluate_split, train

    cfg = effective_config(args)
    started = _now()
    out = run_dir(args, "train", config_hash(cfg))
    split = _split_for(cfg, args.data)
    print(describe_split(split, cfg))
    result = train(cfg, split, out_dir=out)
    artifacts = ["train_log.csv", "best.pt", "last.pt"]
    artifacts += sorted(p.name for p in out.glob("epoch_*.pt"))
    plot_training(result.history, result.val_history, out / "val_dice.png")
    artifacts.append("val_dice.png")
    manifest = {"run_id": out.name, "command": "train", "config": cfg.to_dict(),
                "data": str(args.data.resolve()) if args.data else None,
                "started": started}
    if split.test:
        records, summary = evaluate_split(best_model(result), split.test)
        write_eval_csv(records, out / "eval.csv")
        plot_per_class(summary, out / "per_class_dice.png")
        artifacts += ["eval.csv", "per_class_dice.png"]
        manifest["summary"] = _summary_yaml(summary)
        print("test", _format_summary(summary))
    manifest.update(finished=_now(), artifacts=artifacts)
    write_manifest(out, manifest)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import write_eval_csv
    from .trainer import build_split, evaluate_split

    started = _now()
    model, payload = load_checkpoint(args.checkpoint)
    data = args.data
    train_manifest = args.checkpoint.parent / MANIFEST
    cfg = None
    if train_manifest.exists():
        m = read_manifest(args.checkpoint.parent)
        cfg = from_dict(TrainConfig, m["config"])
        if data is None and m.get("data"):
            data = Path(m["data"])
    if data is not None:
        split = load_dataset(data)
    elif cfg is not None:
        split = build_split(cfg)
    else:
        raise UsageError(f"no --data given and no {MANIFEST} next to {args.checkpoint}")
    samples = split.by_name(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    k_data = samples[0].mask_a.num_classes
    if k_data != model.cfg.num_classes:
        raise ValueError(f"checkpoint predicts {model.cfg.num_classes} classes but the data has {k_data}")
    key = hashlib.sha256(f"{args.checkpoint.resolve()}:{args.split}".encode()).hexdigest()[:10]
    out = run_dir(args, "eval", key)
    records, summary = evaluate_split(model, samples)
    write_eval_csv(records, out / "eval.csv")
    plot_per_class(summary, out / "per_class_dice.png")
    print(args.split, _format_summary(summary))
    write_manifest(out, {"run_id": out.name, "command": "evaluate", "checkpoint": str(args.checkpoint.resolve()),
                         "split": args.split, "config": cfg.to_dict() if cfg else None,
                         "data": str(Path(data).resolve()) if data else None,
                         "started": started, "finished": _now(),
                         "artifacts": ["eval.csv", "per_class_dice.png"], "summary": _summary_yaml(summary)})
    return 0


def cmd_ablate(args) -> int:
    from .trainer import run_ablation, write_ablation

    cfg = effective_config(args)
    seeds = args.seeds or [cfg.seed]
    started = _now()
    out = run_dir(args, "ablate", config_hash(dataclasses.replace(cfg, seed=seeds[0])) + f"-s{len(seeds)}")
    split_for_seed = (lambda _seed: load_dataset(args.data)) if args.data else None
    table = run_ablation(cfg, seeds=seeds, split_for_seed=split_for_seed)
    text = write_ablation(table, out / "ablation.csv", out / "ablation.txt")
    print(text, end="")
    rows = [{k: (_clean(v) if k != "per_seed" else [{kk: _clean(vv) for kk, vv in p.items()} for p in v])
             for k, v in r.items()} for r in table]
    write_manifest(out, {"run_id": out.name, "command": "ablate", "config": cfg.to_dict(), "seeds": list(seeds),
                         "started": started, "finished": _now(),
                         "artifacts": ["ablation.csv", "ablation.txt"], "table": rows})
    return 0


def read_eval_means(path: Path) -> dict:
    """Per-modality mean rows (class ``all``) of an eval CSV."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["sample_id"] == "mean" and row["class"] == "all":
                out[row["modality"]] = (float(row["dice"]), float(row["assd_mm"]))
    return out


def cmd_report(args) -> int:
    missing = [str(r) for r in args.runs if not (r / MANIFEST).exists() or not (r / "eval.csv").exists()]
    if missing:
        raise UsageError("runs without a manifest and eval.csv: " + ", ".join(missing))
    rows = []
    for run in args.runs:
        means = read_eval_means(run / "eval.csv")
        (da, aa), (db, ab) = means["a"], means["b"]
        rows.append({"run": read_manifest(run)["run_id"], "dice_a": da, "dice_b": db,
                     "assd_a": aa, "assd_b": ab, "mean_dice": (da + db) / 2})
    started = _now()
    key = hashlib.sha256("\n".join(str(r.resolve()) for r in args.runs).encode()).hexdigest()[:10]
    out = run_dir(args, "report", key)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([r["run"]] + [repr(r[c]) for c in COMPARISON_COLUMNS[1:]])
    width = max(len("run"), *(len(r["run"]) for r in rows))
    lines = [f"{'run':<{width}} | {'Dice a':>7} {'Dice b':>7} | {'ASSD a':>7} {'ASSD b':>7} | {'mean':>7}"]
    for r in rows:
        lines.append(f"{r['run']:<{width}} | {100 * r['dice_a']:7.2f} {100 * r['dice_b']:7.2f} | "
                     f"{r['assd_a']:7.3f} {r['assd_b']:7.3f} | {100 * r['mean_dice']:7.2f}")
    text = "\n".join(lines) + "\n"
    (out / "comparison.txt").write_text(text)
    print(text, end="")
    write_manifest(out, {"run_id": out.name, "command": "report", "runs": [str(r.resolve()) for r in args.runs],
                         "started": started, "finished": _now(),
                         "artifacts": ["comparison.csv", "comparison.txt"]})
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigValidationError, ConfigError) as exc:
        print(f"cmcseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        if args.verbose:
            raise
        print(f"cmcseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
