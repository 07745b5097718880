"""Semi-supervised training loop, evaluation and the cumulative ablation study."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses
from .config import ABLATION_ROWS, TrainConfig
from .io import BimodalSample, DatasetSplit, make_split, zscore_normalize
from .metrics import EvalRecord, evaluate_sample, summarize, write_eval_csv
from .model import CMCSegNet, build_model, save_checkpoint
from .synthgen import generate_dataset

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, sample_ids, breakdown=None):
        super().__init__(message)
        self.sample_ids = list(sample_ids)
        self.breakdown = breakdown


@dataclass
class Batch:
    """Stacked, normalized tensors for a list of samples. Masks are None for unlabeled batches."""

    ids: list[str]
    x_a: torch.Tensor
    x_b: torch.Tensor
    y_a: Optional[torch.Tensor] = None
    y_b: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.ids)


def _volume_tensor(vol) -> torch.Tensor:
    return torch.from_numpy(zscore_normalize(vol).data.copy())[None]


def make_batch(samples: Sequence[BimodalSample]) -> Batch:
    ids = [s.sample_id for s in samples]
    x_a = torch.stack([_volume_tensor(s.vol_a) for s in samples])
    x_b = torch.stack([_volume_tensor(s.vol_b) for s in samples])
    if all(s.labeled for s in samples):
        y_a = torch.stack([torch.from_numpy(s.mask_a.data.astype(np.int64)) for s in samples])
        y_b = torch.stack([torch.from_numpy(s.mask_b.data.astype(np.int64)) for s in samples])
        return Batch(ids, x_a, x_b, y_a, y_b)
    return Batch(ids, x_a, x_b)


def unlabeled_batch(samples: Sequence[BimodalSample]) -> Batch:
    """Batch built without touching masks, whatever the samples carry."""
    return make_batch([s.unlabeled_copy() for s in samples])


@dataclass
class TrainState:
    model: CMCSegNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    history: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_val_dice: float = -math.inf
    best_state: Optional[dict] = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    unlabeled_queue: list[int] = field(default_factory=list)


@contextmanager
def determinism(enabled: bool, seed: int):
    prev = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.manual_seed(seed)
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _check_batch(model: CMCSegNet, batch: Batch, labeled: bool):
    shape = tuple(model.cfg.input_shape)
    for name, x in (("x_a", batch.x_a), ("x_b", batch.x_b)):
        if tuple(x.shape[-3:]) != shape or x.dim() != 5:
            raise ValueError(f"{name} has shape {tuple(x.shape)}, model expects (B, 1, *{shape})")
    if labeled:
        if batch.y_a is None or batch.y_b is None:
            raise ValueError("labeled batch is missing masks")
        top = int(max(batch.y_a.max(), batch.y_b.max()))
        if top >= model.cfg.num_classes:
            raise ValueError(f"mask label {top} exceeds model class count {model.cfg.num_classes}")


def train_step(state: TrainState, labeled: Batch, unlabeled: Optional[Batch], cfg: TrainConfig,
               t: int, t_max: int) -> losses.LossBreakdown:
    """One optimizer update on sup + alpha*csc + beta*cac for this labeled/unlabeled batch pair."""
    model, flags = state.model, cfg.ablation
    use_csc, use_cac = flags.cmc_strategy, flags.ccl_module
    if len(labeled) == 0:
        raise ValueError("labeled batch is empty")
    _check_batch(model, labeled, True)
    need_unlabeled = use_cac or (use_csc and cfg.csc_on_unlabeled)
    if unlabeled is not None and len(unlabeled) and need_unlabeled:
        _check_batch(model, unlabeled, False)
        x_a = torch.cat([labeled.x_a, unlabeled.x_a])
        x_b = torch.cat([labeled.x_b, unlabeled.x_b])
    else:
        unlabeled = None
        x_a, x_b = labeled.x_a, labeled.x_b
    n = len(labeled)

    model.train()
    out = model(x_a, x_b)
    sup = losses.supervised_loss(out.logits_a[:n], labeled.y_a, out.logits_b[:n], labeled.y_b,
                                 cfg.supervised_mode)
    zero = sup.new_zeros(())
    csc = zero
    if use_csc:
        end = x_a.shape[0] if cfg.csc_on_unlabeled else n
        csc = losses.csc_loss(out.f_ds_a[:end], out.f_ds_b[:end], cfg.contrastive_denominator)
    cac = zero
    if use_cac and unlabeled is not None:
        cac = losses.cac_loss(torch.softmax(out.logits_a[n:], dim=1), torch.softmax(out.logits_b[n:], dim=1),
                              cfg.contrastive_denominator)

    ids = labeled.ids + (unlabeled.ids if unlabeled is not None else [])
    try:
        breakdown = losses.total_loss(sup.item(), csc.item(), cac.item(), t, t_max, use_csc, use_cac)
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"{exc} (batch {ids})", ids) from None
    total = losses.weighted_total(sup, csc if use_csc else zero, cac if use_cac else zero,
                                  breakdown.alpha, breakdown.beta)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.global_step += 1
    return breakdown


@torch.no_grad()
def predict(model: CMCSegNet, sample: BimodalSample):
    model.eval()
    b = make_batch([sample.unlabeled_copy()])
    out = model(b.x_a, b.x_b)
    return out.logits_a[0], out.logits_b[0]


def evaluate_split(model: CMCSegNet, samples: Sequence[BimodalSample],
                   on_missing="undefined") -> tuple[list[EvalRecord], dict]:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    records = []
    for s in samples:
        la, lb = predict(model, s)
        records.extend(evaluate_sample(la, lb, s, on_missing))
    return records, summarize(records)


def build_split(cfg: TrainConfig) -> DatasetSplit:
    d = cfg.data
    samples = generate_dataset(d.phantom, d.appearance_a, d.appearance_b, d.misalignment,
                               d.paired, d.n_samples, d.phantom.seed)
    return make_split(samples, cfg.labeled_fraction, cfg.seed, d.n_val, d.n_test)


def _resume_payload(state: TrainState, cfg: TrainConfig) -> dict:
    return {
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "history": state.history,
        "val_history": state.val_history,
        "best_val_dice": state.best_val_dice,
        "best_state": state.best_state,
        "rng_state": state.rng.bit_generator.state,
        "unlabeled_queue": list(state.unlabeled_queue),
        "torch_rng": torch.get_rng_state(),
        "train_config": cfg.to_dict(),
    }


@dataclass
class TrainResult:
    state: TrainState
    split: DatasetSplit
    history: list[dict]
    val_history: list[tuple[int, float]]


def _open_log(out_dir: Optional[Path], append: bool):
    if out_dir is None:
        return None, None
    path = out_dir / "train_log.csv"
    append = append and path.exists() and path.stat().st_size > 0
    fh = open(path, "a" if append else "w", newline="")
    w = csv.writer(fh)
    if not append:
        w.writerow(losses.LOG_COLUMNS)
    return fh, w


def train(cfg: TrainConfig, split: Optional[DatasetSplit] = None, out_dir=None,
          resume_from=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; epoch ``t`` (0-based) uses ramp_weights(t, cfg.epochs).

    Each step takes one labeled batch (an epoch is one pass over the labeled
    pool) and one unlabeled batch drawn from a reshuffled cycle. When
    ``out_dir`` is given: ``train_log.csv``, ``best.pt``, ``last.pt`` and,
    every ``checkpoint_every`` epochs, resumable ``epoch_XXXX.pt``.
    """
    split = split if split is not None else build_split(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with determinism(cfg.deterministic, cfg.seed):
        model = build_model(cfg.effective_model_config(), seed=cfg.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        state = TrainState(model, optimizer, rng=np.random.default_rng([cfg.seed, 1]))
        if resume_from is not None:
            payload = torch.load(resume_from, map_location="cpu", weights_only=False)
            model.load_state_dict(payload["state_dict"])
            optimizer.load_state_dict(payload["optimizer"])
            state.epoch = payload["epoch"]
            state.global_step = payload["global_step"]
            state.history = list(payload["history"])
            state.val_history = [tuple(v) for v in payload["val_history"]]
            state.best_val_dice = payload["best_val_dice"]
            state.best_state = payload["best_state"]
            state.rng.bit_generator.state = payload["rng_state"]
            state.unlabeled_queue = list(payload["unlabeled_queue"])
            torch.set_rng_state(payload["torch_rng"])

        labeled = list(split.labeled)
        unlabeled = list(split.unlabeled)
        lab_batches_cache = {}
        fh, writer = _open_log(out_dir, append=resume_from is not None)
        try:
            while state.epoch < cfg.epochs:
                t = state.epoch
                order = state.rng.permutation(len(labeled))
                for start in range(0, len(order), cfg.batch_size_labeled):
                    idx = tuple(order[start:start + cfg.batch_size_labeled])
                    if idx not in lab_batches_cache:
                        lab_batches_cache[idx] = make_batch([labeled[i] for i in idx])
                    ubatch = None
                    if unlabeled:
                        picked = []
                        while len(picked) < min(cfg.batch_size_unlabeled, len(unlabeled)):
                            if not state.unlabeled_queue:
                                state.unlabeled_queue = [int(i) for i in state.rng.permutation(len(unlabeled))]
                            picked.append(state.unlabeled_queue.pop(0))
                        ubatch = unlabeled_batch([unlabeled[i] for i in picked])
                    try:
                        bd = train_step(state, lab_batches_cache[idx], ubatch, cfg, t, cfg.epochs)
                    except NonFiniteLossError as exc:
                        if out_dir is not None:
                            (out_dir / "nonfinite_dump.json").write_text(json.dumps(
                                {"epoch": t, "step": state.global_step, "sample_ids": exc.sample_ids,
                                 "message": str(exc)}, indent=2))
                        raise
                    row = {"step": state.global_step, "epoch": t, **bd.__dict__}
                    state.history.append(row)
                    if writer is not None:
                        writer.writerow([row[c] for c in losses.LOG_COLUMNS])
                state.epoch += 1
                last = state.epoch == cfg.epochs
                if split.val and (state.epoch % max(cfg.eval_every, 1) == 0 or last):
                    _, summary = evaluate_split(model, split.val)
                    state.val_history.append((t, summary["mean_dice"]))
                    log.info("epoch %d val dice %.4f", t, summary["mean_dice"])
                    if summary["mean_dice"] > state.best_val_dice:
                        state.best_val_dice = summary["mean_dice"]
                        state.best_state = copy.deepcopy(model.state_dict())
                        if out_dir is not None:
                            save_checkpoint(model, out_dir / "best.pt", epoch=t, val_dice=state.best_val_dice)
                if out_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(model, out_dir / f"epoch_{state.epoch:04d}.pt", **_resume_payload(state, cfg))
        finally:
            if fh is not None:
                fh.close()
        if out_dir is not None:
            save_checkpoint(model, out_dir / "last.pt", **_resume_payload(state, cfg))
            if state.best_state is None:
                save_checkpoint(model, out_dir / "best.pt", epoch=state.epoch - 1)
    return TrainResult(state, split, state.history, state.val_history)


def best_model(result: TrainResult) -> CMCSegNet:
    model = result.state.model
    if result.state.best_state is None:
        return model
    best = copy.deepcopy(model)
    best.load_state_dict(result.state.best_state)
    return best


# -- ablation ---------------------------------------------------------------

ABLATION_COLUMNS = ("row", "encoder", "cmc", "ccl", "dice_a", "dice_b", "assd_a", "assd_b", "seeds")


def run_ablation(base_cfg: TrainConfig, seeds: Sequence[int] = (0,), split_for_seed=None,
                 rows: Sequence[str] = tuple(ABLATION_ROWS)) -> list[dict]:
    """Train each cumulative toggle row per seed, evaluate the best-val model on the test split.

    ``split_for_seed(seed)`` may supply the data; by default each seed gets
    ``build_split`` of the base config with that seed. Returns one dict per
    row with seed-averaged per-modality mean Dice and ASSD plus per-seed values.
    """
    import dataclasses

    splits = {}
    table = []
    for name in rows:
        per_seed = []
        for seed in seeds:
            cfg = dataclasses.replace(base_cfg.with_ablation(name), seed=seed)
            if seed not in splits:
                splits[seed] = split_for_seed(seed) if split_for_seed else build_split(cfg)
            result = train(cfg, splits[seed])
            model = best_model(result)
            _, summary = evaluate_split(model, splits[seed].test)
            pm = summary["per_modality"]
            per_seed.append({"seed": seed, "dice_a": pm["a"]["dice"], "dice_b": pm["b"]["dice"],
                             "assd_a": pm["a"]["assd"], "assd_b": pm["b"]["assd"],
                             "mean_dice": summary["mean_dice"]})
            log.info("ablation %s seed %d: dice %.4f", name, seed, summary["mean_dice"])
        flags = ABLATION_ROWS[name]
        row = {"row": name, "encoder": flags.modality_specific_encoder, "cmc": flags.cmc_strategy,
               "ccl": flags.ccl_module}
        for key in ("dice_a", "dice_b", "assd_a", "assd_b", "mean_dice"):
            row[key] = float(np.nanmean([r[key] for r in per_seed]))
        row["per_seed"] = per_seed
        table.append(row)
    return table


def write_ablation(table: list[dict], csv_path, txt_path=None) -> str:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in table:
            w.writerow([r["row"], int(r["encoder"]), int(r["cmc"]), int(r["ccl"]),
                        repr(r["dice_a"]), repr(r["dice_b"]), repr(r["assd_a"]), repr(r["assd_b"]),
                        " ".join(str(p["seed"]) for p in r["per_seed"])])
    text = format_ablation(table)
    if txt_path is not None:
        Path(txt_path).write_text(text)
    return text


def format_ablation(table: list[dict]) -> str:
    def mark(b):
        return "x" if b else "-"

    lines = [f"{'row':<9} base enc cmc ccl | {'Dice a':>7} {'Dice b':>7} | {'ASSD a':>7} {'ASSD b':>7}"]
    for r in table:
        lines.append(f"{r['row']:<9}  x    {mark(r['encoder'])}   {mark(r['cmc'])}   {mark(r['ccl'])}  | "
                     f"{100 * r['dice_a']:7.2f} {100 * r['dice_b']:7.2f} | {r['assd_a']:7.3f} {r['assd_b']:7.3f}")
    return "\n".join(lines) + "\n"


def write_records(records, path):
    return write_eval_csv(records, path)
