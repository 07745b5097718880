"""Hard-mask evaluation: per-class Dice and average symmetric surface distance (ASSD).

Surfaces use 6-connectivity: a class voxel is on the surface if any face
neighbor has another label or it touches the volume border. Distances are
measured between voxel centers in millimeters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import kernels
from .io import BimodalSample, LabelMask, Modality

UNDEFINED = float("nan")


class MissingStructureError(ValueError):
    """One of the two masks has no voxels of the class, the other does."""


def _data(m) -> np.ndarray:
    return m.data if isinstance(m, LabelMask) else np.asarray(m)


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def dice_score(pred, gt, k: int) -> float:
    p, g = _data(pred) == k, _data(gt) == k
    _check_shapes(p, g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / total


def extract_surface(mask, k: int) -> np.ndarray:
    """Boolean grid of the surface voxels of class ``k``."""
    return kernels.surface_mask(_data(mask) == k)


def surface_coords(mask, k: int) -> set[tuple[int, int, int]]:
    return {tuple(int(c) for c in idx) for idx in np.argwhere(extract_surface(mask, k))}


def assd(pred, gt, k: int, spacing=(1.0, 1.0, 1.0),
         on_missing: Union[str, float] = "undefined") -> float:
    """ASSD in mm between class ``k`` of two masks.

    Returns ``UNDEFINED`` (nan) when the class is absent from both. When it is
    absent from exactly one, ``on_missing`` decides: ``"undefined"`` (default),
    ``"raise"`` for :class:`MissingStructureError`, or a float penalty value.
    """
    p, g = _data(pred), _data(gt)
    _check_shapes(p, g)
    sp = extract_surface(p, k)
    sg = extract_surface(g, k)
    n_p, n_g = np.count_nonzero(sp), np.count_nonzero(sg)
    if n_p == 0 and n_g == 0:
        return UNDEFINED
    if n_p == 0 or n_g == 0:
        if on_missing == "undefined":
            return UNDEFINED
        if on_missing == "raise":
            raise MissingStructureError(f"class {k} is missing from {'prediction' if n_p == 0 else 'ground truth'}")
        return float(on_missing)
    d_pg, d_gp = kernels.surface_distances(sp, sg, tuple(float(s) for s in spacing))
    return float((d_pg.sum() + d_gp.sum()) / (n_p + n_g))


def _defined_mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else UNDEFINED


@dataclass
class EvalRecord:
    sample_id: str
    modality: Modality
    per_class_dice: list[float]
    per_class_assd_mm: list[float]
    mean_dice: float = field(init=False)
    mean_assd: float = field(init=False)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.mean_dice = _defined_mean(self.per_class_dice)
        self.mean_assd = _defined_mean(self.per_class_assd_mm)


def evaluate_masks(pred, gt, num_classes: int, spacing, sample_id: str,
                   modality: Modality, on_missing="undefined") -> EvalRecord:
    dices = [dice_score(pred, gt, k) for k in range(1, num_classes)]
    dists = [assd(pred, gt, k, spacing, on_missing) for k in range(1, num_classes)]
    return EvalRecord(sample_id, modality, dices, dists)


def evaluate_sample(logits_a, logits_b, sample: BimodalSample,
                    on_missing="undefined") -> tuple[EvalRecord, EvalRecord]:
    """Argmax both logit maps (K x D x H x W) and score them against the sample's masks."""
    if not sample.labeled:
        raise ValueError(f"sample {sample.sample_id!r} is unlabeled; cannot evaluate")
    records = []
    for logits, mask, vol, mod in ((logits_a, sample.mask_a, sample.vol_a, Modality.A),
                                   (logits_b, sample.mask_b, sample.vol_b, Modality.B)):
        logits = np.asarray(logits.detach().cpu() if hasattr(logits, "detach") else logits)
        if logits.shape[0] != mask.num_classes:
            raise ValueError(f"logits have {logits.shape[0]} classes, mask has {mask.num_classes}")
        pred = logits.argmax(axis=0)
        records.append(evaluate_masks(pred, mask, mask.num_classes, vol.spacing,
                                      sample.sample_id, mod, on_missing))
    return records[0], records[1]


def summarize(records: Sequence[EvalRecord]) -> dict:
    """Per-(modality, class) and per-modality means over defined entries, plus an overall mean Dice."""
    if not records:
        raise ValueError("no records to summarize")
    out: dict = {"per_class": {}, "per_modality": {}}
    n_fg = len(records[0].per_class_dice)
    for mod in Modality:
        recs = [r for r in records if r.modality == mod]
        if not recs:
            continue
        for c in range(n_fg):
            out["per_class"][(mod.value, c + 1)] = {
                "dice": _defined_mean([r.per_class_dice[c] for r in recs]),
                "assd": _defined_mean([r.per_class_assd_mm[c] for r in recs]),
            }
        out["per_modality"][mod.value] = {
            "dice": _defined_mean([r.mean_dice for r in recs]),
            "assd": _defined_mean([r.mean_assd for r in recs]),
        }
    out["mean_dice"] = _defined_mean([r.mean_dice for r in records])
    out["mean_assd"] = _defined_mean([r.mean_assd for r in records])
    return out


EVAL_COLUMNS = ("sample_id", "modality", "class", "dice", "assd_mm")


def write_eval_csv(records: Sequence[EvalRecord], path) -> dict:
    """One row per (sample, modality, class); then ``mean`` rows per (modality, class) and per modality."""
    summary = summarize(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in records:
            for c, (d, a) in enumerate(zip(r.per_class_dice, r.per_class_assd_mm), start=1):
                w.writerow([r.sample_id, r.modality.value, c, _fmt(d), _fmt(a)])
        for (mod, c), v in summary["per_class"].items():
            w.writerow(["mean", mod, c, _fmt(v["dice"]), _fmt(v["assd"])])
        for mod, v in summary["per_modality"].items():
            w.writerow(["mean", mod, "all", _fmt(v["dice"]), _fmt(v["assd"])])
    return summary


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))
