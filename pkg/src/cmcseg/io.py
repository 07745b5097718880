"""Domain types, the CMCV volume container, normalization and split bookkeeping.

The on-disk container is a little-endian binary file::

    magic "CMCV" | version u8 | dtype u8 | D,H,W u32 | spacing 3 x f64 | [K u16] | payload

dtype 0 is float32 intensities (volumes), dtype 1 is int16 labels (masks); the
``K`` field is present only for masks. Payload is C-order (row-major).
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

MAGIC = b"CMCV"
FORMAT_VERSION = 1
DTYPE_REAL32 = 0
DTYPE_INT16 = 1

_HEADER = struct.Struct("<4sBB3I3d")
_NUM_CLASSES = struct.Struct("<H")


class Modality(str, enum.Enum):
    A = "a"
    B = "b"


class VolumeIOError(Exception):
    """Base class for container read/write failures."""


class HeaderError(VolumeIOError):
    """Magic, version, dtype or field values in the header are malformed."""


class PayloadSizeError(VolumeIOError):
    """Payload length does not match the dimensions declared in the header."""


class InvariantError(VolumeIOError, ValueError):
    """A Volume/LabelMask invariant does not hold (non-finite, bad spacing, ...)."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise InvariantError(f"spacing must have 3 components, got {len(sp)}")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvariantError(f"spacing components must be finite and > 0, got {sp}")
    return sp


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.A

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvariantError(f"volume must be a non-empty 3-D grid, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        self.modality = Modality(self.modality)
        if not np.isfinite(self.data).all():
            raise InvariantError("volume contains non-finite intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.int16)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvariantError(f"mask must be a non-empty 3-D grid, got shape {self.data.shape}")
        if self.num_classes < 2:
            raise InvariantError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            raise InvariantError(f"mask labels must lie in [0, {self.num_classes - 1}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class BimodalSample:
    vol_a: Volume
    vol_b: Volume
    mask_a: Optional[LabelMask] = None
    mask_b: Optional[LabelMask] = None
    paired: bool = True
    misalignment: Optional[np.ndarray] = None
    sample_id: str = ""

    def __post_init__(self):
        if (self.mask_a is None) != (self.mask_b is None):
            raise InvariantError(f"sample {self.sample_id!r}: masks must be both present or both absent")
        if self.mask_a is not None:
            if self.mask_a.shape != self.vol_a.shape or self.mask_b.shape != self.vol_b.shape:
                raise InvariantError(f"sample {self.sample_id!r}: mask/volume shape mismatch")
        if self.paired and self.misalignment is None and self.vol_a.shape != self.vol_b.shape:
            raise InvariantError(f"sample {self.sample_id!r}: paired volumes must share a shape")
        if self.misalignment is not None:
            self.misalignment = np.asarray(self.misalignment, dtype=np.float64)
            if self.misalignment.shape != (4, 4):
                raise InvariantError("misalignment must be a 4x4 affine")

    @property
    def labeled(self) -> bool:
        return self.mask_a is not None

    def unlabeled_copy(self) -> "BimodalSample":
        return replace(self, mask_a=None, mask_b=None)


@dataclass
class DatasetSplit:
    labeled: list[BimodalSample]
    unlabeled: list[BimodalSample] = field(default_factory=list)
    val: list[BimodalSample] = field(default_factory=list)
    test: list[BimodalSample] = field(default_factory=list)

    def __post_init__(self):
        if len(self.labeled) < 1:
            raise InvariantError("a split needs at least one labeled sample")
        for s in self.labeled:
            if not s.labeled:
                raise InvariantError(f"labeled sample {s.sample_id!r} carries no masks")
        for s in self.unlabeled:
            if s.labeled:
                raise InvariantError(f"unlabeled sample {s.sample_id!r} carries masks")
        ids = [s.sample_id for s in self.all_samples()]
        if len(set(ids)) != len(ids):
            raise InvariantError("sample ids must be unique across splits")

    def all_samples(self) -> list[BimodalSample]:
        return [*self.labeled, *self.unlabeled, *self.val, *self.test]

    def by_name(self, name: str) -> list[BimodalSample]:
        if name not in ("labeled", "unlabeled", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


# -- container I/O ----------------------------------------------------------

def _write(path, dtype_code: int, shape, spacing, payload: np.ndarray, num_classes=None):
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, dtype_code, *shape, *spacing)
    if num_classes is not None:
        header += _NUM_CLASSES.pack(num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.astype(payload.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def save_volume(vol: Volume, path) -> None:
    if not np.isfinite(vol.data).all():
        raise InvariantError(f"{path}: refusing to write non-finite intensities")
    _write(path, DTYPE_REAL32, vol.shape, vol.spacing, vol.data)


def save_mask(mask: LabelMask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    _write(path, DTYPE_INT16, mask.shape, _check_spacing(spacing), mask.data, mask.num_classes)


def _read(path, expect_dtype: int):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise HeaderError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, dtype_code, d, h, w, *spacing = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version}")
    if dtype_code != expect_dtype:
        raise HeaderError(f"{path}: dtype code {dtype_code}, expected {expect_dtype}")
    offset = _HEADER.size
    num_classes = None
    if dtype_code == DTYPE_INT16:
        if len(raw) < offset + _NUM_CLASSES.size:
            raise HeaderError(f"{path}: mask header missing class-count field")
        (num_classes,) = _NUM_CLASSES.unpack_from(raw, offset)
        offset += _NUM_CLASSES.size
    np_dtype = np.dtype("<f4") if dtype_code == DTYPE_REAL32 else np.dtype("<i2")
    expected = d * h * w * np_dtype.itemsize
    if len(raw) - offset != expected:
        raise PayloadSizeError(f"{path}: payload has {len(raw) - offset} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=np_dtype, offset=offset).reshape(d, h, w)
    try:
        spacing = _check_spacing(spacing)
    except InvariantError as exc:
        raise InvariantError(f"{path}: {exc}") from None
    return data, spacing, num_classes


def load_volume(path, modality: Modality | str = Modality.A) -> Volume:
    data, spacing, _ = _read(path, DTYPE_REAL32)
    if not np.isfinite(data).all():
        raise InvariantError(f"{path}: payload contains non-finite intensities")
    return Volume(data.astype(np.float32), spacing, Modality(modality))


def load_mask(path) -> LabelMask:
    data, _, num_classes = _read(path, DTYPE_INT16)
    try:
        return LabelMask(data.astype(np.int16), int(num_classes))
    except InvariantError as exc:
        raise InvariantError(f"{path}: {exc}") from None


# -- preprocessing ----------------------------------------------------------

def zscore_normalize(vol: Volume) -> Volume:
    x = vol.data.astype(np.float64)
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        out = np.zeros_like(x)
    else:
        out = (x - x.mean()) / sd
    return Volume(out.astype(np.float32), vol.spacing, vol.modality)


# -- splits -------------------------------------------------------------------

def make_split(samples: Sequence[BimodalSample], labeled_fraction: float, seed: int,
               n_val: int = 0, n_test: int = 0) -> DatasetSplit:
    """Shuffle by ``seed``, carve val/test off the front, label a fraction of the rest.

    The carve-out happens before the fraction is applied, so changing
    ``labeled_fraction`` never changes val/test membership.
    """
    if not (0.0 < labeled_fraction <= 1.0):
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if not any(s.labeled for s in samples):
        raise ValueError("make_split needs at least one sample with masks")
    if n_val < 0 or n_test < 0 or n_val + n_test >= len(samples):
        raise ValueError(f"cannot carve {n_val} val + {n_test} test from {len(samples)} samples")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    val = shuffled[:n_val]
    test = shuffled[n_val:n_val + n_test]
    pool = shuffled[n_val + n_test:]
    for s in (*val, *test):
        if not s.labeled:
            raise ValueError(f"val/test sample {s.sample_id!r} has no masks")

    n_labeled = max(1, int(math.floor(labeled_fraction * len(pool) + 0.5)))
    candidates = [s for s in pool if s.labeled]
    labeled = candidates[:n_labeled]
    chosen = {id(s) for s in labeled}
    unlabeled = [s.unlabeled_copy() for s in pool if id(s) not in chosen]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, val=val, test=test)


SPLIT_NAMES = ("labeled", "unlabeled", "val", "test")


def save_dataset(split: DatasetSplit, out_dir, extra: Optional[dict] = None) -> Path:
    """Write every volume/mask of ``split`` plus a ``split.yaml`` manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": "cmcseg-split", "version": 1}
    if extra:
        manifest.update(extra)
    manifest["splits"] = {}
    for name in SPLIT_NAMES:
        entries = []
        for s in split.by_name(name):
            entry = {"id": s.sample_id, "paired": bool(s.paired)}
            for tag, vol in (("a", s.vol_a), ("b", s.vol_b)):
                rel = f"volumes/{s.sample_id}_{tag}.cmcv"
                save_volume(vol, out_dir / rel)
                entry[f"vol_{tag}"] = rel
            if s.labeled:
                for tag, mask, vol in (("a", s.mask_a, s.vol_a), ("b", s.mask_b, s.vol_b)):
                    rel = f"volumes/{s.sample_id}_{tag}_mask.cmcv"
                    save_mask(mask, out_dir / rel, vol.spacing)
                    entry[f"mask_{tag}"] = rel
            if s.misalignment is not None:
                entry["misalignment"] = s.misalignment.tolist()
            entries.append(entry)
        manifest["splits"][name] = entries
    path = out_dir / "split.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def load_dataset(manifest_path) -> DatasetSplit:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "split.yaml"
    root = manifest_path.parent
    manifest = yaml.safe_load(manifest_path.read_text())
    if not isinstance(manifest, dict) or "splits" not in manifest:
        raise HeaderError(f"{manifest_path}: not a split manifest")
    lists = {}
    for name in SPLIT_NAMES:
        samples = []
        for entry in manifest["splits"].get(name) or []:
            masks = {}
            if "mask_a" in entry:
                masks = {"mask_a": load_mask(root / entry["mask_a"]), "mask_b": load_mask(root / entry["mask_b"])}
            samples.append(BimodalSample(
                vol_a=load_volume(root / entry["vol_a"], Modality.A),
                vol_b=load_volume(root / entry["vol_b"], Modality.B),
                paired=bool(entry.get("paired", True)),
                misalignment=np.asarray(entry["misalignment"]) if "misalignment" in entry else None,
                sample_id=str(entry["id"]),
                **masks,
            ))
        lists[name] = samples
    return DatasetSplit(**lists)
