"""Synthetic bimodal phantoms: ellipsoid anatomy, two appearances, rigid misalignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .io import BimodalSample, LabelMask, Modality, Volume

# stream tags mixed into per-sample seeds so the random draws stay independent
_ANATOMY_A, _ANATOMY_B, _RENDER_A, _RENDER_B, _MISALIGN = range(5)
MAX_PLACEMENT_RETRIES = 50


class AnatomyError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 3
    organs_per_class: int = 1
    size_range: tuple[float, float] = (4.0, 8.0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        self.size_range = tuple(float(s) for s in self.size_range)
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 1:
            raise ValueError(f"grid_shape must be 3 positive ints, got {self.grid_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.organs_per_class < 1:
            raise ValueError("organs_per_class must be >= 1")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ValueError(f"size_range must satisfy 0 < min <= max, got {self.size_range}")
        if 2 * hi + 1 > min(self.grid_shape):
            raise ValueError(f"semi-axis {hi} does not fit inside grid {self.grid_shape}")


@dataclass
class ModalityAppearance:
    class_intensity: tuple[float, ...]
    noise_sigma: float = 0.0
    bias_field_amplitude: float = 0.0
    contrast_gamma: float = 1.0

    def __post_init__(self):
        self.class_intensity = tuple(float(v) for v in self.class_intensity)
        if self.noise_sigma < 0 or self.bias_field_amplitude < 0:
            raise ValueError("noise_sigma and bias_field_amplitude must be >= 0")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be > 0")


@dataclass
class MisalignmentSpec:
    max_rotation_deg: float = 10.0
    max_translation_vox: float = 3.0
    enabled: bool = False

    def __post_init__(self):
        if self.max_rotation_deg < 0 or self.max_translation_vox < 0:
            raise ValueError("misalignment magnitudes must be >= 0")


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    label: int


def rasterize_ellipsoids(shape, ellipsoids, num_classes: int) -> LabelMask:
    """Paint ellipsoids in order; a voxel belongs to one when its center satisfies sum((x-c)/a)^2 <= 1."""
    grid = np.indices(shape, dtype=np.float64)
    out = np.zeros(shape, dtype=np.int16)
    for e in ellipsoids:
        r2 = sum(((grid[i] - e.center[i]) / e.semi_axes[i]) ** 2 for i in range(3))
        out[r2 <= 1.0] = e.label
    return LabelMask(out, num_classes)


def _ellipsoid_region(shape, e: Ellipsoid) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    return sum(((grid[i] - e.center[i]) / e.semi_axes[i]) ** 2 for i in range(3)) <= 1.0


def sample_ellipsoids(spec: PhantomSpec, rng: np.random.Generator) -> list[Ellipsoid]:
    """Draw non-overlapping ellipsoids per class; overlap is tolerated only after the retry budget."""
    occupied = np.zeros(spec.grid_shape, dtype=bool)
    placed = []
    lo, hi = spec.size_range
    for label in range(1, spec.num_classes):
        for _ in range(spec.organs_per_class):
            best = None
            for _attempt in range(MAX_PLACEMENT_RETRIES):
                axes = tuple(rng.uniform(lo, hi, size=3))
                center = tuple(rng.uniform(a, n - 1 - a) for a, n in zip(axes, spec.grid_shape))
                e = Ellipsoid(center, axes, label)
                region = _ellipsoid_region(spec.grid_shape, e)
                if not region.any():
                    continue
                overlap = np.count_nonzero(region & occupied)
                if best is None or overlap < best[0]:
                    best = (overlap, e, region)
                if overlap == 0:
                    break
            if best is None:
                raise AnatomyError(f"could not place an ellipsoid for class {label}")
            placed.append(best[1])
            occupied |= best[2]
    return placed


def make_anatomy(spec: PhantomSpec, seed: int | None = None) -> LabelMask:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    ellipsoids = sample_ellipsoids(spec, rng)
    mask = rasterize_ellipsoids(spec.grid_shape, ellipsoids, spec.num_classes)
    counts = np.bincount(mask.data.ravel(), minlength=spec.num_classes)
    for label in range(1, spec.num_classes):
        if counts[label] == 0:
            raise AnatomyError(f"class {label} was fully overwritten during placement")
    return mask


def bias_field(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative second-order polynomial field in [1 - amplitude, 1 + amplitude]."""
    if amplitude == 0:
        return np.ones(shape)
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    terms = [z, y, x, z * y, z * x, y * x, z ** 2, y ** 2, x ** 2]
    coeffs = rng.normal(size=len(terms))
    poly = sum(c * t for c, t in zip(coeffs, terms))
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return 1.0 + amplitude * poly


def render_modality(mask: LabelMask, appearance: ModalityAppearance, seed: int,
                    spacing=(1.0, 1.0, 1.0), modality: Modality = Modality.A) -> Volume:
    if len(appearance.class_intensity) < mask.num_classes:
        raise ValueError("appearance has fewer class intensities than the mask has classes")
    rng = np.random.default_rng(seed)
    table = np.asarray(appearance.class_intensity, dtype=np.float64)
    if appearance.contrast_gamma != 1.0:
        table = np.sign(table) * np.abs(table) ** appearance.contrast_gamma
    img = table[mask.data]
    if appearance.bias_field_amplitude > 0:
        img = img * bias_field(mask.shape, appearance.bias_field_amplitude, rng)
    if appearance.noise_sigma > 0:
        img = img + rng.normal(0.0, appearance.noise_sigma, size=mask.shape)
    return Volume(img.astype(np.float32), spacing, modality)


def rigid_affine(shape, angles_deg, translation) -> np.ndarray:
    """4x4 voxel-space transform: rotate about the grid center by (z, y, x) Euler angles, then translate."""
    az, ay, ax = (math.radians(a) for a in angles_deg)
    rz = np.array([[1, 0, 0], [0, math.cos(az), -math.sin(az)], [0, math.sin(az), math.cos(az)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rx = np.array([[math.cos(ax), -math.sin(ax), 0], [math.sin(ax), math.cos(ax), 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    affine = np.eye(4)
    affine[:3, :3] = rot
    affine[:3, 3] = center - rot @ center + np.asarray(translation, dtype=np.float64)
    return affine


def resample(vol: Volume, mask: LabelMask, affine: np.ndarray) -> tuple[Volume, LabelMask]:
    """Move content forward by ``affine``: out(q) = in(affine^-1 q). Trilinear for intensities, nearest for labels."""
    inv = np.linalg.inv(affine)
    matrix, offset = inv[:3, :3], inv[:3, 3]
    data = ndimage.affine_transform(vol.data.astype(np.float64), matrix, offset,
                                    order=1, mode="nearest")
    labels = ndimage.affine_transform(mask.data, matrix, offset, order=0,
                                      mode="constant", cval=0)
    return (Volume(data.astype(np.float32), vol.spacing, vol.modality),
            LabelMask(labels, mask.num_classes))


def apply_misalignment(vol: Volume, mask: LabelMask, spec: MisalignmentSpec,
                       seed: int) -> tuple[Volume, LabelMask, np.ndarray]:
    if not spec.enabled:
        return vol, mask, np.eye(4)
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg, size=3)
    shift = rng.uniform(-spec.max_translation_vox, spec.max_translation_vox, size=3)
    affine = rigid_affine(vol.shape, angles, shift)
    moved_vol, moved_mask = resample(vol, mask, affine)
    return moved_vol, moved_mask, affine


def generate_dataset(spec: PhantomSpec, app_a: ModalityAppearance, app_b: ModalityAppearance,
                     mis: MisalignmentSpec, paired: bool, n_samples: int,
                     seed: int) -> list[BimodalSample]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = []
    for i in range(n_samples):
        s = seed + i
        anatomy_a = make_anatomy(spec, seed=[s, _ANATOMY_A])
        anatomy_b = anatomy_a if paired else make_anatomy(spec, seed=[s, _ANATOMY_B])
        vol_a = render_modality(anatomy_a, app_a, [s, _RENDER_A], spec.spacing, Modality.A)
        vol_b = render_modality(anatomy_b, app_b, [s, _RENDER_B], spec.spacing, Modality.B)
        vol_b, mask_b, affine = apply_misalignment(vol_b, anatomy_b, mis, [s, _MISALIGN])
        samples.append(BimodalSample(
            vol_a=vol_a, vol_b=vol_b, mask_a=anatomy_a, mask_b=mask_b, paired=paired,
            misalignment=affine if mis.enabled else None, sample_id=f"s{i:03d}",
        ))
    return samples


@dataclass
class DataConfig:
    """Everything needed to regenerate a synthetic benchmark deterministically."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    appearance_a: ModalityAppearance = field(
        default_factory=lambda: ModalityAppearance((0.1, 0.9, 0.5), 0.15, 0.2, 1.0))
    appearance_b: ModalityAppearance = field(
        default_factory=lambda: ModalityAppearance((0.8, 0.3, 0.1), 0.15, 0.2, 1.5))
    misalignment: MisalignmentSpec = field(default_factory=MisalignmentSpec)
    paired: bool = True
    n_samples: int = 50
    n_val: int = 5
    n_test: int = 5
