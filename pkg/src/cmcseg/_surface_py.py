"""Pure numpy/scipy surface kernels; used when the compiled extension is unavailable."""

import numpy as np
from scipy import ndimage


def surface_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def surface_distances(surf_a, surf_b, spacing):
    """Nearest-surface distances both ways via exact Euclidean distance transforms."""
    surf_a = np.asarray(surf_a, dtype=bool)
    surf_b = np.asarray(surf_b, dtype=bool)
    if not surf_a.any() or not surf_b.any():
        inf_a = np.full(np.count_nonzero(surf_a), np.inf)
        inf_b = np.full(np.count_nonzero(surf_b), np.inf)
        return inf_a, inf_b
    to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~surf_a, sampling=spacing)
    return to_b[surf_a], to_a[surf_b]
