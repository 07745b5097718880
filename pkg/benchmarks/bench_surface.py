"""Compare the compiled and pure-Python surface kernels on random blob masks.

    python benchmarks/bench_surface.py [--sizes 16 32 48] [--repeat 5]
"""

import argparse
import timeit

import numpy as np
from scipy import ndimage

from cmcseg import _surface_py

try:
    from cmcseg import _surface
except ImportError:
    _surface = None


def blob(rng, n):
    noise = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), sigma=n / 8)
    return noise > np.quantile(noise, 0.7)


def run(backend, a, b, spacing):
    sa, sb = backend.surface_mask(a), backend.surface_mask(b)
    return backend.surface_distances(sa, sb, spacing)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 48])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", _surface_py)] + ([("cython", _surface)] if _surface else [])
    print(f"{'size':>5} {'surface vox':>12} " + " ".join(f"{n + ' ms':>10}" for n, _ in backends) + "  max |diff|")
    for n in args.sizes:
        a, b = blob(rng, n), blob(rng, n)
        spacing = (1.0, 0.8, 1.2)
        results, times = [], []
        for _, be in backends:
            results.append(run(be, a, b, spacing))
            best = min(timeit.repeat(lambda: run(be, a, b, spacing), number=1, repeat=args.repeat))
            times.append(1e3 * best)
        diff = 0.0
        if len(results) == 2:
            diff = max(np.abs(x - y).max() for x, y in zip(results[0], results[1]))
        n_surf = int(_surface_py.surface_mask(a).sum() + _surface_py.surface_mask(b).sum())
        print(f"{n:>5} {n_surf:>12} " + " ".join(f"{t:>10.2f}" for t in times) + f"  {diff:.1e}")


if __name__ == "__main__":
    main()
