"""Compiled vs numpy kernels: median wall time per call.

    python3 benchmarks/bench_kernels.py [--repeats N]

Both implementations are imported directly, so the comparison does not depend
on which one ``scatternet.kernels`` selected at import.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from scatternet import _kernels_py as py
from scatternet.emoracle import ETA0, IncidentWave
from scatternet.geometry import generate_shape

try:
    from scatternet import _kernels as cy
except ImportError:  # pragma: no cover
    cy = None


def bench(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases():
    wave = IncidentWave()
    k = wave.wavenumber
    mesh = generate_shape("sphere", {"radius": 0.15}, wave.wavelength / 10)
    c, n, a = mesh.centroids, mesh.normals, mesh.areas
    sc = np.zeros(mesh.n_faces, complex)
    tri = mesh.vertices[mesh.faces]
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(4000, 3))
    m = 1500
    av, bv = rng.normal(size=m), rng.normal(size=m)
    w = rng.uniform(0.1, 1, size=(m, m))
    mask = (rng.uniform(size=(m, m)) < 0.6).astype(np.uint8)
    np.fill_diagonal(mask, 1)
    shift = np.maximum(av + bv.max(), 0)
    out = np.empty((m, m))
    e = rng.normal(size=(m, m))

    return [
        (f"assemble_impedance ({mesh.n_faces} faces)",
         lambda K: K.assemble_impedance(c, n, a, k, 1j * k * ETA0, sc)),
        ("farthest_point_sampling (4000 pts, m=1000)", lambda K: K.farthest_point_sampling(pts, 1000, 0)),
        (f"self_integrals ({mesh.n_faces} faces)", lambda K: K.self_integrals(tri, n, k)),
        ("triangle_integrals (200 pairs)", lambda K: K.triangle_integrals(c[:200], tri[200:400], n[200:400], k)),
        (f"masked_logits ({m}x{m})", lambda K: K.masked_logits(av, bv, w, mask, 0.2, True, True, 0, out)),
        (f"masked_logits_shifted ({m}x{m})",
         lambda K: K.masked_logits_shifted(av, bv, w, mask, 0.2, True, True, 0, shift, out)),
        (f"shift_rows ({m}x{m})", lambda K: K.shift_rows(e.copy())),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run: python3 setup.py build_ext --inplace")
        return 1
    print(f"{'kernel':48s} {'cython [s]':>12s} {'numpy [s]':>12s} {'speedup':>9s}")
    for name, fn in cases():
        tc = bench(lambda: fn(cy), args.repeats)
        tp = bench(lambda: fn(py), args.repeats)
        print(f"{name:48s} {tc:12.5f} {tp:12.5f} {tp / tc:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
