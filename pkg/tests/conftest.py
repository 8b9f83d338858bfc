"""Shared fixtures and the finite-difference gradient oracle."""
from __future__ import annotations

import numpy as np
import pytest

from scatternet.emoracle import IncidentWave
from scatternet.geometry import TriangleMesh, generate_shape

FD_STEP = 1e-6
FD_RTOL = 1e-4


def numeric_grad(f, arrays, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (mutated in place, restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            fp = f()
            a[i] = old - step
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def grad_rel_error(analytic, numeric) -> float:
    """Relative error of the concatenated gradient vectors."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(n), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(build, params, rtol=FD_RTOL):
    """``build()`` returns a scalar Tensor computed from Tensors wrapping ``params``' arrays."""
    for p in params:
        p.grad = None
    loss = build()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    numeric = numeric_grad(lambda: float(build().data), [p.data for p in params])
    err = grad_rel_error(analytic, numeric)
    assert err < rtol, f"gradient rel. error {err:.3e}"
    return err


@pytest.fixture(scope="session")
def wave():
    return IncidentWave(1e9, 1.0, 30.0, 0.0)


@pytest.fixture(scope="session")
def small_cube(wave):
    return generate_shape("cube", {"side": 0.2}, wave.wavelength / 5)


def single_triangle() -> TriangleMesh:
    return TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))


def unit_cube_12() -> TriangleMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriangleMesh(v, np.array(f))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
