"""Pure numpy versions of the hot kernels.

Same signatures and results as the compiled ``_kernels`` module. Assembly is
done in row chunks so the (K, K, 3, 3) intermediate never materialises in full.
"""
from __future__ import annotations

import numpy as np

_CHUNK_PAIRS = 200_000


def assemble_impedance(centroids, normals, areas, k, prefactor, self_coeff):
    """Collocation impedance matrix with tangential testing and sources.

    Off-diagonal 3x3 blocks are ``prefactor * P_m G(p_m, p_k) P_k * A_k`` with
    ``G = (I + grad grad / k^2) g`` and ``P = I - n n^T``; diagonal blocks are
    ``self_coeff[m] * I``.
    """
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    n = np.ascontiguousarray(normals, dtype=np.float64)
    a = np.ascontiguousarray(areas, dtype=np.float64)
    K = len(c)
    Z = np.zeros((K, 3, K, 3), dtype=np.complex128)
    proj = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
    eye = np.eye(3)
    rows = max(1, _CHUNK_PAIRS // max(K, 1))
    for start in range(0, K, rows):
        stop = min(K, start + rows)
        d = c[start:stop, None, :] - c[None, :, :]
        R = np.sqrt(np.einsum("mkj,mkj->mk", d, d))
        diag = np.arange(start, stop)
        R[diag - start, diag] = 1.0
        rh = d / R[..., None]
        kR = k * R
        g = np.exp(-1j * kR) / (4.0 * np.pi * R)
        inv = 1.0 / kR
        c1 = g * (1.0 - 1j * inv - inv * inv)
        c2 = g * (1.0 - 3j * inv - 3.0 * inv * inv)
        G = c1[..., None, None] * eye - c2[..., None, None] * (rh[..., :, None] * rh[..., None, :])
        G *= (prefactor * a)[None, :, None, None]
        G = np.einsum("mab,mkbc,kcd->makd", proj[start:stop], G, proj, optimize=True)
        G[diag - start, :, diag, :] = self_coeff[start:stop, None, None] * eye
        Z[start:stop] = G
    return Z.reshape(3 * K, 3 * K)


def farthest_point_sampling(points, m, seed):
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    picks = np.empty(m, dtype=np.int64)
    picks[0] = seed
    mind = np.sum((pts - pts[seed]) ** 2, axis=1)
    mind[seed] = -1.0
    for i in range(1, m):
        # argmax returns the first maximum: lowest index wins ties
        nxt = int(np.argmax(mind))
        picks[i] = nxt
        np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1), out=mind)
        mind[picks[: i + 1]] = -1.0
    return picks


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


EDGE_POINTS = 16
TRI_POINTS = 6  # collapsed Gauss rule, TRI_POINTS**2 nodes
_EDGE_S, _EDGE_W = _gauss01(EDGE_POINTS)


def _tri_rule(n):
    u, w = _gauss01(n)
    a = np.repeat(u, n)
    b = np.tile(u, n) * (1.0 - a)
    wt = np.repeat(w, n) * np.tile(w, n) * (1.0 - a)
    return a, b, wt


_TRI_A, _TRI_B, _TRI_W = _tri_rule(TRI_POINTS)


def _edge_charge_tensor(p, tri, normal, k):
    """``sum_e L_e m_e^T`` for observation points ``p`` (N,3) and triangles (N,3,3).

    ``L_e = int_e (1 + jkR) exp(-jkR) (p - q) / (4 pi R^3) dl`` is the field
    kernel of a unit line charge on edge ``e``; ``m_e`` is the in-plane
    outward edge normal.
    """
    out = np.zeros((len(p), 3, 3), dtype=np.complex128)
    centre = tri.mean(axis=1)
    for e in range(3):
        a, b = tri[:, e], tri[:, (e + 1) % 3]
        t = b - a
        length = np.linalg.norm(t, axis=1)
        t = t / length[:, None]
        m = np.cross(t, normal)
        flip = np.einsum("ij,ij->i", m, 0.5 * (a + b) - centre) < 0
        m[flip] *= -1.0
        q = a[:, None, :] + (_EDGE_S[None, :, None] * length[:, None, None]) * t[:, None, :]
        d = p[:, None, :] - q
        R = np.sqrt(np.einsum("nsj,nsj->ns", d, d))
        f = (1.0 + 1j * k * R) * np.exp(-1j * k * R) / (4.0 * np.pi * R**3)
        L = np.einsum("ns,nsj->nj", f * _EDGE_W[None, :] * length[:, None], d)
        out += L[:, :, None] * m[:, None, :]
    return out


def triangle_integrals(points, triangles, normals, k):
    """Exact-charge integrals of the dyadic kernel over source triangles.

    For each row returns the 3x3 tensor ``T`` such that
    ``int_T (I + grad grad / k^2) g(p, q) J dA_q = T J`` for a constant current
    ``J`` tangential to the triangle: a 36-point rule for the smooth part plus
    the line-charge form of the hypersingular part. Observation points must lie
    off the source triangle.
    """
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    tri = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    n = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    q = tri[:, None, 0] + _TRI_A[None, :, None] * e1[:, None] + _TRI_B[None, :, None] * e2[:, None]
    R = np.linalg.norm(p[:, None, :] - q, axis=2)
    gint = 2.0 * area * np.sum(_TRI_W * np.exp(-1j * k * R) / (4.0 * np.pi * R), axis=1)
    proj = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
    return gint[:, None, None] * proj + _edge_charge_tensor(p, tri, n, k) / (k * k)


def self_integrals(triangles, normals, k):
    """As :func:`triangle_integrals` with the observation point at each centroid.

    The weakly singular part is integrated in polar coordinates about the
    centroid, which removes the 1/R singularity exactly.
    """
    tri = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    n = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    p = tri.mean(axis=1)
    gint = np.zeros(len(tri), dtype=np.complex128)
    for e in range(3):
        a, b = tri[:, e], tri[:, (e + 1) % 3]
        ab = b - a
        h = np.linalg.norm(np.cross(a - p, ab), axis=1)
        q = a[:, None, :] + _EDGE_S[None, :, None] * ab[:, None, :]
        R = np.linalg.norm(q - p[:, None, :], axis=2)
        dphi = h[:, None] / R**2
        gint += np.sum(_EDGE_W * dphi * (1.0 - np.exp(-1j * k * R)) / (1j * k), axis=1) / (4.0 * np.pi)
    proj = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
    return gint[:, None, None] * proj + _edge_charge_tensor(p, tri, n, k) / (k * k)


def masked_logits(a, b, w, mask, slope, leaky, weighted, row0, out):
    rows = out.shape[0]
    e = a[row0 : row0 + rows, None] + b[None, :]
    if leaky:
        e = np.where(e < 0, e * slope, e)
    if weighted:
        e = e * w[row0 : row0 + rows]
    m = mask[row0 : row0 + rows].astype(bool)
    e = np.where(m, e, -np.inf)
    out[...] = e - e.max(axis=1, keepdims=True)


def shift_rows(e):
    e -= e.max(axis=1, keepdims=True)


def masked_logits_shifted(a, b, w, mask, slope, leaky, weighted, row0, shift, out):
    rows = out.shape[0]
    e = a[row0 : row0 + rows, None] + b[None, :]
    if leaky:
        e = np.where(e < 0, e * slope, e)
    if weighted:
        e = e * w[row0 : row0 + rows]
    m = mask[row0 : row0 + rows].astype(bool)
    out[...] = np.where(m, e - shift[row0 : row0 + rows, None], -np.inf)
