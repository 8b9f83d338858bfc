# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: impedance assembly and farthest point sampling."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, M_PI

cnp.import_array()


def assemble_impedance(centroids, normals, areas, double k, double complex prefactor, self_coeff):
    cdef const double[:, ::1] c = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[:, ::1] n = np.ascontiguousarray(normals, dtype=np.float64)
    cdef const double[::1] a = np.ascontiguousarray(areas, dtype=np.float64)
    cdef const double complex[::1] sc = np.ascontiguousarray(self_coeff, dtype=np.complex128)
    cdef Py_ssize_t K = c.shape[0]
    Z_arr = np.zeros((3 * K, 3 * K), dtype=np.complex128)
    cdef double complex[:, ::1] Z = Z_arr
    cdef double[:, :, ::1] P = np.empty((K, 3, 3), dtype=np.float64)
    cdef Py_ssize_t m, q, i, j, l
    cdef double dx, dy, dz, R, kR, inv
    cdef double rh[3]
    cdef double complex g, c1, c2, s
    cdef double complex G[3][3]
    cdef double complex T[3][3]
    for m in range(K):
        for i in range(3):
            for j in range(3):
                P[m, i, j] = (1.0 if i == j else 0.0) - n[m, i] * n[m, j]
    for m in range(K):
        for q in range(K):
            if q == m:
                for i in range(3):
                    Z[3 * m + i, 3 * m + i] = sc[m]
                continue
            dx = c[m, 0] - c[q, 0]
            dy = c[m, 1] - c[q, 1]
            dz = c[m, 2] - c[q, 2]
            R = sqrt(dx * dx + dy * dy + dz * dz)
            rh[0] = dx / R
            rh[1] = dy / R
            rh[2] = dz / R
            kR = k * R
            inv = 1.0 / kR
            g = (cos(kR) - 1j * sin(kR)) / (4.0 * M_PI * R)
            c1 = g * (1.0 - 1j * inv - inv * inv)
            c2 = g * (1.0 - 3j * inv - 3.0 * inv * inv)
            for i in range(3):
                for j in range(3):
                    G[i][j] = -c2 * rh[i] * rh[j]
                G[i][i] = G[i][i] + c1
            # T = G P_q
            for i in range(3):
                for j in range(3):
                    s = 0.0
                    for l in range(3):
                        s = s + G[i][l] * P[q, l, j]
                    T[i][j] = s
            # Z_mq = prefactor * A_q * P_m T
            for i in range(3):
                for j in range(3):
                    s = 0.0
                    for l in range(3):
                        s = s + P[m, i, l] * T[l][j]
                    Z[3 * m + i, 3 * q + j] = prefactor * a[q] * s
    return Z_arr


def farthest_point_sampling(points, Py_ssize_t m, Py_ssize_t seed):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    picks_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] picks = picks_arr
    cdef double[::1] mind = np.empty(n, dtype=np.float64)
    cdef char[::1] taken = np.zeros(n, dtype=np.int8)
    cdef Py_ssize_t i, j, best
    cdef double d, dx, dy, dz, bestd
    picks[0] = seed
    taken[seed] = 1
    for j in range(n):
        dx = p[j, 0] - p[seed, 0]
        dy = p[j, 1] - p[seed, 1]
        dz = p[j, 2] - p[seed, 2]
        mind[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, m):
        best = -1
        bestd = -1.0
        for j in range(n):
            if not taken[j] and mind[j] > bestd:
                bestd = mind[j]
                best = j
        picks[i] = best
        taken[best] = 1
        for j in range(n):
            dx = p[j, 0] - p[best, 0]
            dy = p[j, 1] - p[best, 1]
            dz = p[j, 2] - p[best, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
    return picks_arr


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


cdef enum:
    EDGE_POINTS = 16
    TRI_POINTS = 6
    TRI_NODES = 36

_es, _ew = _gauss01(EDGE_POINTS)
_u, _w = _gauss01(TRI_POINTS)
_ta = np.repeat(_u, TRI_POINTS)
_tb = np.tile(_u, TRI_POINTS) * (1.0 - _ta)
_tw = np.repeat(_w, TRI_POINTS) * np.tile(_w, TRI_POINTS) * (1.0 - _ta)
cdef double[::1] ES = _es
cdef double[::1] EW = _ew
cdef double[::1] TA = _ta
cdef double[::1] TB = _tb
cdef double[::1] TW = _tw


cdef void _edge_tensor(const double* p, const double[:, :, ::1] tri, Py_ssize_t r,
                       const double* nrm, double k, double complex* out) noexcept nogil:
    """Accumulate sum_e L_e m_e^T / k^2 into the row-major 3x3 ``out``."""
    cdef Py_ssize_t e, s, i, j
    cdef double a[3]
    cdef double t[3]
    cdef double m[3]
    cdef double cen[3]
    cdef double d[3]
    cdef double length, R, mid, dotm
    cdef double complex f
    cdef double complex L[3]
    for i in range(3):
        cen[i] = (tri[r, 0, i] + tri[r, 1, i] + tri[r, 2, i]) / 3.0
    for e in range(3):
        for i in range(3):
            a[i] = tri[r, e, i]
            t[i] = tri[r, (e + 1) % 3, i] - a[i]
        length = sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2])
        for i in range(3):
            t[i] /= length
        m[0] = t[1] * nrm[2] - t[2] * nrm[1]
        m[1] = t[2] * nrm[0] - t[0] * nrm[2]
        m[2] = t[0] * nrm[1] - t[1] * nrm[0]
        dotm = 0.0
        for i in range(3):
            mid = a[i] + 0.5 * length * t[i]
            dotm += m[i] * (mid - cen[i])
        if dotm < 0:
            for i in range(3):
                m[i] = -m[i]
        L[0] = 0.0
        L[1] = 0.0
        L[2] = 0.0
        for s in range(EDGE_POINTS):
            for i in range(3):
                d[i] = p[i] - (a[i] + ES[s] * length * t[i])
            R = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            f = (1.0 + 1j * k * R) * (cos(k * R) - 1j * sin(k * R)) / (4.0 * M_PI * R * R * R)
            f = f * EW[s] * length
            for i in range(3):
                L[i] = L[i] + f * d[i]
        for i in range(3):
            for j in range(3):
                out[3 * i + j] = out[3 * i + j] + L[i] * m[j] / (k * k)


def triangle_integrals(points, triangles, normals, double k):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, :, ::1] tri = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[:, ::1] n = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t N = p.shape[0]
    out_arr = np.zeros((N, 3, 3), dtype=np.complex128)
    cdef double complex[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, s, i, j
    cdef double e1[3]
    cdef double e2[3]
    cdef double cr[3]
    cdef double area, R, dx, dy, dz
    cdef double complex gint
    cdef double pp[3]
    cdef double nn[3]
    with nogil:
        for r in range(N):
            for i in range(3):
                e1[i] = tri[r, 1, i] - tri[r, 0, i]
                e2[i] = tri[r, 2, i] - tri[r, 0, i]
                pp[i] = p[r, i]
                nn[i] = n[r, i]
            cr[0] = e1[1] * e2[2] - e1[2] * e2[1]
            cr[1] = e1[2] * e2[0] - e1[0] * e2[2]
            cr[2] = e1[0] * e2[1] - e1[1] * e2[0]
            area = 0.5 * sqrt(cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2])
            gint = 0.0
            for s in range(TRI_NODES):
                dx = pp[0] - (tri[r, 0, 0] + TA[s] * e1[0] + TB[s] * e2[0])
                dy = pp[1] - (tri[r, 0, 1] + TA[s] * e1[1] + TB[s] * e2[1])
                dz = pp[2] - (tri[r, 0, 2] + TA[s] * e1[2] + TB[s] * e2[2])
                R = sqrt(dx * dx + dy * dy + dz * dz)
                gint = gint + TW[s] * (cos(k * R) - 1j * sin(k * R)) / (4.0 * M_PI * R)
            gint = gint * 2.0 * area
            for i in range(3):
                for j in range(3):
                    out[r, i, j] = gint * ((1.0 if i == j else 0.0) - nn[i] * nn[j])
            _edge_tensor(pp, tri, r, nn, k, &out[r, 0, 0])
    return out_arr


def self_integrals(triangles, normals, double k):
    cdef const double[:, :, ::1] tri = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[:, ::1] n = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t N = tri.shape[0]
    out_arr = np.zeros((N, 3, 3), dtype=np.complex128)
    cdef double complex[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, s, e, i, j
    cdef double pp[3]
    cdef double nn[3]
    cdef double a[3]
    cdef double ab[3]
    cdef double ap[3]
    cdef double cr[3]
    cdef double q[3]
    cdef double h, R
    cdef double complex gint
    with nogil:
        for r in range(N):
            for i in range(3):
                pp[i] = (tri[r, 0, i] + tri[r, 1, i] + tri[r, 2, i]) / 3.0
                nn[i] = n[r, i]
            gint = 0.0
            for e in range(3):
                for i in range(3):
                    a[i] = tri[r, e, i]
                    ab[i] = tri[r, (e + 1) % 3, i] - a[i]
                    ap[i] = a[i] - pp[i]
                cr[0] = ap[1] * ab[2] - ap[2] * ab[1]
                cr[1] = ap[2] * ab[0] - ap[0] * ab[2]
                cr[2] = ap[0] * ab[1] - ap[1] * ab[0]
                h = sqrt(cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2])
                for s in range(EDGE_POINTS):
                    for i in range(3):
                        q[i] = ap[i] + ES[s] * ab[i]
                    R = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2])
                    gint = gint + EW[s] * (h / (R * R)) * (1.0 - (cos(k * R) - 1j * sin(k * R))) / (1j * k)
            gint = gint / (4.0 * M_PI)
            for i in range(3):
                for j in range(3):
                    out[r, i, j] = gint * ((1.0 if i == j else 0.0) - nn[i] * nn[j])
            _edge_tensor(pp, tri, r, nn, k, &out[r, 0, 0])
    return out_arr


def masked_logits(const double[::1] a, const double[::1] b, const double[:, ::1] w,
                  const unsigned char[:, ::1] mask, double slope, bint leaky, bint weighted,
                  Py_ssize_t row0, double[:, ::1] out):
    """Row block of ``f(a_i + b_j) * w_ij`` shifted by its row maximum over ``mask``.

    Entries outside the mask are set to -inf. ``out`` has shape (rows, n) and
    covers global rows ``row0 .. row0 + rows``.
    """
    cdef Py_ssize_t rows = out.shape[0], n = out.shape[1], r, j, gi
    cdef double v, mx
    cdef double ninf = -np.inf
    with nogil:
        for r in range(rows):
            gi = row0 + r
            mx = ninf
            for j in range(n):
                if mask[gi, j]:
                    v = a[gi] + b[j]
                    if leaky and v < 0:
                        v = v * slope
                    if weighted:
                        v = v * w[gi, j]
                    out[r, j] = v
                    if v > mx:
                        mx = v
                else:
                    out[r, j] = ninf
            for j in range(n):
                out[r, j] = out[r, j] - mx


def shift_rows(double[:, ::1] e):
    """Subtract each row's maximum in place."""
    cdef Py_ssize_t rows = e.shape[0], n = e.shape[1], r, j
    cdef double mx
    with nogil:
        for r in range(rows):
            mx = e[r, 0]
            for j in range(1, n):
                if e[r, j] > mx:
                    mx = e[r, j]
            for j in range(n):
                e[r, j] = e[r, j] - mx


def masked_logits_shifted(const double[::1] a, const double[::1] b, const double[:, ::1] w,
                          const unsigned char[:, ::1] mask, double slope, bint leaky, bint weighted,
                          Py_ssize_t row0, const double[::1] shift, double[:, ::1] out):
    """Like :func:`masked_logits` but subtracts a caller-supplied per-row shift (single pass)."""
    cdef Py_ssize_t rows = out.shape[0], n = out.shape[1], r, j, gi
    cdef double v, sh
    cdef double ninf = -np.inf
    with nogil:
        for r in range(rows):
            gi = row0 + r
            sh = shift[gi]
            for j in range(n):
                if mask[gi, j]:
                    v = a[gi] + b[j]
                    if leaky and v < 0:
                        v = v * slope
                    if weighted:
                        v = v * w[gi, j]
                    out[r, j] = v - sh
                else:
                    out[r, j] = ninf
