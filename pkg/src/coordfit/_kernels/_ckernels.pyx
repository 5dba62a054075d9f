# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


# round-off margin when testing the voxel-centre hull
cdef double HULL_TOL = 1e-9


def trilinear(field, coords, bint clamp=False, double fill=0.0):
    cdef const double[:, :, :, ::1] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef const double[:, ::1] q = np.ascontiguousarray(
        np.asarray(coords, dtype=np.float64).reshape(-1, 3))
    cdef Py_ssize_t n = q.shape[0], nc = f.shape[3]
    cdef Py_ssize_t nx = f.shape[0], ny = f.shape[1], nz = f.shape[2]
    out_arr = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, x0, y0, z0, x1, y1, z1
    cdef double qx, qy, qz, fx, fy, fz, gx, gy, gz
    with nogil:
        for p in range(n):
            qx = q[p, 0]
            qy = q[p, 1]
            qz = q[p, 2]
            if not clamp and (qx < -HULL_TOL or qy < -HULL_TOL or qz < -HULL_TOL
                              or qx > nx - 1 + HULL_TOL or qy > ny - 1 + HULL_TOL
                              or qz > nz - 1 + HULL_TOL):
                for c in range(nc):
                    out[p, c] = fill
                continue
            qx = min(max(qx, 0.0), <double>(nx - 1))
            qy = min(max(qy, 0.0), <double>(ny - 1))
            qz = min(max(qz, 0.0), <double>(nz - 1))
            x0 = min(<Py_ssize_t>floor(qx), max(nx - 2, 0))
            y0 = min(<Py_ssize_t>floor(qy), max(ny - 2, 0))
            z0 = min(<Py_ssize_t>floor(qz), max(nz - 2, 0))
            fx = qx - x0
            fy = qy - y0
            fz = qz - z0
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            x1 = min(x0 + 1, nx - 1)
            y1 = min(y0 + 1, ny - 1)
            z1 = min(z0 + 1, nz - 1)
            for c in range(nc):
                out[p, c] = (
                    gz * (gy * (gx * f[x0, y0, z0, c] + fx * f[x1, y0, z0, c])
                          + fy * (gx * f[x0, y1, z0, c] + fx * f[x1, y1, z0, c]))
                    + fz * (gy * (gx * f[x0, y0, z1, c] + fx * f[x1, y0, z1, c])
                            + fy * (gx * f[x0, y1, z1, c] + fx * f[x1, y1, z1, c])))
    return out_arr


cdef inline void _weights(double t, double* w, double* dw) noexcept nogil:
    cdef double s = 1.0 - t
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    w[0] = s * s * s / 6.0
    w[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[3] = t3 / 6.0
    dw[0] = -0.5 * s * s
    dw[1] = 0.5 * (3.0 * t2 - 4.0 * t)
    dw[2] = 0.5 * (-3.0 * t2 + 2.0 * t + 1.0)
    dw[3] = 0.5 * t2


def bspline_eval(coeffs, lattice_coords, bint with_grad=False):
    cdef const double[:, :, :, ::1] cf = np.ascontiguousarray(coeffs, dtype=np.float64)
    cdef const double[:, ::1] u = np.ascontiguousarray(
        np.asarray(lattice_coords, dtype=np.float64).reshape(-1, 3))
    cdef Py_ssize_t n = u.shape[0]
    values_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[:, ::1] val = values_arr
    grad_arr = np.zeros((n, 3, 3), dtype=np.float64) if with_grad else None
    cdef double[:, :, ::1] grd
    if with_grad:
        grd = grad_arr
    cdef double wx[4]
    cdef double wy[4]
    cdef double wz[4]
    cdef double dx[4]
    cdef double dy[4]
    cdef double dz[4]
    cdef Py_ssize_t p, a, b, e, c, bx, by, bz
    cdef double wyz, cval
    with nogil:
        for p in range(n):
            bx = <Py_ssize_t>floor(u[p, 0])
            by = <Py_ssize_t>floor(u[p, 1])
            bz = <Py_ssize_t>floor(u[p, 2])
            _weights(u[p, 0] - bx, wx, dx)
            _weights(u[p, 1] - by, wy, dy)
            _weights(u[p, 2] - bz, wz, dz)
            for a in range(4):
                for b in range(4):
                    for e in range(4):
                        wyz = wy[b] * wz[e]
                        for c in range(3):
                            cval = cf[bx - 1 + a, by - 1 + b, bz - 1 + e, c]
                            val[p, c] += wx[a] * wyz * cval
                            if with_grad:
                                grd[p, c, 0] += dx[a] * wyz * cval
                                grd[p, c, 1] += wx[a] * dy[b] * wz[e] * cval
                                grd[p, c, 2] += wx[a] * wy[b] * dz[e] * cval
    return values_arr, grad_arr


def partial_shuffle(Py_ssize_t n, Py_ssize_t k, uniforms):
    cdef const double[::1] uv = np.ascontiguousarray(uniforms, dtype=np.float64)
    perm_arr = np.arange(n, dtype=np.int64)
    cdef cnp.int64_t[::1] perm = perm_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t tmp
    with nogil:
        for i in range(k):
            j = min(i + <Py_ssize_t>(uv[i] * (n - i)), n - 1)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
    return perm_arr[:k].copy()
