"""Pure NumPy implementations of the hot kernels.

Each function mirrors the signature of its counterpart in ``_ckernels.pyx``
and must produce the same numbers up to floating-point reassociation.
"""
import numpy as np

# round-off margin when testing the voxel-centre hull
HULL_TOL = 1e-9


def trilinear(field, coords, clamp=False, fill=0.0):
    """Sample a (nx, ny, nz, C) array at fractional voxel coordinates.

    Returns an (N, C) array.  Outside points get ``fill`` unless ``clamp``
    is set, in which case coordinates are clamped to the grid edge.
    """
    field = np.asarray(field, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    shape = np.array(field.shape[:3])
    upper = shape - 1
    q = np.clip(coords, 0.0, upper)
    i0 = np.minimum(np.floor(q).astype(np.intp), np.maximum(upper - 1, 0))
    f = q - i0
    i1 = np.minimum(i0 + 1, upper)

    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    fx, fy, fz = (f[:, a, None] for a in range(3))
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        gz * (gy * (gx * field[x0, y0, z0] + fx * field[x1, y0, z0])
              + fy * (gx * field[x0, y1, z0] + fx * field[x1, y1, z0]))
        + fz * (gy * (gx * field[x0, y0, z1] + fx * field[x1, y0, z1])
                + fy * (gx * field[x0, y1, z1] + fx * field[x1, y1, z1]))
    )
    if not clamp:
        inside = np.all((coords >= -HULL_TOL) & (coords <= upper + HULL_TOL), axis=1)
        out[~inside] = fill
    return out


def _cubic_weights(t):
    s = 1.0 - t
    t2 = t * t
    t3 = t2 * t
    w = np.stack([s * s * s / 6.0,
                  (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
                  (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
                  t3 / 6.0], axis=-1)
    dw = np.stack([-0.5 * s * s,
                   0.5 * (3.0 * t2 - 4.0 * t),
                   0.5 * (-3.0 * t2 + 2.0 * t + 1.0),
                   0.5 * t2], axis=-1)
    return w, dw


def bspline_eval(coeffs, lattice_coords, with_grad=False, chunk=32768):
    """Evaluate a cubic tensor-product B-spline with 3-vector coefficients.

    ``lattice_coords`` are positions in control-point units; the caller
    guarantees full support.  Returns values (N, 3) and, when requested,
    derivatives (N, 3, 3) with ``grad[n, c, j] = d value_c / d u_j``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    u = np.asarray(lattice_coords, dtype=np.float64).reshape(-1, 3)
    n = len(u)
    values = np.empty((n, 3))
    grad = np.empty((n, 3, 3)) if with_grad else None
    offs = np.arange(4) - 1
    for lo in range(0, n, chunk):
        uc = u[lo:lo + chunk]
        base = np.floor(uc).astype(np.intp)
        w, dw = _cubic_weights(uc - base)
        ix = base[:, 0, None] + offs
        iy = base[:, 1, None] + offs
        iz = base[:, 2, None] + offs
        # (m, 4, 4, 4, 3) gather
        c = coeffs[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]
        values[lo:lo + chunk] = np.einsum("ma,mb,mc,mabcd->md", w[:, 0], w[:, 1], w[:, 2], c)
        if with_grad:
            g = grad[lo:lo + chunk]
            g[:, :, 0] = np.einsum("ma,mb,mc,mabcd->md", dw[:, 0], w[:, 1], w[:, 2], c)
            g[:, :, 1] = np.einsum("ma,mb,mc,mabcd->md", w[:, 0], dw[:, 1], w[:, 2], c)
            g[:, :, 2] = np.einsum("ma,mb,mc,mabcd->md", w[:, 0], w[:, 1], dw[:, 2], c)
    return values, grad


def partial_shuffle(n, k, uniforms):
    """First ``k`` entries of a Fisher-Yates shuffle of ``range(n)``.

    ``uniforms`` supplies k draws from [0, 1); swap partner for step i is
    ``i + floor(u_i * (n - i))``.
    """
    perm = np.arange(n, dtype=np.int64)
    for i in range(k):
        j = min(i + int(uniforms[i] * (n - i)), n - 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k].copy()
