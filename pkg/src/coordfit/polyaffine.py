"""Log-polyaffine model: local affines fused in the Lie algebra into one SVF.

Pipeline: fixed-width cubic supervoxels -> per-cell least-squares affine ->
principal matrix logarithm -> Gaussian-weighted stationary velocity field
-> scaling-and-squaring integration.  The inverse map integrates the
negated velocity.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._kernels import trilinear
from .basis import AffineTransform, FitReport, affine_lstsq
from .errors import DegenerateGeometry, LogUndefined, NoValidSupervoxels
from .grid import DisplacementField, masked_indices, unravel, world_coords

__all__ = [
    "SupervoxelAffine",
    "SvfField",
    "PolyaffineParams",
    "matrix_log_affine",
    "matrix_exp_affine",
    "fit_supervoxel_affines",
    "supervoxel_weights",
    "build_svf",
    "auto_steps",
    "integrate_svf",
    "invert_svf",
    "fit_polyaffine",
]

log = logging.getLogger(__name__)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
# map Gauss-Legendre rule from [-1, 1] to [0, 1]
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True, eq=False)
class SupervoxelAffine:
    center: np.ndarray
    log_linear: np.ndarray
    log_translation: np.ndarray
    n_voxels: int
    condition: float = 1.0

    def velocity(self, points):
        return np.asarray(points) @ self.log_linear.T + self.log_translation


@dataclass(frozen=True, eq=False)
class SvfField:
    grid: object
    velocity: np.ndarray
    n_steps: int

    def __post_init__(self):
        v = np.array(self.velocity, dtype=np.float64).reshape(self.grid.dims + (3,))
        if not np.all(np.isfinite(v)):
            raise ValueError("velocity field contains non-finite values")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be at least 1")
        v.setflags(write=False)
        object.__setattr__(self, "velocity", v)
        object.__setattr__(self, "n_steps", int(self.n_steps))

    def negated(self):
        return SvfField(self.grid, -self.velocity, self.n_steps)


@dataclass(frozen=True)
class PolyaffineParams:
    width_mm: float
    min_voxels: int = 100
    weight_sigma_mm: float = None
    n_steps: int = None

    def __post_init__(self):
        if not self.width_mm > 0:
            raise ValueError("supervoxel width must be positive")
        if self.min_voxels < 4:
            raise ValueError("min_voxels must be at least 4")
        if self.weight_sigma_mm is not None and not self.weight_sigma_mm > 0:
            raise ValueError("weight sigma must be positive")
        if self.n_steps is not None and self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def sigma_mm(self):
        return self.width_mm / 2.0 if self.weight_sigma_mm is None else self.weight_sigma_mm


# --------------------------------------------------------------------------
# matrix logarithm / exponential

def _sqrtm_denman_beavers(m, tol=1e-12, max_iter=50):
    y = m.copy()
    z = np.eye(len(m))
    for _ in range(max_iter):
        y_next = 0.5 * (y + np.linalg.inv(z))
        z = 0.5 * (z + np.linalg.inv(y))
        delta = np.linalg.norm(y_next - y, "fro")
        y = y_next
        if delta <= tol * np.linalg.norm(y, "fro"):
            return y
    raise LogUndefined("square-root iteration did not converge")


def _log_near_identity(m):
    # diagonal Pade approximant of log(I + X) via 8-point Gauss-Legendre
    x = m - np.eye(len(m))
    out = np.zeros_like(x)
    for node, weight in zip(_GL_NODES, _GL_WEIGHTS):
        out += weight * np.linalg.solve(np.eye(len(m)) + node * x, x)
    return out


def logm_principal(m, max_roots=64):
    """Principal logarithm by inverse scaling and squaring."""
    m = np.asarray(m, dtype=np.float64)
    eye = np.eye(len(m))
    k = 0
    while np.linalg.norm(m - eye, "fro") >= 0.25:
        if k == max_roots:
            raise LogUndefined("matrix did not approach identity under square roots")
        m = _sqrtm_denman_beavers(m)
        k += 1
    return _log_near_identity(m) * 2.0 ** k


def _check_log_defined(linear):
    det = np.linalg.det(linear)
    eig = np.linalg.eigvals(linear)
    for lam in eig:
        if abs(lam.imag) <= 1e-12 * max(abs(lam), 1.0) and lam.real <= 0.0:
            raise LogUndefined(f"eigenvalue {lam.real:.6g} on the closed negative real axis "
                               f"(det {det:.6g})", eigenvalue=complex(lam))
    if det <= 0.0:
        raise LogUndefined(f"non-positive determinant {det:.6g}", eigenvalue=None)


def matrix_log_affine(t):
    """Principal log of a homogeneous affine as ``(L, v)``.

    ``expm([[L, v], [0, 0]])`` reproduces ``t``.  Raises
    :class:`LogUndefined` when the linear part has a real non-positive
    eigenvalue (which includes every reflection).
    """
    _check_log_defined(t.linear)
    lg = logm_principal(t.matrix)
    return lg[:3, :3].copy(), lg[:3, 3].copy()


def matrix_exp_affine(log_linear, log_translation):
    a = np.zeros((4, 4))
    a[:3, :3] = log_linear
    a[:3, 3] = log_translation
    return AffineTransform.from_matrix(scipy.linalg.expm(a))


# --------------------------------------------------------------------------
# supervoxels and SVF assembly

def fit_supervoxel_affines(pred, mask, params):
    """Fit one affine per populated ``width_mm`` cube and take its log.

    Cubes are anchored at the minimum corner of the masked world bounding
    box.  Returns ``(supervoxels, dropped)`` where ``dropped`` counts cells
    rejected for too few voxels, degenerate geometry or an undefined log.
    """
    pred.grid.check_same(mask.grid)
    grid = mask.grid
    idx = masked_indices(mask)
    if len(idx) == 0:
        raise NoValidSupervoxels("mask has no true voxels")
    ijk = unravel(idx, grid.dims)
    pts = grid.to_world(ijk)
    targets = pred.coords[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    anchor = pts.min(axis=0)
    w = float(params.width_mm)
    cell = np.floor((pts - anchor) / w).astype(np.int64)
    cells, inverse, counts = np.unique(cell, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])

    dropped = {"min_voxels": 0, "degenerate": 0, "log_undefined": 0}
    out = []
    for c, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        if counts[c] < params.min_voxels:
            dropped["min_voxels"] += 1
            continue
        sel = order[lo:hi]
        try:
            t, cond = affine_lstsq(pts[sel], targets[sel])
            lin, vec = matrix_log_affine(t)
        except DegenerateGeometry:
            dropped["degenerate"] += 1
            continue
        except LogUndefined:
            dropped["log_undefined"] += 1
            continue
        center = anchor + (cells[c] + 0.5) * w
        out.append(SupervoxelAffine(center, lin, vec, int(counts[c]), float(cond)))
    if not out:
        raise NoValidSupervoxels(f"no supervoxel qualified (dropped: {dropped})")
    if any(dropped.values()):
        log.debug("dropped supervoxels: %s", dropped)
    return out, dropped


def supervoxel_weights(points, centers, sigma_mm):
    """Normalized Gaussian weights ``(N, S)`` of points w.r.t. supervoxel centres."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    raw = np.exp(-d2 / (2.0 * sigma_mm ** 2))
    den = raw.sum(axis=1, keepdims=True)
    lost = np.all(raw < 1e-300, axis=1)
    w = raw / np.where(lost[:, None], 1.0, den)
    if lost.any():
        w[lost] = 0.0
        w[lost, np.argmin(d2[lost], axis=1)] = 1.0
    return w


def auto_steps(velocity, spacing, floor=4, cap=12, tol_mm=0.01):
    """Step count for scaling and squaring.

    The smallest ``n`` in ``[floor, cap]`` such that each scaled velocity
    stays under half a voxel and the first-order start error
    ``max|v| * max|grad v| / 2**(n + 1)`` is at most ``tol_mm``.
    """
    v = np.asarray(velocity, dtype=np.float64)
    if v.size == 0:
        return floor
    vmax = float(np.linalg.norm(v, axis=-1).max())
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    gmax = 0.0
    if vmax > 0:
        sq = np.zeros(v.shape[:3])
        for a in range(3):
            if v.shape[a] > 1:
                sq += np.sum(np.gradient(v, spacing[a], axis=a) ** 2, axis=-1)
        gmax = float(np.sqrt(sq.max()))
    limit = 0.5 * float(spacing.min())
    n = floor
    while n < cap and (vmax / 2.0 ** n >= limit or vmax * gmax / 2.0 ** (n + 1) > tol_mm):
        n += 1
    return n


def build_svf(supervoxels, grid, weight_sigma_mm, n_steps=None):
    """Dense SVF ``sum_s w_s(p) (v_s + L_s p)`` on ``grid``."""
    if not supervoxels:
        raise NoValidSupervoxels("empty supervoxel list")
    pts = world_coords(grid).coords.reshape(-1, 3)
    num = np.zeros_like(pts)
    den = np.zeros(len(pts))
    best_d2 = np.full(len(pts), np.inf)
    nearest = np.zeros(len(pts), dtype=np.intp)
    all_tiny = np.ones(len(pts), dtype=bool)
    inv2s2 = 1.0 / (2.0 * weight_sigma_mm ** 2)
    for s, sv in enumerate(supervoxels):
        d2 = ((pts - sv.center) ** 2).sum(axis=1)
        raw = np.exp(-d2 * inv2s2)
        num += raw[:, None] * sv.velocity(pts)
        den += raw
        all_tiny &= raw < 1e-300
        closer = d2 < best_d2
        best_d2[closer] = d2[closer]
        nearest[closer] = s
    vel = num / np.where(all_tiny, 1.0, den)[:, None]
    if all_tiny.any():
        for s in np.unique(nearest[all_tiny]):
            sel = all_tiny & (nearest == s)
            vel[sel] = supervoxels[s].velocity(pts[sel])
    vel = vel.reshape(grid.dims + (3,))
    if n_steps is None:
        n_steps = auto_steps(vel, grid.spacing)
    return SvfField(grid, vel, n_steps)


# --------------------------------------------------------------------------
# integration

def integrate_svf(svf):
    """Scaling and squaring: ``u <- u + u o (id + u)``, ``n_steps`` times.

    Sampling is trilinear with edge clamping.  Work is done in voxel units,
    which commutes with the linear voxel-to-world map.
    """
    grid = svf.grid
    m3 = grid.voxel_to_world[:3, :3]
    minv = np.linalg.inv(m3)
    u = (svf.velocity.reshape(-1, 3) @ minv.T) / 2.0 ** svf.n_steps
    ijk = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in grid.dims],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    shape = grid.dims + (3,)
    for _ in range(svf.n_steps):
        u = u + trilinear(u.reshape(shape), ijk + u, True, 0.0)
    return DisplacementField(grid, (u @ m3.T).reshape(shape))


def invert_svf(svf):
    """Inverse map: integrate the negated velocity."""
    return integrate_svf(svf.negated())


def fit_polyaffine(pred, mask, params):
    """Full log-polyaffine fit of a coordinate field.

    Returns
    -------
    SvfField
        Fused stationary velocity field.
    DisplacementField
        Its exponential, ``p -> p + u(p)``.
    FitReport
        Residual of the integrated map against ``pred`` on the mask.
    """
    svs, dropped = fit_supervoxel_affines(pred, mask, params)
    svf = build_svf(svs, mask.grid, params.sigma_mm, params.n_steps)
    disp = integrate_svf(svf)
    res = (disp.mapped_points() - pred.coords)[mask.flags]
    report = FitReport.from_residuals(
        res, max(sv.condition for sv in svs), model="polyaffine", width_mm=float(params.width_mm),
        weight_sigma_mm=float(params.sigma_mm), min_voxels=int(params.min_voxels),
        n_supervoxels=len(svs), dropped_supervoxels=dropped, n_steps=svf.n_steps)
    return svf, disp, report
