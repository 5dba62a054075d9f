"""Closed-form regularized least-squares fits on spatial basis functions.

Two instantiations live here: the affine basis ``[x, y, z, 1]`` (no
regularizer) and cubic tensor-product B-splines with a membrane-energy
penalty built from the analytic basis gradients at the fitted voxels.
"""
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from ._kernels import bspline_eval, cubic_weights
from .errors import DegenerateGeometry, EmptyMask, OutOfSupport, SingularSystem
from .grid import DisplacementField, masked_indices, unravel, world_coords

__all__ = [
    "AffineTransform",
    "BsplineModel",
    "DesignSystem",
    "FitReport",
    "fit_affine",
    "affine_lstsq",
    "bspline_lattice",
    "build_bspline_system",
    "solve_regularized",
    "fit_bspline",
    "evaluate_bspline",
    "regularized_energies",
]

MAX_CONDITION = 1e12
DENSE_SOLVE_LIMIT = 3000


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """``T(x) = linear @ x + translation`` in world millimetres."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(t))):
            raise ValueError("affine entries must be finite")
        if np.linalg.det(lin) == 0.0:
            raise ValueError("affine linear part is singular")
        lin.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def __call__(self, points):
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.translation

    def compose(self, inner):
        """``self o inner``."""
        return AffineTransform(self.linear @ inner.linear,
                               self.linear @ inner.translation + self.translation)

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def displacement(self, grid):
        pts = world_coords(grid).coords
        return DisplacementField(grid, self(pts) - pts)


@dataclass
class FitReport:
    rms_residual_mm: float
    max_residual_mm: float
    n_points: int
    condition_estimate: float
    inlier_fraction: float = 1.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_residuals(cls, residuals, condition_estimate, inlier_fraction=1.0, **extra):
        norms = np.linalg.norm(np.asarray(residuals).reshape(-1, 3), axis=1)
        n = len(norms)
        rms = float(np.sqrt(np.mean(norms ** 2))) if n else 0.0
        mx = float(norms.max()) if n else 0.0
        return cls(rms, mx, n, float(condition_estimate), float(inlier_fraction), dict(extra))

    def to_dict(self):
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


def affine_lstsq(points, targets):
    """Least-squares affine with basis ``[x, y, z, 1]``.

    Returns ``(AffineTransform, condition)`` where ``condition`` is the
    2-norm condition number of the 4x4 normal matrix.  The solve itself is
    done on centred coordinates, which leaves the minimiser unchanged.
    """
    x = np.asarray(points, dtype=np.float64)
    d = np.asarray(targets, dtype=np.float64)
    phi = np.hstack([x, np.ones((len(x), 1))])
    normal = phi.T @ phi
    cond = np.linalg.cond(normal) if len(x) >= 4 else np.inf
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateGeometry(
            f"affine normal matrix is singular (condition {cond:.3g}, {len(x)} points)")
    xm = x.mean(axis=0)
    dm = d.mean(axis=0)
    xc = x - xm
    cov = xc.T @ xc
    # rows of lin_t are (L^T), solve cov @ L^T = xc^T (d - dm)
    lin_t = scipy.linalg.solve(cov, xc.T @ (d - dm), assume_a="pos")
    lin = lin_t.T
    try:
        return AffineTransform(lin, dm - lin @ xm), cond
    except ValueError as exc:
        raise DegenerateGeometry(f"fitted affine is singular: {exc}") from None


def _masked_points(field_array, mask):
    idx = masked_indices(mask)
    if len(idx) == 0:
        raise EmptyMask("mask has no true voxels")
    ijk = unravel(idx, mask.grid.dims)
    pts = mask.grid.to_world(ijk)
    vals = field_array[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    return pts, vals


def fit_affine(pred, mask):
    """Fit ``T`` minimising ``sum |pred(x) - T(x)|^2`` over the mask.

    Parameters
    ----------
    pred : CoordField
        Predicted target coordinates (mm).
    mask : Mask
        Voxels used in the fit; needs at least four non-coplanar points.

    Returns
    -------
    AffineTransform, FitReport
    """
    pred.grid.check_same(mask.grid)
    pts, targets = _masked_points(pred.coords, mask)
    t, cond = affine_lstsq(pts, targets)
    report = FitReport.from_residuals(targets - t(pts), cond, model="affine")
    return t, report


# --------------------------------------------------------------------------
# cubic B-splines

@dataclass(frozen=True, eq=False)
class BsplineModel:
    """Cubic B-spline displacement on a world-axis-aligned control lattice.

    Control point ``(a, b, c)`` sits at ``origin + (a, b, c) * spacing``.
    """

    spacing: np.ndarray
    origin: np.ndarray
    coeffs: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        s = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        if np.any(s <= 0):
            raise ValueError("control spacing must be positive")
        c = np.array(self.coeffs, dtype=np.float64)
        if c.ndim != 4 or c.shape[3] != 3 or min(c.shape[:3]) < 4:
            raise ValueError(f"coeffs must have shape (Kx, Ky, Kz, 3) with K >= 4, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coeffs must be finite")
        object.__setattr__(self, "spacing", s)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "coeffs", c)

    @property
    def ctrl_dims(self):
        return self.coeffs.shape[:3]

    def lattice_coords(self, points, check=True):
        u = _to_lattice(points, self.origin, self.spacing)
        if check:
            base = np.floor(u)
            if np.any(base < 1) or np.any(base > np.array(self.ctrl_dims) - 3):
                raise OutOfSupport("points fall outside the control lattice support")
        return u

    def evaluate_points(self, points, with_grad=False):
        """Displacement (and world-mm Jacobian ``d u_c / d x_j``) at points."""
        pts = np.asarray(points, dtype=np.float64)
        lead = pts.shape[:-1]
        u = self.lattice_coords(pts.reshape(-1, 3))
        vals, grad = bspline_eval(self.coeffs, u, with_grad)
        vals = vals.reshape(lead + (3,))
        if not with_grad:
            return vals
        return vals, (grad / self.spacing).reshape(lead + (3, 3))

    def displacement(self, grid):
        return evaluate_bspline(self, grid)


def _to_lattice(points, origin, spacing):
    u = (np.asarray(points, dtype=np.float64) - origin) / spacing
    # snap round-off at cell boundaries so support checks are reproducible
    r = np.round(u)
    return np.where(np.abs(u - r) < 1e-9, r, u)


def bspline_lattice(grid, mask, spacing):
    """Origin and control dims for a fit on ``mask``.

    The lattice phase is fixed by padding the masked world bounding box by
    one spacing; it is then extended by whole spacings until every voxel of
    ``grid`` has full cubic support.
    """
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    if np.any(spacing <= 0):
        raise ValueError("control spacing must be positive")
    idx = masked_indices(mask)
    if len(idx) == 0:
        raise EmptyMask("mask has no true voxels")
    pts = grid.to_world(unravel(idx, grid.dims))
    origin = pts.min(axis=0) - spacing
    gmin, gmax = grid.world_bounds()
    lo = np.minimum(pts.min(axis=0), gmin)
    hi = np.maximum(pts.max(axis=0), gmax)
    # lowest lattice cell index needed must be >= 1
    shift = np.maximum(0, 1 - np.floor(_to_lattice(lo, origin, spacing))).astype(int)
    origin = origin - shift * spacing
    top = np.floor(_to_lattice(hi, origin, spacing)).astype(int)
    ctrl_dims = tuple(int(k) for k in np.maximum(top + 3, 4))
    return origin, ctrl_dims


def _basis_rows(u, ctrl_dims, spacing):
    """Sparse-row description of the 64 basis functions touching each point.

    Returns column indices (N, 64), weights (N, 64) and world-mm gradients
    (N, 64, 3).  Columns are flat x-fastest control indices.
    """
    base = np.floor(u).astype(np.int64)
    w, dw = cubic_weights(u - base)
    dw = dw / spacing[None, :, None]
    offs = np.arange(4) - 1
    kx, ky, kz = ctrl_dims
    ix = base[:, 0, None] + offs
    iy = base[:, 1, None] + offs
    iz = base[:, 2, None] + offs
    cols = (ix[:, :, None, None]
            + kx * (iy[:, None, :, None] + ky * iz[:, None, None, :])).reshape(len(u), 64)
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    dx, dy, dz = dw[:, 0], dw[:, 1], dw[:, 2]

    def tp(a, b, c):
        return (a[:, :, None, None] * b[:, None, :, None] * c[:, None, None, :]).reshape(len(u), 64)

    weights = tp(wx, wy, wz)
    grads = np.stack([tp(dx, wy, wz), tp(wx, dy, wz), tp(wx, wy, dz)], axis=-1)
    return cols, weights, grads


@dataclass(eq=False)
class DesignSystem:
    """Normal-equation pieces of a basis fit.

    ``gram = phi^T phi``, ``reg = Gx^T Gx + Gy^T Gy + Gz^T Gz`` and
    ``rhs = phi^T d`` with one column per output coordinate.  The design
    matrices themselves are kept for residual and energy evaluation.
    """

    gram: sp.csr_matrix
    reg: sp.csr_matrix
    rhs: np.ndarray
    n_rows: int
    phi: sp.csr_matrix
    grads: tuple
    targets: np.ndarray
    active: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    ctrl_dims: tuple

    @property
    def n_basis(self):
        return self.gram.shape[0]


def build_bspline_system(residual, mask, spacing):
    """Assemble the B-spline design system over the masked voxels of ``residual``."""
    residual.grid.check_same(mask.grid)
    grid = mask.grid
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    origin, ctrl_dims = bspline_lattice(grid, mask, spacing)
    pts, targets = _masked_points(residual.disp, mask)
    n = len(pts)
    nb = ctrl_dims[0] * ctrl_dims[1] * ctrl_dims[2]
    u = _to_lattice(pts, origin, spacing)
    cols, weights, grads = _basis_rows(u, ctrl_dims, spacing)
    rows = np.repeat(np.arange(n), 64)
    c = cols.ravel()

    def design(data):
        return sp.csr_matrix((data.ravel(), (rows, c)), shape=(n, nb))

    phi = design(weights)
    gs = tuple(design(grads[:, :, a]) for a in range(3))
    gram = (phi.T @ phi).tocsr()
    reg = (gs[0].T @ gs[0] + gs[1].T @ gs[1] + gs[2].T @ gs[2]).tocsr()
    rhs = np.asarray(phi.T @ targets)
    active = np.asarray(gram.diagonal() > 0.0)
    return DesignSystem(gram, reg, rhs, n, phi, gs, targets, active,
                        spacing, origin, tuple(ctrl_dims))


def _solve_spd(a, rhs):
    """Cholesky solve with diagonal jitter escalation.

    Returns ``(x, condition_estimate)``; the estimate is the squared ratio
    of extreme Cholesky pivots (dense path) or of diagonal entries.
    """
    nb = a.shape[0]
    scale = float(a.diagonal().sum()) / nb if nb else 0.0
    jitters = [0.0] + [10.0 ** e * scale for e in range(-10, -3)]
    dense = nb <= DENSE_SOLVE_LIMIT
    if dense:
        a = a.toarray() if sp.issparse(a) else np.asarray(a)
    for jit in jitters:
        try:
            if dense:
                factor = scipy.linalg.cho_factor(a + jit * np.eye(nb), lower=True,
                                                 check_finite=False)
                x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
                piv = np.abs(np.diag(factor[0]))
                cond = (piv.max() / piv.min()) ** 2
            else:
                aj = (a + jit * sp.identity(nb, format="csr")).tocsc()
                lu = scipy.sparse.linalg.splu(aj, permc_spec="MMD_AT_PLUS_A",
                                              diag_pivot_thresh=0.0,
                                              options={"SymmetricMode": True})
                udiag = lu.U.diagonal()
                if np.any(udiag <= 0):
                    raise np.linalg.LinAlgError("non-positive pivot")
                x = lu.solve(np.asarray(rhs))
                diag = aj.diagonal()
                cond = diag.max() / diag.min()
        except (np.linalg.LinAlgError, RuntimeError):
            continue
        if np.all(np.isfinite(x)):
            return x, float(cond)
    raise SingularSystem(f"Cholesky failed on a {nb}x{nb} system even with jitter "
                         f"{jitters[-1]:.3g}")


def _solve_active(sys, lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    act = np.flatnonzero(sys.active)
    coeffs = np.zeros((sys.n_basis, 3))
    if len(act) == 0:
        raise SingularSystem("no basis function touches the mask")
    a = sys.gram[act][:, act]
    if lam > 0:
        a = a + lam * sys.reg[act][:, act]
    x, cond = _solve_spd(a, sys.rhs[act])
    coeffs[act] = x
    return coeffs, cond


def solve_regularized(sys, lam):
    """Coefficients ``[gram + lam * reg]^-1 rhs`` (B x 3).

    Columns whose support holds no fitted voxel are pinned to zero.
    """
    return _solve_active(sys, lam)[0]


def regularized_energies(sys, coeffs):
    """``(E_coord, E_reg)`` of a coefficient matrix, summed over components."""
    r = sys.targets - sys.phi @ coeffs
    e_coord = float(np.sum(r * r))
    e_reg = float(sum(np.sum((g @ coeffs) ** 2) for g in sys.grads))
    return e_coord, e_reg


def fit_bspline(residual, mask, spacing, lam=0.0):
    """Regularized B-spline fit of a displacement field on masked voxels.

    Returns
    -------
    BsplineModel, FitReport
    """
    sys = build_bspline_system(residual, mask, spacing)
    coeffs, cond = _solve_active(sys, lam)
    model = BsplineModel(sys.spacing, sys.origin,
                         coeffs.reshape(sys.ctrl_dims + (3,), order="F"), lam)
    fitted = np.asarray(sys.phi @ coeffs)
    report = FitReport.from_residuals(sys.targets - fitted, cond, model="bspline",
                                      control_spacing_mm=sys.spacing.tolist(),
                                      ctrl_dims=list(sys.ctrl_dims), lam=float(lam),
                                      n_active_basis=int(sys.active.sum()))
    return model, report


def evaluate_bspline(model, grid):
    """Dense evaluation of a B-spline model at every voxel of ``grid``."""
    pts = world_coords(grid).coords
    return DisplacementField(grid, model.evaluate_points(pts))
