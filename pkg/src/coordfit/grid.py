"""Volume containers, lattice geometry and interpolation.

All volumes store their samples as arrays indexed ``[i, j, k]`` with shape
``(nx, ny, nz)`` (plus a trailing component axis for vector fields).  The
canonical *linear* order, used for files and for any flattened list of
voxels, is x-fastest (Fortran order).
"""
from dataclasses import dataclass

import numpy as np

from ._kernels import trilinear
from .errors import GridMismatch

__all__ = [
    "Grid",
    "ScalarVolume",
    "Mask",
    "LabelVolume",
    "CoordField",
    "DisplacementField",
    "world_coords",
    "masked_indices",
    "sample_trilinear",
    "sample_nearest",
    "sample_field",
    "resolve_transform",
]


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice with a homogeneous voxel-to-world (mm) matrix.

    Parameters
    ----------
    dims : tuple of int
        ``(nx, ny, nz)``, each at least 1.
    voxel_to_world : (4, 4) array_like
        Maps integer voxel indices ``(i, j, k, 1)`` to world millimetres.
        Column norms of the upper-left block are the voxel spacing.
    """

    dims: tuple
    voxel_to_world: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        m = np.array(self.voxel_to_world, dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise ValueError("voxel_to_world must be a finite 4x4 matrix")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("voxel_to_world last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("voxel_to_world linear block is singular")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_to_world", _frozen(m))

    @classmethod
    def regular(cls, dims, spacing=(1.0, 1.0, 1.0), origin=None):
        """Axis-aligned grid; ``origin=None`` centres the lattice on world (0, 0, 0)."""
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        if np.any(spacing <= 0):
            raise ValueError("spacing must be positive")
        dims = tuple(int(d) for d in dims)
        if origin is None:
            origin = -0.5 * (np.asarray(dims) - 1) * spacing
        m = np.eye(4)
        m[:3, :3] = np.diag(spacing)
        m[:3, 3] = origin
        return cls(dims, m)

    @property
    def spacing(self):
        return np.linalg.norm(self.voxel_to_world[:3, :3], axis=0)

    @property
    def shape(self):
        return self.dims

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def world_to_voxel(self):
        return np.linalg.inv(self.voxel_to_world)

    def to_world(self, ijk):
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ self.voxel_to_world[:3, :3].T + self.voxel_to_world[:3, 3]

    def to_voxel(self, points):
        points = np.asarray(points, dtype=np.float64)
        inv = self.world_to_voxel
        return points @ inv[:3, :3].T + inv[:3, 3]

    def world_bounds(self):
        """Axis-aligned world bounding box of the voxel centres."""
        corners = np.array(np.meshgrid(*[[0, d - 1] for d in self.dims], indexing="ij"))
        pts = self.to_world(corners.reshape(3, -1).T)
        return pts.min(axis=0), pts.max(axis=0)

    def same_as(self, other, rtol=1e-9):
        return (self.dims == other.dims
                and np.allclose(self.voxel_to_world, other.voxel_to_world,
                                rtol=rtol, atol=rtol))

    def check_same(self, other):
        if not self.same_as(other):
            raise GridMismatch(f"grids differ: {self.dims} vs {other.dims}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(self.grid.dims)
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True, eq=False)
class Mask:
    grid: Grid
    flags: np.ndarray

    def __post_init__(self):
        f = np.array(self.flags, dtype=bool).reshape(self.grid.dims)
        object.__setattr__(self, "flags", _frozen(f))

    @classmethod
    def full(cls, grid):
        return cls(grid, np.ones(grid.dims, dtype=bool))

    @property
    def count(self):
        return int(self.flags.sum())


@dataclass(frozen=True, eq=False)
class LabelVolume:
    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels)
        lab = np.array(raw, dtype=np.int32).reshape(self.grid.dims)
        if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
            raise ValueError("labels must lie in [0, 65535]")
        object.__setattr__(self, "labels", _frozen(lab))


def _vector_array(grid, values):
    v = np.array(values, dtype=np.float64).reshape(grid.dims + (3,))
    return _frozen(v)


@dataclass(frozen=True, eq=False)
class CoordField:
    """Per-voxel predicted target-space coordinates in mm."""

    grid: Grid
    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", _vector_array(self.grid, self.coords))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense map ``p -> p + disp(p)`` sampled on a grid."""

    grid: Grid
    disp: np.ndarray

    def __post_init__(self):
        d = _vector_array(self.grid, self.disp)
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "disp", d)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.dims + (3,)))

    def displacement(self, grid):
        self.grid.check_same(grid)
        return self

    def mapped_points(self):
        return world_coords(self.grid).coords + self.disp


def world_coords(grid):
    """World position of every voxel centre as a :class:`CoordField`."""
    ijk = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in grid.dims],
                               indexing="ij"), axis=-1)
    return CoordField(grid, grid.to_world(ijk))


def masked_indices(mask):
    """Flat x-fastest indices of the true voxels, in ascending order."""
    return np.flatnonzero(mask.flags.ravel(order="F"))


def unravel(flat, dims):
    return np.stack(np.unravel_index(flat, dims, order="F"), axis=-1)


def sample_field(array, grid, points, clamp=False, fill=0.0):
    """Trilinearly sample an ``(nx, ny, nz[, C])`` array at world points."""
    array = np.asarray(array, dtype=np.float64)
    scalar = array.ndim == 3
    if scalar:
        array = array[..., None]
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    out = trilinear(array, grid.to_voxel(pts.reshape(-1, 3)), clamp, fill)
    out = out.reshape(lead + (array.shape[-1],))
    return out[..., 0] if scalar else out


def sample_trilinear(vol, points, fill=0.0):
    """Trilinear interpolation of a scalar volume at world points (mm).

    Points outside the voxel-centre hull return ``fill``.
    """
    return sample_field(vol.values, vol.grid, points, clamp=False, fill=fill)


def sample_nearest(vol, points):
    """Nearest-voxel label lookup; ties round half up, outside gives 0."""
    pts = np.asarray(points, dtype=np.float64)
    q = vol.grid.to_voxel(pts.reshape(-1, 3))
    idx = np.floor(q + 0.5).astype(np.int64)
    dims = np.array(vol.grid.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(q), dtype=vol.labels.dtype)
    i = idx[inside]
    out[inside] = vol.labels[i[:, 0], i[:, 1], i[:, 2]]
    return out.reshape(pts.shape[:-1])


def resolve_transform(t, grid):
    """Dense displacement ``T(world(v)) - world(v)`` of any fitted model."""
    return t.displacement(grid)
