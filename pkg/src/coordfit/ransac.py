"""RANSAC affine estimation and residual extraction for the nonlinear fits."""
from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import partial_shuffle
from .basis import FitReport, affine_lstsq
from .errors import DegenerateGeometry, EmptyMask, NoConsensus
from .grid import DisplacementField, Mask, masked_indices, unravel, world_coords

__all__ = ["RansacParams", "fit_affine_ransac", "residual_after_affine", "seeded_rng",
           "draw_without_replacement"]

MAX_REFITS = 10


@dataclass(frozen=True)
class RansacParams:
    n_candidate_voxels: int = 50_000
    max_iterations: int = 100
    sample_size: int = 500
    min_inlier_fraction: float = 0.20
    inlier_threshold_mm: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 4:
            raise ValueError("sample_size must be at least 4")
        if not 0.0 < self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must lie in (0, 1]")
        if self.inlier_threshold_mm <= 0:
            raise ValueError("inlier_threshold_mm must be positive")
        if self.n_candidate_voxels < self.sample_size or self.max_iterations < 1:
            raise ValueError("need n_candidate_voxels >= sample_size and max_iterations >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        return asdict(self)


def seeded_rng(seed, *key):
    """Generator for stream ``key`` under ``seed``; independent of call order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def draw_without_replacement(n, k, rng):
    """``min(k, n)`` distinct indices of ``range(n)`` by partial Fisher-Yates."""
    k = min(k, n)
    return partial_shuffle(n, k, rng.random(k))


def fit_affine_ransac(pred, mask, params=None):
    """Robust affine fit by random sample consensus.

    Candidates are drawn once from the mask; each iteration fits a
    least-squares affine to ``sample_size`` of them and counts candidates
    within ``inlier_threshold_mm``.  The best hypothesis reaching
    ``min_inlier_fraction`` is refitted on its inliers, and the refit is
    repeated on the inliers of the previous refit until the set is stable.

    Returns
    -------
    AffineTransform
        Final consensus refit.
    Mask
        Masked voxels within the threshold under the final transform.
    FitReport
        Residuals at those inliers; ``inlier_fraction`` is relative to the mask.
    """
    params = params or RansacParams()
    pred.grid.check_same(mask.grid)
    grid = mask.grid
    masked = masked_indices(mask)
    if len(masked) == 0:
        raise EmptyMask("mask has no true voxels")
    if len(masked) < params.sample_size:
        raise ValueError(f"mask has {len(masked)} voxels, fewer than sample_size "
                         f"{params.sample_size}")

    picks = draw_without_replacement(len(masked), params.n_candidate_voxels,
                                     seeded_rng(params.seed, 0))
    cand = masked[picks]
    ijk = unravel(cand, grid.dims)
    x = grid.to_world(ijk)
    d = pred.coords[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    n_cand = len(cand)
    need = params.min_inlier_fraction * n_cand
    thr = params.inlier_threshold_mm

    best_count, best_inliers, best_iter = -1, None, -1
    n_degenerate = 0
    for it in range(params.max_iterations):
        sample = draw_without_replacement(n_cand, params.sample_size,
                                          seeded_rng(params.seed, 1, it))
        try:
            t, _ = affine_lstsq(x[sample], d[sample])
        except DegenerateGeometry:
            n_degenerate += 1
            continue
        inl = np.linalg.norm(t(x) - d, axis=1) < thr
        count = int(inl.sum())
        if count >= need and count > best_count:
            best_count, best_inliers, best_iter = count, inl, it

    if best_inliers is None:
        if n_degenerate == params.max_iterations:
            raise DegenerateGeometry("every RANSAC sample was geometrically degenerate")
        raise NoConsensus(f"no hypothesis reached {params.min_inlier_fraction:.0%} inliers "
                          f"among {n_cand} candidates")

    # the hypothesis comes from a small sample, so its inlier set is truncated
    # around a slightly wrong transform; refit until the set stops changing
    inl = best_inliers
    for n_refits in range(1, MAX_REFITS + 1):
        final, cond = affine_lstsq(x[inl], d[inl])
        new = np.linalg.norm(final(x) - d, axis=1) < thr
        if np.array_equal(new, inl) or new.sum() < params.sample_size:
            break
        inl = new

    all_ijk = unravel(masked, grid.dims)
    res = (pred.coords[all_ijk[:, 0], all_ijk[:, 1], all_ijk[:, 2]]
           - final(grid.to_world(all_ijk)))
    keep = np.linalg.norm(res, axis=1) < thr
    flags = np.zeros(grid.n_voxels, dtype=bool)
    flags[masked[keep]] = True
    inliers = Mask(grid, flags.reshape(grid.dims, order="F"))
    report = FitReport.from_residuals(
        res[keep], cond, inlier_fraction=keep.mean(), model="affine-ransac",
        n_candidates=n_cand, best_iteration=best_iter,
        hypothesis_inliers=best_count, degenerate_samples=n_degenerate, refits=n_refits,
        ransac=params.to_dict())
    return final, inliers, report


def residual_after_affine(pred, mask, transform, clip_mm=10.0, mode="exclude"):
    """Target-space residual ``pred(x) - T(x)`` for the nonlinear stage.

    With ``mode="exclude"`` voxels whose residual norm exceeds ``clip_mm``
    are dropped from the returned mask; ``mode="clamp"`` instead shortens
    such vectors to length ``clip_mm``.  The residual is zero outside the
    returned mask.
    """
    if mode not in ("exclude", "clamp"):
        raise ValueError(f"unknown clip mode {mode!r}")
    pred.grid.check_same(mask.grid)
    pts = world_coords(mask.grid).coords
    r = pred.coords - transform(pts)
    r = np.where(mask.flags[..., None], r, 0.0)
    norm = np.linalg.norm(r, axis=-1)
    if mode == "exclude":
        keep = mask.flags & (norm <= clip_mm)
    else:
        keep = mask.flags.copy()
        scale = np.where(norm > clip_mm, clip_mm / np.maximum(norm, 1e-300), 1.0)
        r = r * scale[..., None]
    r = np.where(keep[..., None], r, 0.0)
    return DisplacementField(mask.grid, r), Mask(mask.grid, keep)
