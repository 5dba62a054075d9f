"""Synthetic coordinate predictions with known ground truth.

Every case is built from a seeded generator: a ground-truth map
``phi(x) = A(x + n(x))`` (random affine ``A`` about the grid centre, optional
B-spline or SVF nonlinear part ``n``), a noisy and outlier-corrupted
prediction ``phi(x) + e``, an ellipsoidal mask and a concentric-shell
parcellation used for Dice checks.
"""
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .basis import AffineTransform, BsplineModel, bspline_lattice
from .errors import SpecInvalid
from .grid import (CoordField, DisplacementField, LabelVolume, Mask, masked_indices,
                   sample_nearest, unravel, world_coords)
from .polyaffine import SvfField, auto_steps, integrate_svf
from .ransac import draw_without_replacement, seeded_rng

__all__ = ["SynthSpec", "SynthCase", "generate", "ellipsoid_mask", "shell_labels",
           "random_affine", "N_SHELLS"]

TRUTH_KINDS = ("affine", "bspline", "svf")
N_SHELLS = 6
MASK_FRACTION = 0.7


@dataclass(frozen=True)
class SynthSpec:
    grid: object
    truth_kind: str = "affine"
    max_rotation_deg: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    max_shear: float = 0.0
    max_translation_mm: float = 0.0
    control_spacing_mm: float = 16.0
    coeff_amplitude_mm: float = 0.0
    velocity_amplitude_mm: float = 0.0
    smoothness_mm: float = 8.0
    noise_sigma_mm: float = 0.0
    outlier_fraction: float = 0.0
    outlier_range_mm: float = 50.0
    seed: int = 0

    def validate(self):
        if self.truth_kind not in TRUTH_KINDS:
            raise SpecInvalid(f"truth_kind must be one of {TRUTH_KINDS}, got {self.truth_kind!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise SpecInvalid(f"scale_range {self.scale_range} must satisfy 0 < lo <= hi")
        for name in ("max_rotation_deg", "max_shear", "max_translation_mm",
                     "coeff_amplitude_mm", "velocity_amplitude_mm", "noise_sigma_mm",
                     "outlier_range_mm"):
            if getattr(self, name) < 0:
                raise SpecInvalid(f"{name} must be non-negative")
        if self.max_rotation_deg >= 180:
            raise SpecInvalid("max_rotation_deg must be below 180")
        if self.control_spacing_mm <= 0 or self.smoothness_mm <= 0:
            raise SpecInvalid("control spacing and smoothness must be positive")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise SpecInvalid("outlier_fraction must lie in [0, 1)")
        fov = float(np.min(np.array(self.grid.dims) * self.grid.spacing))
        amp = self.coeff_amplitude_mm if self.truth_kind == "bspline" else 0.0
        amp += self.velocity_amplitude_mm if self.truth_kind == "svf" else 0.0
        if amp >= 0.25 * fov:
            raise SpecInvalid(f"nonlinear amplitude {amp} mm is not below a quarter of the "
                              f"field of view ({fov} mm)")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = {"dims": list(self.grid.dims),
                     "voxel_to_world": self.grid.voxel_to_world.tolist()}
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass(eq=False)
class SynthCase:
    spec: SynthSpec
    truth: DisplacementField
    truth_affine: AffineTransform
    truth_nonlinear: object
    pred: CoordField
    mask: Mask
    labels: LabelVolume
    atlas_labels: LabelVolume
    outlier_indices: np.ndarray
    record: dict = field(default_factory=dict)

    def truth_points(self):
        return self.truth.mapped_points()


def ellipsoid_mask(grid, fraction=MASK_FRACTION):
    """Centred ellipsoid with semi-axes ``fraction`` of each half-extent."""
    ijk = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in grid.dims],
                               indexing="ij"), axis=-1)
    centre = (np.array(grid.dims) - 1) / 2.0
    half = fraction * np.array(grid.dims) / 2.0
    rho2 = (((ijk - centre) / half) ** 2).sum(-1)
    return Mask(grid, rho2 <= 1.0)


def shell_labels(grid, n_shells=N_SHELLS, fraction=MASK_FRACTION):
    """Concentric shells of the mask ellipsoid, labels 1 (core) to ``n_shells``."""
    ijk = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in grid.dims],
                               indexing="ij"), axis=-1)
    centre = (np.array(grid.dims) - 1) / 2.0
    half = fraction * np.array(grid.dims) / 2.0
    rho = np.sqrt((((ijk - centre) / half) ** 2).sum(-1))
    lab = np.minimum(np.floor(rho * n_shells), n_shells - 1).astype(np.int32) + 1
    return LabelVolume(grid, np.where(rho <= 1.0, lab, 0))


def random_affine(rng, centre, max_rotation_deg=0.0, scale_range=(1.0, 1.0),
                  max_shear=0.0, max_translation_mm=0.0):
    """Random affine acting about ``centre``; rotation angle and |t| are bounded."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_rotation_deg))
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    scale = np.diag(rng.uniform(scale_range[0], scale_range[1], size=3))
    shear = np.eye(3)
    shear[np.triu_indices(3, 1)] = rng.uniform(-max_shear, max_shear, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_translation_mm)
    lin = rot @ scale @ shear
    centre = np.asarray(centre, dtype=np.float64)
    return AffineTransform(lin, centre - lin @ centre + t)


def _nonlinear_truth(spec, rng):
    grid = spec.grid
    if spec.truth_kind == "bspline":
        origin, ctrl = bspline_lattice(grid, Mask.full(grid), spec.control_spacing_mm)
        coeffs = rng.uniform(-spec.coeff_amplitude_mm, spec.coeff_amplitude_mm,
                             size=tuple(ctrl) + (3,))
        model = BsplineModel(spec.control_spacing_mm, origin, coeffs)
        return model, model.displacement(grid)
    if spec.truth_kind == "svf":
        noise = rng.normal(size=grid.dims + (3,))
        sig = spec.smoothness_mm / grid.spacing
        vel = np.stack([gaussian_filter(noise[..., c], sig, mode="reflect")
                        for c in range(3)], axis=-1)
        peak = np.linalg.norm(vel, axis=-1).max()
        vel *= spec.velocity_amplitude_mm / peak if peak > 0 else 0.0
        svf = SvfField(grid, vel, auto_steps(vel, grid.spacing))
        return svf, integrate_svf(svf)
    return None, DisplacementField.zeros(grid)


def generate(spec):
    """Build a :class:`SynthCase` from ``spec``; identical seeds give identical cases."""
    spec.validate()
    grid = spec.grid
    pts = world_coords(grid).coords
    centre = 0.5 * np.add(*grid.world_bounds())
    affine = random_affine(seeded_rng(spec.seed, 10), centre, spec.max_rotation_deg,
                           spec.scale_range, spec.max_shear, spec.max_translation_mm)
    nonlinear, ndisp = _nonlinear_truth(spec, seeded_rng(spec.seed, 11))
    mapped = affine(pts + ndisp.disp)
    truth = DisplacementField(grid, mapped - pts)

    pred = mapped.copy()
    if spec.noise_sigma_mm > 0:
        pred += seeded_rng(spec.seed, 12).normal(scale=spec.noise_sigma_mm, size=pred.shape)
    mask = ellipsoid_mask(grid)
    masked = masked_indices(mask)
    n_out = int(round(spec.outlier_fraction * len(masked)))
    picks = draw_without_replacement(len(masked), n_out, seeded_rng(spec.seed, 13))
    outliers = np.sort(masked[picks])
    if n_out:
        ijk = unravel(outliers, grid.dims)
        offsets = seeded_rng(spec.seed, 14).uniform(-spec.outlier_range_mm,
                                                    spec.outlier_range_mm, size=(n_out, 3))
        pred[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = mapped[ijk[:, 0], ijk[:, 1], ijk[:, 2]] + offsets

    atlas = shell_labels(grid)
    labels = LabelVolume(grid, sample_nearest(atlas, mapped))
    record = {"truth_kind": spec.truth_kind,
              "affine_matrix": affine.matrix.tolist(),
              "n_outliers": int(n_out),
              "n_masked": int(len(masked))}
    if isinstance(nonlinear, BsplineModel):
        record["bspline"] = {"origin": nonlinear.origin.tolist(),
                             "spacing": nonlinear.spacing.tolist(),
                             "ctrl_dims": list(nonlinear.ctrl_dims)}
    elif isinstance(nonlinear, SvfField):
        record["svf"] = {"n_steps": nonlinear.n_steps,
                         "max_velocity_mm": float(np.linalg.norm(nonlinear.velocity,
                                                                 axis=-1).max())}
    return SynthCase(spec, truth, affine, nonlinear, CoordField(grid, pred), mask,
                     labels, atlas, outliers, record)
