"""Closed-form deformation models fitted to dense coordinate fields.

A coordinate field gives, for every voxel of a subject grid, a predicted
position in a target space.  ``coordfit`` turns such fields into affine,
RANSAC-affine, B-spline, Gaussian-smoothed and log-polyaffine (diffeomorphic)
transforms, and scores the results with Dice overlap and membrane energy.
"""
from ._kernels import BACKEND
from .basis import (AffineTransform, BsplineModel, FitReport, affine_lstsq, evaluate_bspline,
                    fit_affine, fit_bspline)
from .demons import fit_demons, masked_smooth
from .errors import (BadMagic, CoordfitError, DegenerateGeometry, DimensionMismatch, EmptyMask,
                     FitError, GridMismatch, LogUndefined, NiftiError, NoConsensus,
                     NoValidSupervoxels, OutOfSupport, SingularSystem, SpecInvalid,
                     TruncatedFile, UnsupportedDatatype)
from .grid import (CoordField, DisplacementField, Grid, LabelVolume, Mask, ScalarVolume,
                   sample_nearest, sample_trilinear, world_coords)
from .metrics import dice, membrane_energy
from .nifti import (read_coord_field, read_displacement, read_svf, read_volume,
                    write_coord_field, write_displacement, write_svf, write_volume)
from .pipeline import FitOptions, PipelineResult, run_fit
from .polyaffine import (PolyaffineParams, SvfField, build_svf, fit_polyaffine, integrate_svf,
                         invert_svf, matrix_exp_affine, matrix_log_affine)
from .ransac import RansacParams, fit_affine_ransac, residual_after_affine
from .synth import SynthCase, SynthSpec, generate

__version__ = "0.1.0"
