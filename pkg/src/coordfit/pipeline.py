"""Test-time fitting pipeline shared by the CLI and the end-to-end checks.

Linear models are fitted directly.  Nonlinear models always run a RANSAC
affine first, take the target-space residual ``pred(x) - T(x)``, drop
voxels whose residual exceeds the clip distance, fit the chosen model to
that residual and add it back: ``phi(x) = T(x) + u(x)``.
"""
from dataclasses import dataclass, field

import numpy as np

from .basis import FitReport, fit_affine, fit_bspline
from .demons import fit_demons
from .grid import CoordField, DisplacementField, world_coords
from .polyaffine import PolyaffineParams, fit_polyaffine, invert_svf
from .ransac import RansacParams, fit_affine_ransac, residual_after_affine

__all__ = ["MODELS", "FitOptions", "PipelineResult", "run_fit"]

MODELS = ("affine", "affine-ransac", "bspline", "demons", "polyaffine")
NONLINEAR = ("bspline", "demons", "polyaffine")


@dataclass
class FitOptions:
    spacing_mm: float = None
    lam: float = 0.0
    sigma_mm: float = None
    width_mm: float = None
    clip_mm: float = 10.0
    clip_mode: str = "exclude"
    min_voxels: int = 100
    n_steps: int = None
    ransac: RansacParams = field(default_factory=RansacParams)

    def check(self, model):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
        needed = {"bspline": "spacing_mm", "demons": "sigma_mm", "polyaffine": "width_mm"}
        name = needed.get(model)
        if name and getattr(self, name) is None:
            raise ValueError(f"model {model!r} requires {name}")

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("spacing_mm", "lam", "sigma_mm", "width_mm",
                                          "clip_mm", "clip_mode", "min_voxels", "n_steps")}
        d["ransac"] = self.ransac.to_dict()
        return d


@dataclass(eq=False)
class PipelineResult:
    model: str
    displacement: DisplacementField
    affine: object
    report: dict
    nonlinear: object = None
    svf: object = None
    inverse_residual: DisplacementField = None

    def mapped_points(self):
        return self.displacement.mapped_points()


def _stage_dict(report):
    return report.to_dict() if report is not None else None


def run_fit(pred, mask, model, options=None):
    """Fit ``model`` to ``pred`` on ``mask``.

    Returns
    -------
    PipelineResult
        ``displacement`` is the full map ``phi(x) - x``; for the log-polyaffine
        model ``svf`` holds the residual velocity and ``inverse_residual`` the
        inverse of its exponential.
    """
    options = options or FitOptions()
    options.check(model)
    grid = mask.grid
    pts = world_coords(grid).coords
    stages = {}
    nonlinear = svf = inverse = None

    if model == "affine":
        affine, rep = fit_affine(pred, mask)
        stages["affine"] = _stage_dict(rep)
        disp = affine(pts) - pts
    else:
        affine, inliers, rep = fit_affine_ransac(pred, mask, options.ransac)
        stages["affine-ransac"] = _stage_dict(rep)
        disp = affine(pts) - pts
        if model in NONLINEAR:
            residual, fit_mask = residual_after_affine(pred, mask, affine, options.clip_mm,
                                                       options.clip_mode)
            stages["clip"] = {"clip_mm": options.clip_mm, "mode": options.clip_mode,
                              "n_input": mask.count, "n_kept": fit_mask.count}
            if model == "bspline":
                nonlinear, rep = fit_bspline(residual, fit_mask, options.spacing_mm,
                                             options.lam)
                ndisp = nonlinear.displacement(grid)
            elif model == "demons":
                ndisp = fit_demons(residual, fit_mask, options.sigma_mm)
                nonlinear = ndisp
                res = (ndisp.disp - residual.disp)[fit_mask.flags]
                rep = FitReport.from_residuals(res, 1.0, model="demons",
                                               sigma_mm=float(options.sigma_mm))
            else:
                params = PolyaffineParams(options.width_mm, options.min_voxels,
                                          n_steps=options.n_steps)
                target = CoordField(grid, pts + residual.disp)
                svf, ndisp, rep = fit_polyaffine(target, fit_mask, params)
                nonlinear = ndisp
                inverse = invert_svf(svf)
            stages[model] = _stage_dict(rep)
            disp = disp + ndisp.disp

    displacement = DisplacementField(grid, disp)
    err = (pts + disp - pred.coords)[mask.flags]
    norms = np.linalg.norm(err, axis=1)
    final = stages[model] if model in stages else stages["affine-ransac"]
    report = {
        "model": model,
        "rms_residual_mm": float(np.sqrt(np.mean(norms ** 2))),
        "max_residual_mm": float(norms.max()),
        "n_points": int(len(norms)),
        "condition_estimate": final["condition_estimate"],
        "inlier_fraction": stages.get("affine-ransac", final)["inlier_fraction"],
        "affine_matrix": affine.matrix.tolist(),
        "stages": stages,
        "options": options.to_dict(),
    }
    return PipelineResult(model, displacement, affine, report, nonlinear, svf, inverse)
