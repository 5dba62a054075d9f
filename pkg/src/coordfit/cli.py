"""``coordfit`` command line: fit, apply, invert, evaluate, synth.

Exit status is 0 on success, 2 for usage or I/O problems and 3 when a fit
fails; the failing stage is named on standard error.
"""
import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import nifti
from .errors import CoordfitError, FitError, GridMismatch, NiftiError, SpecInvalid
from .grid import Grid, LabelVolume, ScalarVolume, sample_nearest, sample_trilinear
from .metrics import dice, membrane_energy
from .pipeline import MODELS, FitOptions, run_fit
from .polyaffine import invert_svf
from .ransac import RansacParams
from .synth import SynthSpec, generate

EXIT_OK, EXIT_USAGE, EXIT_FIT = 0, 2, 3


class StageError(Exception):
    def __init__(self, stage, exc, code):
        super().__init__(f"{stage}: {exc}")
        self.stage, self.code = stage, code


def _round_floats(obj):
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(f"{x:.9g}") if math.isfinite(x) else None
    return obj


def dump_json(obj, path=None):
    """Stable JSON: sorted keys, floats to 9 significant digits, NaN as null."""
    text = json.dumps(_round_floats(obj), sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _stem(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii", ".gz"):
        if name.endswith(ext):
            return Path(path).with_name(name[: -len(ext)]), ext
    return Path(path), ".nii.gz"


def _sibling(path, suffix, ext=None):
    stem, e = _stem(path)
    return stem.with_name(stem.name + suffix + (ext if ext is not None else e))


def _io(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (OSError, NiftiError, GridMismatch, SpecInvalid, ValueError) as exc:
        raise StageError(stage, exc, EXIT_USAGE) from exc


def cmd_fit(args, parser):
    needed = {"bspline": ("spacing", "--spacing"), "demons": ("sigma", "--sigma"),
              "polyaffine": ("width", "--width")}
    if args.model in needed:
        attr, flag = needed[args.model]
        if getattr(args, attr) is None:
            parser.error(f"--model {args.model} requires {flag}")
    pred = _io("read --pred", nifti.read_coord_field, args.pred)
    mask = _io("read --mask", nifti.read_volume, args.mask, kind="mask")
    _io("read --mask", pred.grid.check_same, mask.grid)
    try:
        ransac = RansacParams(seed=args.seed, inlier_threshold_mm=args.inlier_thresh)
        options = FitOptions(spacing_mm=args.spacing, lam=args.lam, sigma_mm=args.sigma,
                             width_mm=args.width, clip_mm=args.clip,
                             min_voxels=args.min_voxels, n_steps=args.steps, ransac=ransac)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        result = run_fit(pred, mask, args.model, options)
    except (FitError, CoordfitError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(f"fit {args.model} ({type(exc).__name__})", exc, EXIT_FIT) from exc

    out = Path(args.out)
    report = dict(result.report)
    outputs = {"displacement": str(out)}
    _io("write --out", nifti.write_displacement, result.displacement, out)
    if result.svf is not None:
        svf_path = _sibling(out, "_svf")
        inv_path = _sibling(out, "_inverse")
        _io("write svf", nifti.write_svf, result.svf, svf_path)
        _io("write inverse", nifti.write_displacement, result.inverse_residual, inv_path)
        outputs.update(svf=str(svf_path), inverse=str(inv_path))
    report["outputs"] = outputs
    report_path = _sibling(out, "_report", ".json")
    _io("write report", dump_json, report, report_path)
    return EXIT_OK


def cmd_apply(args, parser):
    field = _io("read --field", nifti.read_displacement, args.field)
    kind = "label" if args.interp == "nearest" else "scalar"
    vol = _io("read --input", nifti.read_volume, args.input, kind=kind)
    pts = field.mapped_points().reshape(-1, 3)
    if args.interp == "nearest":
        vals = sample_nearest(vol, pts).reshape(field.grid.dims)
        out = LabelVolume(field.grid, vals)
    else:
        vals = sample_trilinear(vol, pts, fill=args.fill).reshape(field.grid.dims)
        out = ScalarVolume(field.grid, vals)
    _io("write --out", nifti.write_volume, out, args.out)
    return EXIT_OK


def cmd_invert(args, parser):
    svf = _io("read --svf", nifti.read_svf, args.svf, n_steps=args.steps)
    try:
        inv = invert_svf(svf)
    except (CoordfitError, ValueError) as exc:
        raise StageError("invert", exc, EXIT_FIT) from exc
    _io("write --out", nifti.write_displacement, inv, args.out)
    return EXIT_OK


def cmd_evaluate(args, parser):
    if (args.labels_a is None) != (args.labels_b is None):
        parser.error("--labels-a and --labels-b must be given together")
    if (args.field is None) != (args.mask is None):
        parser.error("--field and --mask must be given together")
    if args.labels_a is None and args.field is None:
        parser.error("nothing to evaluate: give --labels-a/--labels-b and/or --field/--mask")
    result = {}
    if args.labels_a is not None:
        a = _io("read --labels-a", nifti.read_volume, args.labels_a, kind="label")
        b = _io("read --labels-b", nifti.read_volume, args.labels_b, kind="label")
        per_label, mean = _io("dice", dice, a, b, weighted=args.weighted)
        result["dice"] = {"per_label": per_label, "mean": mean, "weighted": args.weighted}
    if args.field is not None:
        field = _io("read --field", nifti.read_displacement, args.field)
        mask = _io("read --mask", nifti.read_volume, args.mask, kind="mask")
        try:
            result["membrane_energy"] = membrane_energy(field, mask)
        except (CoordfitError, ValueError) as exc:
            raise StageError("membrane energy", exc, EXIT_FIT) from exc
    _io("write --out", dump_json, result, args.out)
    return EXIT_OK


def cmd_synth(args, parser):
    try:
        grid = Grid.regular(tuple(args.dims), tuple(args.voxel_size))
        spec = SynthSpec(grid, truth_kind=args.truth, max_rotation_deg=args.rotation,
                         scale_range=(args.scale_min, args.scale_max), max_shear=args.shear,
                         max_translation_mm=args.translation,
                         control_spacing_mm=args.control_spacing,
                         coeff_amplitude_mm=args.coeff_amplitude,
                         velocity_amplitude_mm=args.velocity_amplitude,
                         smoothness_mm=args.smoothness, noise_sigma_mm=args.noise,
                         outlier_fraction=args.outliers, outlier_range_mm=args.outlier_range,
                         seed=args.seed)
        case = generate(spec)
    except (SpecInvalid, ValueError) as exc:
        raise StageError("synth", exc, EXIT_USAGE) from exc
    out = Path(args.out_dir)
    _io("create --out-dir", out.mkdir, parents=True, exist_ok=True)
    files = {"pred": "pred.nii.gz", "mask": "mask.nii.gz", "labels": "labels.nii.gz",
             "atlas_labels": "atlas_labels.nii.gz", "truth": "truth.nii.gz"}
    _io("write pred", nifti.write_coord_field, case.pred, out / files["pred"])
    _io("write mask", nifti.write_volume, case.mask, out / files["mask"])
    _io("write labels", nifti.write_volume, case.labels, out / files["labels"])
    _io("write atlas", nifti.write_volume, case.atlas_labels, out / files["atlas_labels"])
    _io("write truth", nifti.write_displacement, case.truth, out / files["truth"])
    manifest = {"spec": spec.to_dict(), "truth": case.record, "files": files,
                "n_outliers": int(len(case.outlier_indices))}
    _io("write manifest", dump_json, manifest, out / "manifest.json")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="coordfit",
        description="Fit deformation models to dense coordinate-correspondence fields.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    f = sub.add_parser("fit", help="fit a deformation model to a coordinate field",
                       description="Fit a deformation model. Nonlinear models run a RANSAC "
                                   "affine, clip its residual and fit the model to it.")
    f.add_argument("--pred", required=True, help="predicted target coordinates (vector NIfTI)")
    f.add_argument("--mask", required=True, help="mask of voxels to fit (NIfTI)")
    f.add_argument("--model", required=True, choices=MODELS, help="deformation model")
    f.add_argument("--out", required=True,
                   help="output displacement NIfTI; the JSON report is written next to it "
                        "as <stem>_report.json, polyaffine also writes <stem>_svf and "
                        "<stem>_inverse")
    f.add_argument("--spacing", type=float, help="B-spline control-point spacing in mm "
                                                 "(required for bspline)")
    f.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="membrane regularization weight for bspline (default 0)")
    f.add_argument("--sigma", type=float, help="Gaussian sigma in mm (required for demons)")
    f.add_argument("--width", type=float,
                   help="supervoxel width in mm (required for polyaffine)")
    f.add_argument("--seed", type=int, default=0, help="RANSAC seed (default 0)")
    f.add_argument("--inlier-thresh", type=float, default=4.0,
                   help="RANSAC inlier distance in mm (default 4)")
    f.add_argument("--clip", type=float, default=10.0,
                   help="drop residuals longer than this many mm before nonlinear fits "
                        "(default 10)")
    f.add_argument("--min-voxels", type=int, default=100,
                   help="minimum masked voxels per supervoxel (default 100)")
    f.add_argument("--steps", type=int,
                   help="scaling-and-squaring steps for polyaffine (default: automatic)")
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("apply", help="warp a volume through a displacement field",
                       description="Resample --input at x + u(x) for every voxel x of "
                                   "the field grid.")
    a.add_argument("--input", required=True, help="volume to warp (NIfTI)")
    a.add_argument("--field", required=True, help="displacement field (vector NIfTI)")
    a.add_argument("--out", required=True, help="warped volume (NIfTI)")
    a.add_argument("--interp", choices=("trilinear", "nearest"), default="trilinear",
                   help="trilinear for intensities, nearest for labels (default trilinear)")
    a.add_argument("--fill", type=float, default=0.0,
                   help="value outside the input grid for trilinear (default 0)")
    a.set_defaults(func=cmd_apply)

    i = sub.add_parser("invert", help="invert a stationary velocity field",
                       description="Integrate the negated velocity field.")
    i.add_argument("--svf", required=True, help="velocity field (vector NIfTI)")
    i.add_argument("--out", required=True, help="inverse displacement field (vector NIfTI)")
    i.add_argument("--steps", type=int,
                   help="scaling-and-squaring steps (default: value stored in the file)")
    i.set_defaults(func=cmd_invert)

    e = sub.add_parser("evaluate", help="Dice overlap and membrane energy",
                       description="Score label overlap and/or displacement regularity.")
    e.add_argument("--labels-a", help="first label volume")
    e.add_argument("--labels-b", help="second label volume")
    e.add_argument("--weighted", action="store_true",
                   help="volume-weighted mean Dice instead of the plain mean")
    e.add_argument("--field", help="displacement field for membrane energy")
    e.add_argument("--mask", help="mask over which membrane energy is averaged")
    e.add_argument("--out", help="JSON output path (default: standard output)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="generate a synthetic case with known truth",
                       description="Write pred, mask, labels, atlas_labels and truth "
                                   "NIfTI files plus manifest.json.")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"),
                   help="grid size (default 64 64 64)")
    s.add_argument("--voxel-size", type=float, nargs=3, default=[1.0, 1.0, 1.0],
                   metavar=("SX", "SY", "SZ"), help="voxel size in mm (default 1 1 1)")
    s.add_argument("--truth", choices=("affine", "bspline", "svf"), default="affine",
                   help="ground-truth family (default affine)")
    s.add_argument("--rotation", type=float, default=0.0, help="max rotation in degrees")
    s.add_argument("--scale-min", type=float, default=1.0, help="min axis scale")
    s.add_argument("--scale-max", type=float, default=1.0, help="max axis scale")
    s.add_argument("--shear", type=float, default=0.0, help="max absolute shear")
    s.add_argument("--translation", type=float, default=0.0, help="max translation in mm")
    s.add_argument("--control-spacing", type=float, default=16.0,
                   help="control spacing in mm for bspline truth (default 16)")
    s.add_argument("--coeff-amplitude", type=float, default=0.0,
                   help="coefficient amplitude in mm for bspline truth")
    s.add_argument("--velocity-amplitude", type=float, default=0.0,
                   help="peak velocity in mm for svf truth")
    s.add_argument("--smoothness", type=float, default=8.0,
                   help="velocity smoothing sigma in mm for svf truth (default 8)")
    s.add_argument("--noise", type=float, default=0.0, help="prediction noise sigma in mm")
    s.add_argument("--outliers", type=float, default=0.0,
                   help="fraction of masked voxels replaced by outliers")
    s.add_argument("--outlier-range", type=float, default=50.0,
                   help="outlier offsets are uniform in +-this many mm (default 50)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args, sub)
    except StageError as exc:
        print(f"coordfit {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
