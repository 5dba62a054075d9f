import numpy as np
import pytest
import scipy.linalg
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from coordfit.basis import AffineTransform, fit_affine
from coordfit.errors import LogUndefined, NoValidSupervoxels
from coordfit.grid import CoordField, DisplacementField, Grid, Mask, sample_field, world_coords
from coordfit.metrics import displacement_jacobian
from coordfit.polyaffine import (PolyaffineParams, SupervoxelAffine, SvfField, auto_steps,
                                 build_svf, fit_polyaffine, fit_supervoxel_affines,
                                 integrate_svf, invert_svf, logm_principal, matrix_exp_affine,
                                 matrix_log_affine, supervoxel_weights)
from coordfit.synth import SynthSpec, ellipsoid_mask, generate

from conftest import central_box, rotation_z


def random_affine(rng, max_deg=60.0):
    angle = np.deg2rad(rng.uniform(0, max_deg))
    rot = Rotation.from_rotvec(_axis(rng) * angle).as_matrix()
    lin = rot @ np.diag(rng.uniform(0.8, 1.25, 3))
    lin[np.triu_indices(3, 1)] += rng.uniform(-0.1, 0.1, 3)
    return AffineTransform(lin, rng.uniform(-30, 30, 3))


def _axis(rng):
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def smooth_svf(grid, seed, peak_mm=10.0, smooth_mm=12.0):
    rng = np.random.default_rng(seed)
    v = np.stack([gaussian_filter(rng.normal(size=grid.dims), smooth_mm / grid.spacing)
                  for _ in range(3)], axis=-1)
    v *= peak_mm / np.linalg.norm(v, axis=-1).max()
    return SvfField(grid, v, auto_steps(v, grid.spacing))


def compose_disp(outer, inner):
    """Displacement of ``outer o inner`` on inner's grid."""
    pts = world_coords(inner.grid).coords
    return inner.disp + sample_field(outer.disp, outer.grid, pts + inner.disp, clamp=True)


# ---------------------------------------------------------------- matrix log

def test_log_identity_and_translation():
    lin, v = matrix_log_affine(AffineTransform.identity())
    assert np.all(lin == 0) and np.all(v == 0)
    lin, v = matrix_log_affine(AffineTransform(np.eye(3), np.array([4.0, -1.0, 2.5])))
    assert np.max(np.abs(lin)) < 1e-14
    assert np.allclose(v, [4.0, -1.0, 2.5], atol=1e-13)


def test_log_rotation_roundtrip():
    t = AffineTransform(rotation_z(30), np.array([5.0, -3.0, 2.0]))
    lin, v = matrix_log_affine(t)
    assert np.linalg.norm(matrix_exp_affine(lin, v).matrix - t.matrix) < 1e-9
    # log of a z rotation is the skew generator scaled by the angle
    assert lin[1, 0] == pytest.approx(np.deg2rad(30), abs=1e-12)


def test_log_matches_scipy_on_random_affines(rng):
    for _ in range(10):
        t = random_affine(rng)
        lin, v = matrix_log_affine(t)
        ref = scipy.linalg.logm(t.matrix).real
        assert np.max(np.abs(ref[:3, :3] - lin)) < 1e-9
        assert np.max(np.abs(ref[:3, 3] - v)) < 1e-8


def test_exp_log_roundtrip_random(rng):
    for _ in range(100):
        t = random_affine(rng, 60.0)
        lin, v = matrix_log_affine(t)
        assert np.linalg.norm(matrix_exp_affine(lin, v).matrix - t.matrix) < 1e-9


def test_reflection_rejected():
    with pytest.raises(LogUndefined) as err:
        matrix_log_affine(AffineTransform(np.diag([-1.0, 1.0, 1.0]), np.zeros(3)))
    assert err.value.eigenvalue is not None


def test_rotation_by_pi_rejected():
    with pytest.raises(LogUndefined):
        matrix_log_affine(AffineTransform(rotation_z(180), np.zeros(3)))


def test_log_principal_near_identity():
    m = np.eye(3) + 1e-3 * np.arange(9).reshape(3, 3) / 9
    assert np.allclose(logm_principal(m), scipy.linalg.logm(m).real, atol=1e-14)


# ---------------------------------------------------------------- supervoxels

def test_single_supervoxel_matches_fit_affine():
    g = Grid.regular((24, 24, 24), (2.0, 2.0, 2.0))
    t = AffineTransform(rotation_z(8) * 1.02, np.array([2.0, 1.0, -1.0]))
    pred = CoordField(g, t(world_coords(g).coords))
    mask = ellipsoid_mask(g)
    svs, dropped = fit_supervoxel_affines(pred, mask, PolyaffineParams(width_mm=100))
    assert len(svs) == 1 and not any(dropped.values())
    t_fit, _ = fit_affine(pred, mask)
    got = matrix_exp_affine(svs[0].log_linear, svs[0].log_translation)
    assert np.max(np.abs(got.matrix - t_fit.matrix)) < 1e-6


def test_empty_octant_has_no_supervoxels():
    g = Grid.regular((32, 32, 32), (2.0, 2.0, 2.0))
    flags = ellipsoid_mask(g, 0.9).flags.copy()
    flags[16:, 16:, 16:] = False
    svs, _ = fit_supervoxel_affines(world_coords(g), Mask(g, flags),
                                    PolyaffineParams(width_mm=16, min_voxels=20))
    assert svs
    hi = g.to_world(np.array([[15.5, 15.5, 15.5]]))[0]
    assert not any(np.all(sv.center > hi) for sv in svs)
    for sv in svs:
        assert sv.n_voxels >= 20


def test_piecewise_affine_logs():
    g = Grid.regular((32, 16, 16), (2.0, 2.0, 2.0))
    pts = world_coords(g).coords
    # two affines agreeing on the plane x = 0
    a = AffineTransform(rotation_z(5), np.array([1.0, 2.0, 0.0]))
    shear = np.eye(3)
    shear[1, 0] = 0.05
    b = AffineTransform(a.linear @ shear, a.translation)
    left = pts[..., 0] < 0
    pred = np.where(left[..., None], a(pts), b(pts))
    flags = np.ones(g.dims, bool)
    svs, _ = fit_supervoxel_affines(CoordField(g, pred), Mask(g, flags),
                                    PolyaffineParams(width_mm=16, min_voxels=50))
    la, va = matrix_log_affine(a)
    lb, vb = matrix_log_affine(b)
    for sv in svs:
        lin, v = (la, va) if sv.center[0] < 0 else (lb, vb)
        assert np.max(np.abs(sv.log_linear - lin)) < 1e-5
        assert np.max(np.abs(sv.log_translation - v)) < 1e-5


def test_no_valid_supervoxels():
    g = Grid.regular((8, 8, 8))
    with pytest.raises(NoValidSupervoxels):
        fit_supervoxel_affines(world_coords(g), Mask.full(g),
                               PolyaffineParams(width_mm=4, min_voxels=1000))
    with pytest.raises(ValueError):
        PolyaffineParams(width_mm=0)
    with pytest.raises(ValueError):
        PolyaffineParams(width_mm=8, min_voxels=3)


# ---------------------------------------------------------------- SVF assembly

def _sv(rng, center):
    return SupervoxelAffine(np.asarray(center, float), rng.normal(size=(3, 3)) * 0.02,
                            rng.normal(size=3), 100)


def test_single_supervoxel_velocity_everywhere(rng):
    g = Grid.regular((10, 10, 10), (2.0, 2.0, 2.0))
    sv = _sv(rng, [50.0, 0.0, 0.0])
    svf = build_svf([sv], g, 4.0)
    assert np.max(np.abs(svf.velocity - sv.velocity(world_coords(g).coords))) < 1e-12


def test_identical_affines_convex(rng):
    g = Grid.regular((10, 10, 10), (2.0, 2.0, 2.0))
    a = _sv(rng, [0.0, 0.0, 0.0])
    b = SupervoxelAffine(np.array([8.0, 4.0, 0.0]), a.log_linear, a.log_translation, 100)
    one = build_svf([a], g, 5.0, n_steps=4).velocity
    two = build_svf([a, b], g, 5.0, n_steps=4).velocity
    assert np.max(np.abs(one - two)) < 1e-12


def test_weighted_sum_matches_direct_recomputation(rng):
    g = Grid.regular((9, 8, 7), (2.0, 2.0, 2.0))
    svs = [_sv(rng, c) for c in ([-6, 0, 0], [5, 3, -2], [0, -7, 4])]
    svf = build_svf(svs, g, 6.0)
    for idx in [(0, 0, 0), (4, 3, 2), (8, 7, 6), (2, 5, 1)]:
        p = g.to_world(np.array([idx]))[0]
        w = np.array([np.exp(-np.sum((p - s.center) ** 2) / 72.0) for s in svs])
        w /= w.sum()
        want = sum(wi * (s.log_translation + s.log_linear @ p) for wi, s in zip(w, svs))
        assert np.max(np.abs(svf.velocity[idx] - want)) < 1e-12


def test_weights_normalised_with_far_fallback(rng):
    pts = rng.uniform(-50, 50, size=(200, 3))
    centers = rng.uniform(-40, 40, size=(5, 3))
    w = supervoxel_weights(pts, centers, 8.0)
    assert np.max(np.abs(w.sum(1) - 1)) < 1e-12
    far = supervoxel_weights(np.array([[1e4, 0, 0]]), centers, 1.0)
    assert far.sum() == 1.0 and far[0, np.argmax(centers[:, 0])] == 1.0


def test_far_voxels_use_nearest_supervoxel(rng):
    g = Grid.regular((6, 6, 6), (50.0, 50.0, 50.0))
    svs = [_sv(rng, [-100, 0, 0]), _sv(rng, [100, 0, 0])]
    svf = build_svf(svs, g, 0.5, n_steps=4)
    p = world_coords(g).coords
    near0 = p[..., 0] < 0
    want = np.where(near0[..., None], svs[0].velocity(p), svs[1].velocity(p))
    assert np.max(np.abs(svf.velocity - want)) < 1e-12


# ---------------------------------------------------------------- integration

def test_zero_and_constant_svf():
    g = Grid.regular((12, 12, 12), (2.0, 2.0, 2.0))
    zero = SvfField(g, np.zeros(g.dims + (3,)), 6)
    assert np.all(integrate_svf(zero).disp == 0)
    assert np.all(invert_svf(zero).disp == 0)
    v = np.array([3.0, -1.5, 0.7])
    const = SvfField(g, np.broadcast_to(v, g.dims + (3,)), 6)
    assert np.max(np.abs(integrate_svf(const).disp - v)) < 1e-9
    assert np.max(np.abs(invert_svf(const).disp + v)) < 1e-9


def test_auto_steps_rule():
    g = Grid.regular((8, 8, 8))
    assert auto_steps(np.zeros(g.dims + (3,)), g.spacing) == 4
    const = np.broadcast_to([20.0, 0, 0], g.dims + (3,))
    n = auto_steps(const, g.spacing)
    assert 20.0 / 2 ** n < 0.5 <= 20.0 / 2 ** (n - 1)
    assert auto_steps(np.full(g.dims + (3,), 1e9), g.spacing) == 12


def test_single_supervoxel_integration_matches_expm():
    g = Grid.regular((48, 48, 48), (1.5, 1.5, 1.5))
    t = AffineTransform(rotation_z(6) @ np.diag([1.02, 0.99, 1.0]), np.array([2.0, -1.5, 1.0]))
    lin, v = matrix_log_affine(t)
    svf = build_svf([SupervoxelAffine(np.zeros(3), lin, v, 100)], g, 20.0)
    err = np.linalg.norm(integrate_svf(svf).disp - t.displacement(g).disp, axis=-1)
    assert err[central_box(g)].max() < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_inverse_consistency(seed):
    g = Grid.regular((48, 48, 48), (2.0, 2.0, 2.0))
    svf = smooth_svf(g, seed)
    fwd, inv = integrate_svf(svf), invert_svf(svf)
    box = central_box(g)
    assert np.linalg.norm(compose_disp(fwd, inv), axis=-1)[box].max() < 0.1
    assert np.linalg.norm(compose_disp(inv, fwd), axis=-1)[box].max() < 0.1


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("width", [16.0, 24.0])
def test_polyaffine_svf_has_positive_jacobian(seed, width):
    rng = np.random.default_rng(seed)
    g = Grid.regular((40, 40, 40), (2.0, 2.0, 2.0))
    lo, hi = g.world_bounds()
    axes = [np.arange(a + width / 2, b, width) for a, b in zip(lo, hi)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    svs = [SupervoxelAffine(c, rng.normal(size=(3, 3)) * 0.1, rng.normal(size=3) * 5, 100)
           for c in centers]
    svf = build_svf(svs, g, width / 2)
    scale = 10.0 / np.linalg.norm(svf.velocity, axis=-1).max()
    svs = [SupervoxelAffine(s.center, s.log_linear * scale, s.log_translation * scale, 100)
           for s in svs]
    svf = build_svf(svs, g, width / 2)
    disp = integrate_svf(svf)
    det = np.linalg.det(displacement_jacobian(disp) + np.eye(3))
    assert det[1:-1, 1:-1, 1:-1].min() > 0


# ---------------------------------------------------------------- full model

def test_fit_polyaffine_on_affine_pred():
    g = Grid.regular((48, 48, 48), (1.5, 1.5, 1.5))
    t = AffineTransform(rotation_z(5) * 1.01, np.array([1.5, 1.0, -2.0]))
    pred = CoordField(g, t(world_coords(g).coords))
    svf, disp, rep = fit_polyaffine(pred, Mask.full(g), PolyaffineParams(width_mm=100))
    err = np.linalg.norm(disp.disp - t.displacement(g).disp, axis=-1)
    assert err[central_box(g)].max() < 0.05
    assert rep.extra["n_supervoxels"] == 1


def test_identity_pred_gives_zero_displacement():
    g = Grid.regular((20, 20, 20), (2.0, 2.0, 2.0))
    _, disp, rep = fit_polyaffine(world_coords(g), ellipsoid_mask(g),
                                  PolyaffineParams(width_mm=12, min_voxels=20))
    assert np.max(np.abs(disp.disp)) < 1e-6
    assert rep.rms_residual_mm < 1e-6


def test_beats_global_affine_on_smooth_deformation():
    g = Grid.regular((48, 48, 48), (2.0, 2.0, 2.0))
    case = generate(SynthSpec(g, truth_kind="svf", velocity_amplitude_mm=6,
                              smoothness_mm=12, seed=2))
    _, _, rep = fit_polyaffine(case.pred, case.mask, PolyaffineParams(width_mm=32))
    _, rep_aff = fit_affine(case.pred, case.mask)
    assert rep.rms_residual_mm < rep_aff.rms_residual_mm
