import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from coordfit.demons import fit_demons, gaussian_taps, masked_smooth
from coordfit.grid import DisplacementField, Grid, Mask
from coordfit.metrics import membrane_energy
from coordfit.synth import ellipsoid_mask


def dense_kernel(sigma_mm, spacing):
    """Full 3-D truncated Gaussian built directly, not as a product of passes."""
    radius = [int(np.ceil(3 * sigma_mm / s)) for s in spacing]
    axes = [np.arange(-r, r + 1) * s for r, s in zip(radius, spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    k = np.exp(-0.5 * (x ** 2 / sigma_mm ** 2)) * np.exp(-0.5 * (y ** 2 / sigma_mm ** 2)) \
        * np.exp(-0.5 * (z ** 2 / sigma_mm ** 2))
    # per-axis normalisation of the truncated taps factorises
    norm = np.prod([np.exp(-0.5 * (a / sigma_mm) ** 2).sum() for a in axes])
    return k / norm


def dense_oracle(values, flags, sigma_mm, spacing):
    k = dense_kernel(sigma_mm, spacing)
    m = flags.astype(float)
    den = fftconvolve(m, k, mode="same")
    out = np.zeros_like(values)
    for c in range(values.shape[-1]):
        num = fftconvolve(values[..., c] * m, k, mode="same")
        out[..., c] = np.where(den > 1e-6, num / np.where(den > 1e-6, den, 1), 0)
    return out, den


def test_taps_normalised_and_truncated():
    t = gaussian_taps(2.0, 1.0)
    assert len(t) == 13
    assert t.sum() == pytest.approx(1.0, abs=1e-15)
    assert len(gaussian_taps(2.0, 1.5)) == 2 * 4 + 1


def test_constant_field_preserved_in_mask():
    g = Grid.regular((16, 16, 16), (2.0, 2.0, 2.0))
    mask = ellipsoid_mask(g)
    v = np.array([1.5, -2.0, 0.25])
    r = DisplacementField(g, np.where(mask.flags[..., None], v, 0.0))
    out = fit_demons(r, mask, 3.0).disp
    assert np.max(np.abs(out[mask.flags] - v)) < 1e-12


def test_sigma_zero_passthrough(rng):
    g = Grid.regular((8, 8, 8))
    mask = ellipsoid_mask(g)
    r = DisplacementField(g, rng.normal(size=g.dims + (3,)))
    out = fit_demons(r, mask, 0.0).disp
    assert np.array_equal(out[mask.flags], r.disp[mask.flags])
    assert np.all(out[~mask.flags] == 0)
    with pytest.raises(ValueError):
        fit_demons(r, mask, -1.0)


def test_impulse_matches_dense_convolution():
    g = Grid.regular((32, 32, 32))
    d = np.zeros(g.dims + (3,))
    d[16, 15, 17] = [1.0, -2.0, 3.0]
    out = fit_demons(DisplacementField(g, d), Mask.full(g), 2.0).disp
    want, _ = dense_oracle(d, np.ones(g.dims, bool), 2.0, (1.0, 1.0, 1.0))
    assert np.max(np.abs(out - want)) < 1e-9
    assert np.allclose(out.sum(axis=(0, 1, 2)), [1.0, -2.0, 3.0], rtol=1e-6)


@pytest.mark.parametrize("sigma", [1.0, 2.0, 5.0])
def test_separable_equals_dense_on_masked_input(rng, sigma):
    g = Grid.regular((32, 32, 32))
    flags = ellipsoid_mask(g, 0.8).flags
    vals = rng.normal(size=g.dims + (3,))
    got = masked_smooth(vals, flags, sigma, g.spacing)
    want, den = dense_oracle(vals, flags, sigma, g.spacing)
    # the two pipelines may disagree only where the denominator sits at the floor
    ok = np.abs(den - 1e-6) > 1e-9
    assert np.max(np.abs(got - want)[ok]) < 1e-9


def test_anisotropic_spacing_matches_dense(rng):
    g = Grid.regular((20, 16, 12), (1.0, 1.5, 2.5))
    flags = ellipsoid_mask(g, 0.9).flags
    vals = rng.normal(size=g.dims + (3,))
    got = masked_smooth(vals, flags, 3.0, g.spacing)
    want, _ = dense_oracle(vals, flags, 3.0, g.spacing)
    assert np.max(np.abs(got - want)) < 1e-9


def test_linearity(rng):
    g = Grid.regular((16, 16, 16), (2.0, 2.0, 2.0))
    mask = ellipsoid_mask(g)
    r1, r2 = (rng.normal(size=g.dims + (3,)) for _ in range(2))
    a, b = 2.5, -0.7
    lhs = fit_demons(DisplacementField(g, a * r1 + b * r2), mask, 4.0).disp
    rhs = a * fit_demons(DisplacementField(g, r1), mask, 4.0).disp \
        + b * fit_demons(DisplacementField(g, r2), mask, 4.0).disp
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_more_smoothing_lowers_membrane_energy(rng):
    g = Grid.regular((24, 24, 24), (2.0, 2.0, 2.0))
    full = Mask.full(g)
    for seed in range(3):
        noise = np.random.default_rng(seed).normal(size=g.dims + (3,))
        r = DisplacementField(g, np.stack([gaussian_filter(noise[..., c], 1.5)
                                           for c in range(3)], axis=-1))
        energies = [membrane_energy(fit_demons(r, full, s), full)
                    for s in (0.0, 1.0, 2.0, 4.0, 8.0)]
        assert all(b <= a for a, b in zip(energies, energies[1:]))
