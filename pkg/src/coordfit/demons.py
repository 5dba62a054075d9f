"""One-step Demons: masked normalized Gaussian smoothing of a residual field."""
import math

import numpy as np
from scipy.ndimage import correlate1d

from .grid import DisplacementField

__all__ = ["gaussian_taps", "masked_smooth", "fit_demons"]

DENOMINATOR_FLOOR = 1e-6


def gaussian_taps(sigma_mm, spacing_mm):
    """Normalized 1-D Gaussian truncated at ``ceil(3 sigma / spacing)`` taps per side."""
    radius = int(math.ceil(3.0 * sigma_mm / spacing_mm))
    k = np.arange(-radius, radius + 1) * spacing_mm
    taps = np.exp(-0.5 * (k / sigma_mm) ** 2)
    return taps / taps.sum()


def _separable(vol, kernels):
    out = vol
    for axis, taps in enumerate(kernels):
        out = correlate1d(out, taps, axis=axis, mode="constant", cval=0.0)
    return out


def masked_smooth(values, mask_flags, sigma_mm, spacing):
    """``(G * (m v)) / (G * m)`` per trailing component; zero where ``G * m`` is tiny."""
    m = mask_flags.astype(np.float64)
    kernels = [gaussian_taps(sigma_mm, s) for s in spacing]
    den = _separable(m, kernels)
    defined = den > DENOMINATOR_FLOOR
    safe = np.where(defined, den, 1.0)
    out = np.empty_like(values, dtype=np.float64)
    for c in range(values.shape[-1]):
        num = _separable(values[..., c] * m, kernels)
        out[..., c] = np.where(defined, num / safe, 0.0)
    return out


def fit_demons(residual, mask, sigma_mm):
    """Smooth ``residual`` inside ``mask`` with an isotropic Gaussian (sigma in mm).

    ``sigma_mm == 0`` returns the residual restricted to the mask.
    """
    if sigma_mm < 0:
        raise ValueError("sigma must be non-negative")
    residual.grid.check_same(mask.grid)
    if sigma_mm == 0:
        return DisplacementField(residual.grid,
                                 np.where(mask.flags[..., None], residual.disp, 0.0))
    out = masked_smooth(residual.disp, mask.flags, sigma_mm, residual.grid.spacing)
    return DisplacementField(residual.grid, out)
