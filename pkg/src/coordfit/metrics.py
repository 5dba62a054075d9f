"""Registration quality metrics: multi-label Dice and membrane energy."""
import numpy as np

from .errors import EmptyMask

__all__ = ["dice", "membrane_energy", "displacement_jacobian"]


def dice(a, b, labels=None, weighted=False):
    """Per-label Dice overlap and its mean.

    Parameters
    ----------
    a, b : LabelVolume
        Segmentations on the same grid.
    labels : iterable of int, optional
        Labels to score; defaults to every nonzero label present in either
        volume.  Labels absent from both volumes are skipped.
    weighted : bool
        Weight the mean by ``|A| + |B|`` instead of averaging uniformly.

    Returns
    -------
    dict, float
        ``{label: dice}`` and the mean (NaN when nothing was scored).
    """
    a.grid.check_same(b.grid)
    la = a.labels.ravel()
    lb = b.labels.ravel()
    if labels is None:
        labels = np.union1d(np.unique(la), np.unique(lb))
        labels = labels[labels != 0]
    n = int(max(la.max(initial=0), lb.max(initial=0), max(labels, default=0))) + 1
    count_a = np.bincount(la, minlength=n)
    count_b = np.bincount(lb, minlength=n)
    both = np.bincount(la[la == lb], minlength=n)
    per_label = {}
    sizes = {}
    for lab in labels:
        lab = int(lab)
        total = count_a[lab] + count_b[lab]
        if total == 0:
            continue
        per_label[lab] = 2.0 * both[lab] / total
        sizes[lab] = total
    if not per_label:
        return per_label, float("nan")
    scores = np.array(list(per_label.values()))
    if weighted:
        w = np.array([sizes[k] for k in per_label], dtype=np.float64)
        return per_label, float(np.sum(w * scores) / w.sum())
    return per_label, float(scores.mean())


def displacement_jacobian(disp):
    """World-mm spatial derivatives ``J[..., i, j] = d u_i / d x_j``.

    Central differences inside the grid, one-sided at its faces.
    """
    u = disp.disp
    dims = disp.grid.dims
    d_vox = np.zeros(dims + (3, 3))
    for a in range(3):
        if dims[a] > 1:
            d_vox[..., :, a] = np.gradient(u, axis=a, edge_order=1)
    minv = np.linalg.inv(disp.grid.voxel_to_world[:3, :3])
    return d_vox @ minv


def membrane_energy(disp, mask):
    """Mean over masked voxels of the squared Frobenius norm of the displacement gradient."""
    disp.grid.check_same(mask.grid)
    if not mask.flags.any():
        raise EmptyMask("membrane energy needs a non-empty mask")
    jac = displacement_jacobian(disp)
    energy = np.sum(jac * jac, axis=(-2, -1))
    return float(energy[mask.flags].mean())
