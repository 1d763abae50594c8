"""Coordinate conventions for the normalized [-1, 1] box.

Volumes are cell-centered: index ``j`` of an axis with ``n`` cells sits at
``-1 + (2j + 1) / n``.  Motion coefficient lattices are node-centered: ``a``
nodes span the closed interval, node ``j`` at ``-1 + 2j / (a - 1)``.
"""

import numpy as np


def cell_centers(n, dtype=np.float64):
    """Positions of the ``n`` cell centers of one axis."""
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    return (-1.0 + (2.0 * np.arange(n) + 1.0) / n).astype(dtype)


def node_positions(n, dtype=np.float64):
    """Positions of ``n`` lattice nodes spanning [-1, 1] (a single node sits at 0)."""
    if n < 1:
        raise ValueError(f"lattice size must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n).astype(dtype)


def interp_matrix(src, dst):
    """Dense 1D linear interpolation operator from samples at ``src`` to ``dst``.

    Returns an array of shape ``(len(dst), len(src))``.  ``src`` must be
    strictly increasing.  Queries beyond the first/last sample extrapolate
    linearly from the two outermost samples, so affine data is reproduced
    exactly everywhere.  A single source sample yields a constant.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    m = np.zeros((dst.size, src.size))
    if src.size == 1:
        m[:, 0] = 1.0
        return m
    k = np.searchsorted(src, dst, side="right") - 1
    k = np.clip(k, 0, src.size - 2)
    w = (dst - src[k]) / (src[k + 1] - src[k])
    rows = np.arange(dst.size)
    m[rows, k] = 1.0 - w
    m[rows, k + 1] += w
    # exact hits on a source sample
    hit = np.isclose(w, 0.0, atol=1e-12, rtol=0.0)
    m[rows[hit], k[hit] + 1] = 0.0
    m[rows[hit], k[hit]] = 1.0
    hit = np.isclose(w, 1.0, atol=1e-12, rtol=0.0)
    m[rows[hit], k[hit]] = 0.0
    m[rows[hit], k[hit] + 1] = 1.0
    return m


def separable_apply(mats, arr):
    """Apply one 1D operator per leading axis of ``arr`` (trailing axes untouched)."""
    out = arr
    for axis, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def separable_apply_transpose(mats, arr):
    """Adjoint of :func:`separable_apply` for the same operators."""
    return separable_apply([m.T for m in mats], arr)
