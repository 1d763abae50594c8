"""Polynomial-in-time displacement fields and differentiable backward warping.

Coefficients ``C`` have shape ``(a, a, a, k + 1, 3)``.  The first three axes
index a node lattice over [-1, 1]^3 in (z, y, x) order; the last two hold the
polynomial order and the displacement component (x, y, z) in box units, where
2 / side moves one voxel.  The displacement at time t is
``W(t) = sum_j C_j t^j``, carried from the lattice to any voxel grid by
trilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import cell_centers, interp_matrix, node_positions, separable_apply, separable_apply_transpose
from .volumes import as_array


@dataclass
class MotionCoeffs:
    C: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.C)
        if c.ndim != 5 or c.shape[-1] != 3 or c.shape[3] < 1:
            raise ValueError(f"coefficients must be (a, a, a, k+1, 3), got {c.shape}")
        self.C = c

    @property
    def alpha(self):
        return self.C.shape[0]

    @property
    def degree(self):
        return self.C.shape[3] - 1


def init_motion(alpha0, k, init_scale=0.0, seed=0, dtype=np.float32):
    """Lattice of ``alpha0`` nodes per axis with ``k + 1`` orders; zero by default."""
    if alpha0 < 1 or k < 1:
        raise ValueError("alpha0 and k must be >= 1")
    shape = (alpha0, alpha0, alpha0, k + 1, 3)
    if init_scale == 0.0:
        return MotionCoeffs(np.zeros(shape, dtype=dtype))
    rng = np.random.default_rng(seed)
    return MotionCoeffs((init_scale * rng.standard_normal(shape)).astype(dtype))


@lru_cache(maxsize=64)
def _lattice_to_grid(lattice_shape, grid_shape):
    return tuple(interp_matrix(node_positions(a), cell_centers(n))
                 for a, n in zip(lattice_shape, grid_shape))


@lru_cache(maxsize=64)
def _lattice_to_lattice(src, dst):
    return tuple(interp_matrix(node_positions(a), node_positions(b)) for a, b in zip(src, dst))


def _coeff_array(C):
    return np.asarray(getattr(C, "C", C))


def horner(C, t):
    """``sum_j C[..., j, :] t^j`` on the lattice, shape (a, a, a, 3)."""
    c = _coeff_array(C)
    acc = c[:, :, :, -1, :].copy()
    for j in range(c.shape[3] - 2, -1, -1):
        acc *= t
        acc += c[:, :, :, j, :]
    return acc


def eval_warp(C, t, shape):
    """Displacement field ``(Z, Y, X, 3)`` at time ``t`` on a volume grid of ``shape``."""
    c = _coeff_array(C)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    mats = _lattice_to_grid(c.shape[:3], tuple(shape))
    field = separable_apply([m.astype(c.dtype) for m in mats], horner(c, t))
    return field.astype(c.dtype, copy=False)


def eval_warp_vjp(coeff_shape, t, grad_field, dtype=None):
    """Gradient wrt the coefficients of ``<grad_field, eval_warp(C, t)>``."""
    g = np.asarray(grad_field)
    mats = _lattice_to_grid(tuple(coeff_shape[:3]), g.shape[:3])
    glat = separable_apply_transpose([m.astype(g.dtype) for m in mats], g)
    powers = t ** np.arange(coeff_shape[3])
    out = glat[:, :, :, None, :] * powers.astype(g.dtype)[None, None, None, :, None]
    return out.astype(dtype or g.dtype, copy=False)


def upsample_coeffs(C, new_alpha):
    """Trilinearly refine the lattice to ``new_alpha`` nodes per axis.

    Values at nodes shared by both lattices are kept exactly.
    """
    c = _coeff_array(C)
    a = c.shape[0]
    if new_alpha < a:
        raise ValueError(f"cannot shrink the lattice from {a} to {new_alpha}")
    if new_alpha == a:
        return MotionCoeffs(c.copy())
    mats = _lattice_to_lattice(c.shape[:3], (new_alpha,) * 3)
    return MotionCoeffs(separable_apply(mats, c).astype(c.dtype))


# ---------------------------------------------------------------------------
# Trilinear backward warping
# ---------------------------------------------------------------------------


def _corners(shape, W):
    """Flat indices and weights of the 8 interpolation corners per output voxel.

    Returns ``(idx, w, dw)`` where ``idx`` and ``w`` are lists over corners and
    ``dw[c][a]`` is d w_c / d (displacement component a) in box units.
    Out-of-range corners get a clamped index and weight 0.
    """
    nz, ny, nx = shape
    dims = (nx, ny, nz)
    strides = (1, nx, nx * ny)
    axes = []  # per axis: (index pair, masked weight pair, mask pair) or None
    for a, n in enumerate(dims):
        if n == 1:
            axes.append(None)
            continue
        bshape = [1, 1, 1]
        bshape[2 - a] = n
        # index space: cell i sits at i, so W = 0 lands exactly on the cell
        u = np.arange(n, dtype=np.float64).reshape(bshape) + W[..., a] * (n / 2.0)
        i0 = np.floor(u)
        f = (u - i0).astype(W.dtype)
        i0 = i0.astype(np.int64)
        i1 = i0 + 1
        m0 = ((i0 >= 0) & (i0 < n)).astype(W.dtype)
        m1 = ((i1 >= 0) & (i1 < n)).astype(W.dtype)
        idx = (np.clip(i0, 0, n - 1) * strides[a], np.clip(i1, 0, n - 1) * strides[a])
        axes.append((idx, ((1.0 - f) * m0, f * m1), (m0, m1)))
    idx, wts, dws = [], [], []
    for corner in range(8):
        bits = [(corner >> a) & 1 for a in range(3)]
        if any(b and ax is None for b, ax in zip(bits, axes)):
            continue
        live = [a for a in range(3) if axes[a] is not None]
        flat = sum(axes[a][0][bits[a]] for a in live)
        flat = np.broadcast_to(flat, shape)
        w = np.ones(shape, dtype=W.dtype)
        for a in live:
            w = w * axes[a][1][bits[a]]
        dw = [None, None, None]
        for a in live:
            d = (dims[a] / 2.0) * (1.0 if bits[a] else -1.0) * axes[a][2][bits[a]]
            for b in live:
                if b != a:
                    d = d * axes[b][1][bits[b]]
            dw[a] = np.broadcast_to(d, shape).astype(W.dtype, copy=False)
        idx.append(flat)
        wts.append(w)
        dws.append(dw)
    return idx, wts, dws


def _check(template, W):
    t = as_array(template)
    W = np.asarray(W)
    if t.ndim != 3 or W.shape != t.shape + (3,):
        raise ValueError(f"displacement shape {W.shape} does not match template {t.shape}")
    return t, W


def warp_volume(template, W):
    """Backward warp: output voxel ``p`` reads ``template(p + W(p))`` trilinearly.

    Samples outside the box read zero.  Axes of length 1 are not
    interpolated, so their displacement component has no effect.
    """
    t, W = _check(template, W)
    idx, wts, _ = _corners(t.shape, W)
    flat = t.ravel()
    out = np.zeros(t.shape, dtype=np.result_type(t.dtype, W.dtype))
    for i, w in zip(idx, wts):
        out += w * flat[i]
    return out


def warp_vjp(template, W, cotangent):
    """Exact VJP of :func:`warp_volume`: ``(grad wrt template, grad wrt W)``."""
    t, W = _check(template, W)
    cot = np.asarray(cotangent)
    if cot.shape != t.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match {t.shape}")
    idx, wts, dws = _corners(t.shape, W)
    dtype = np.result_type(t.dtype, W.dtype, cot.dtype)
    flat = t.ravel()
    g_t = np.zeros(t.size, dtype=np.float64)
    g_w = np.zeros(W.shape, dtype=dtype)
    for i, w, dw in zip(idx, wts, dws):
        g_t += np.bincount(i.ravel(), weights=(w * cot).ravel(), minlength=t.size)
        vals = flat[i] * cot
        for a in range(3):
            if dw[a] is not None:
                g_w[..., a] += dw[a] * vals
    return g_t.reshape(t.shape).astype(dtype), g_w


# ---------------------------------------------------------------------------
# Spatial total variation of the coefficients
# ---------------------------------------------------------------------------


def tv_spatial(C):
    """Anisotropic L1 variation of the coefficient lattice and its subgradient.

    The value is the sum over (order, component) channels of the mean
    absolute forward difference, the mean taken over all neighbor pairs along
    the three lattice axes.  A lattice with one node per axis has value 0.
    """
    c = _coeff_array(C)
    grad = np.zeros_like(c)
    diffs = []
    for ax in range(3):
        if c.shape[ax] > 1:
            diffs.append((ax, np.diff(c, axis=ax)))
    pairs = sum(d.shape[0] * d.shape[1] * d.shape[2] for _, d in diffs)
    if pairs == 0:
        return 0.0, grad
    value = 0.0
    for ax, d in diffs:
        value += float(np.abs(d).sum(dtype=np.float64))
        s = np.sign(d) / pairs
        lo = [slice(None)] * 5
        hi = [slice(None)] * 5
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        grad[tuple(hi)] += s
        grad[tuple(lo)] -= s
    return value / pairs, grad
