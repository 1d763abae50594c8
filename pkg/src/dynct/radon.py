"""Parallel-beam Radon transform on the normalized box, plus FBP and SART.

Each z-slice projects independently (rotation about z).  A view at angle
theta integrates along the line ``x cos(theta) + y sin(theta) = r``; rays are
sampled every half voxel, the volume is read by bilinear interpolation with
zero padding and each sample is weighted by the physical step length.  The
resulting per-view weights are assembled once into a sparse matrix, so the
adjoint is the exact transpose of the forward map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import cell_centers
from .volumes import ScanSchedule, Volume3, Volume4, as_array, read_raw, write_raw

SART_FLOOR = 1e-8


class RadonOperator:
    """Discrete parallel-beam projector for ``side x side`` slices.

    Parameters
    ----------
    side : int
        In-plane volume size; slices are ``(side, side)``.
    angles_deg : array_like
        View angles in degrees, one per projection.
    n_det : int, optional
        Detector bins spanning [-1, 1], cell-centered.  Defaults to ``side``.
    step : float
        Ray sampling step in voxels.
    """

    def __init__(self, side, angles_deg, n_det=None, step=0.5):
        if side < 1:
            raise ValueError("side must be positive")
        if step <= 0:
            raise ValueError("step must be positive")
        self.side = int(side)
        self.n_det = int(n_det or side)
        self.step = float(step)
        angles = np.array(angles_deg, dtype=np.float64).reshape(-1)
        angles.flags.writeable = False
        self.angles_deg = angles
        self._cache = {}

    @classmethod
    def from_schedule(cls, schedule, side, n_det=None, step=0.5):
        return cls(side, schedule.angles_deg, n_det, step)

    @property
    def n_angles(self):
        return self.angles_deg.size

    @property
    def spacing(self):
        return 2.0 / self.side

    @property
    def det_spacing(self):
        return 2.0 / self.n_det

    def _build(self, i):
        theta = math.radians(self.angles_deg[i])
        c, s = math.cos(theta), math.sin(theta)
        dx = self.spacing
        h = self.step * dx
        n_s = int(math.ceil(2.0 * math.sqrt(2.0) / h))
        along = (np.arange(n_s) - 0.5 * (n_s - 1)) * h
        r = cell_centers(self.n_det)
        x = r[:, None] * c - along[None, :] * s
        y = r[:, None] * s + along[None, :] * c
        u = (x + 1.0) / dx - 0.5
        v = (y + 1.0) / dx - 0.5
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu = u - i0
        fv = v - j0
        bins = np.broadcast_to(np.arange(self.n_det)[:, None], u.shape)
        rows, cols, vals = [], [], []
        n = self.side
        for dj, di, w in ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu),
                          (1, 0, fv * (1 - fu)), (1, 1, fv * fu)):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (w > 0)
            rows.append(bins[ok])
            cols.append(jj[ok] * n + ii[ok])
            vals.append(w[ok] * h)
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_det, n * n),
        )
        return mat.tocsr()

    def matrix(self, i, dtype=np.float64):
        """Sparse ``(n_det, side*side)`` matrix of view ``i``."""
        dtype = np.dtype(dtype)
        key = (int(i), dtype.str)
        mat = self._cache.get(key)
        if mat is None:
            base = self._cache.get((int(i), np.dtype(np.float64).str))
            if base is None:
                base = self._build(int(i))
                self._cache[(int(i), np.dtype(np.float64).str)] = base
            mat = base if dtype == np.float64 else base.astype(dtype)
            self._cache[key] = mat
        return mat

    def _indices(self, angle_indices):
        if angle_indices is None:
            return np.arange(self.n_angles)
        idx = np.asarray(angle_indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_angles):
            raise ValueError("angle index out of range")
        return idx

    def __repr__(self):
        return f"RadonOperator(side={self.side}, n_det={self.n_det}, n_angles={self.n_angles})"


def _float(a):
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)


def radon_forward(op, vol, angle_indices=None):
    """Project ``vol`` (Z, side, side) at the selected views.

    Returns an array of shape ``(n_views, Z, n_det)`` in the volume's dtype.
    """
    a = _float(as_array(vol))
    if a.ndim != 3 or a.shape[1:] != (op.side, op.side):
        raise ValueError(f"volume shape {a.shape} does not match operator side {op.side}")
    idx = op._indices(angle_indices)
    flat = a.reshape(a.shape[0], -1).T
    out = np.empty((idx.size, a.shape[0], op.n_det), dtype=a.dtype)
    for k, i in enumerate(idx):
        out[k] = (op.matrix(i, a.dtype) @ flat).T
    return out


def radon_adjoint(op, sino, angle_indices=None):
    """Exact transpose of :func:`radon_forward`; returns a ``(Z, side, side)`` array."""
    q = _float(as_array(sino))
    idx = op._indices(angle_indices)
    if q.ndim != 3 or q.shape[0] != idx.size or q.shape[2] != op.n_det:
        raise ValueError(f"sinogram shape {q.shape} does not match {idx.size} views x {op.n_det} bins")
    out = np.zeros((op.side * op.side, q.shape[1]), dtype=q.dtype)
    for k, i in enumerate(idx):
        out += op.matrix(i, q.dtype).T @ q[k].T
    return out.T.reshape(q.shape[1], op.side, op.side)


def radon_vjp(op, cotangent, angle_indices=None):
    """Vector-Jacobian product of the (linear) projector: its adjoint."""
    return radon_adjoint(op, cotangent, angle_indices)


# ---------------------------------------------------------------------------
# Sinograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sinogram:
    """Measurements ``(N views, Z rows, R bins)`` with their acquisition schedule."""

    data: np.ndarray
    schedule: ScanSchedule

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"sinogram must be rank 3, got shape {data.shape}")
        if data.shape[0] != self.schedule.n_proj:
            raise ValueError(f"{data.shape[0]} rows but schedule has {self.schedule.n_proj} views")
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram values must be finite")
        view = data.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_det(self):
        return self.data.shape[2]

    @property
    def planar(self):
        return self.data.shape[1] == 1


def write_sinogram(sino, path):
    sch = sino.schedule
    meta = {
        "kind": "sinogram",
        "angles_deg": [float(a) for a in sch.angles_deg],
        "times": [float(t) for t in sch.times],
        "arc": list(sch.arc),
        "endpoint": bool(sch.endpoint),
        "extent": [-1.0, 1.0],
    }
    return write_raw(path, sino.data, meta)


def read_sinogram(path):
    from .errors import VolumeFormatError

    arr, meta = read_raw(path, "sinogram")
    if arr.ndim != 3:
        raise VolumeFormatError(f"sinogram shape must be [N, Z, R], got {list(arr.shape)}")
    try:
        sch = ScanSchedule(meta["angles_deg"], meta["times"], tuple(meta["arc"]),
                           bool(meta.get("endpoint", True)))
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"invalid sinogram schedule: {exc}") from exc
    if sch.n_proj != arr.shape[0]:
        raise VolumeFormatError(f"sidecar lists {sch.n_proj} views for {arr.shape[0]} rows")
    return Sinogram(arr, sch)


def _check_schedule(op, schedule):
    if op.n_angles != schedule.n_proj or not np.allclose(op.angles_deg, schedule.angles_deg):
        raise ValueError("operator angles do not match the schedule")


def frame_for_times(scene_times, times, nearest=False):
    """Index of the scene frame used for each acquisition time."""
    scene_times = np.asarray(scene_times, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    dist = np.abs(scene_times[None, :] - times[:, None])
    pick = np.argmin(dist, axis=1)
    if not nearest:
        missing = dist[np.arange(times.size), pick] > 1e-9
        if np.any(missing):
            raise ValueError(
                f"no scene frame at t={times[missing][0]:.6g}; enable nearest-frame assignment")
    return pick


def project_dynamic(op, scene, schedule, nearest=False):
    """Simulate an acquisition: view ``i`` sees the scene frozen at ``t_i``."""
    _check_schedule(op, schedule)
    if isinstance(scene, Volume3):
        scene = Volume4(scene.data[None], [0.0])
        nearest = True
    data = np.asarray(scene.data)
    pick = frame_for_times(scene.times, schedule.times, nearest)
    out = np.empty((schedule.n_proj, data.shape[1], op.n_det), dtype=np.result_type(data.dtype, np.float32))
    for f in np.unique(pick):
        rows = np.flatnonzero(pick == f)
        out[rows] = radon_forward(op, data[f], rows)
    return Sinogram(out, schedule)


# ---------------------------------------------------------------------------
# Classical reconstruction
# ---------------------------------------------------------------------------


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def ramp_kernel(n, det_spacing=1.0):
    """Band-limited ramp taps for lags ``0..n-1`` in FFT order.

    Center tap ``1 / (4 dr)``, zero at even lags, ``-1 / (pi^2 d^2 dr)`` at odd
    lags ``d``; lags beyond ``n / 2`` wrap to negative values.
    """
    d = np.arange(n)
    d = np.where(d < n // 2, d, d - n)
    h = np.zeros(n)
    h[d == 0] = 0.25
    odd = (d % 2) != 0
    h[odd] = -1.0 / (np.pi**2 * d[odd].astype(np.float64) ** 2)
    return h / det_spacing


def ramp_filter(sino, window="none", det_spacing=None):
    """Ramp-filter every detector row (frequency in cycles per box unit).

    The band-limited ramp is built from its spatial taps and applied in the
    frequency domain on rows zero-padded to the next power of two >= 2R, which
    makes the product a linear (not circular) convolution over the row.
    ``window="hann"`` apodizes the response.
    """
    q = _float(as_array(sino))
    n_det = q.shape[-1]
    if n_det < 4:
        raise ValueError("ramp filter needs at least 4 detector bins")
    if window not in ("none", "hann"):
        raise ValueError(f"unknown window {window!r}")
    dr = det_spacing if det_spacing is not None else 2.0 / n_det
    n = _next_pow2(2 * n_det)
    resp = np.fft.rfft(ramp_kernel(n)).real / dr
    if window == "hann":
        f = np.fft.rfftfreq(n)
        resp = resp * (0.5 + 0.5 * np.cos(2.0 * np.pi * f))
    out = np.fft.irfft(np.fft.rfft(q, n=n, axis=-1) * resp, n=n, axis=-1)
    return out[..., :n_det].astype(q.dtype, copy=False)


def circle_mask(side):
    """Cells whose centers lie inside the inscribed circle."""
    c = cell_centers(side)
    return (c[None, :] ** 2 + c[:, None] ** 2) <= 1.0


def fbp(op, sino, window="none"):
    """Filtered backprojection, masked to the inscribed circle.

    Every view is weighted by pi / N, i.e. the views are taken to cover a
    half turn; arcs shorter than that are not renormalized.
    """
    q = _float(as_array(sino))
    if q.shape[0] != op.n_angles:
        raise ValueError("sinogram and operator disagree on the number of views")
    filt = ramp_filter(q, window, op.det_spacing)
    # the adjoint carries a factor (pixel area / bin width) per view
    scale = (math.pi / op.n_angles) * op.det_spacing / op.spacing**2
    vol = radon_adjoint(op, filt) * scale
    vol *= circle_mask(op.side)[None]
    return Volume3(vol.astype(np.float32))


def sart(op, sino, iters=20, relax=1.0, init=None):
    """Simultaneous algebraic reconstruction with a nonnegativity clamp.

    Each sweep applies ``x += relax * A^T(res / A 1) / A^T 1`` over all views
    at once.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0.0 < relax <= 1.0:
        raise ValueError("relax must lie in (0, 1]")
    q = np.asarray(as_array(sino), dtype=np.float64)
    nz = q.shape[1]
    ones = np.ones((nz, op.side, op.side))
    row = np.maximum(radon_forward(op, ones), SART_FLOOR)
    col = np.maximum(radon_adjoint(op, np.ones_like(q)), SART_FLOOR)
    x = np.zeros_like(ones) if init is None else np.array(as_array(init), dtype=np.float64)
    if x.shape != ones.shape:
        raise ValueError(f"init shape {x.shape} does not match {ones.shape}")
    for _ in range(int(iters)):
        res = q - radon_forward(op, x)
        x += relax * radon_adjoint(op, res / row) / col
        np.maximum(x, 0.0, out=x)
    return Volume3(x.astype(np.float32))
