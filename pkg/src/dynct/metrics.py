"""Evaluation: PSNR/SSIM, continuous rendering of artifacts, baselines and report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .grid import cell_centers, interp_matrix, separable_apply
from .inr import clamp_nonnegative, coord_grid, evaluate
from .motion import eval_warp, warp_volume
from .volumes import Volume3, Volume4, as_array, sequence_times, volume_shape_for


def psnr(est, gt, peak="auto"):
    """Peak signal-to-noise ratio in dB; ``peak="auto"`` uses ``max(gt)``.

    Identical inputs return ``math.inf``.
    """
    e = as_array(est).astype(np.float64)
    g = as_array(gt).astype(np.float64)
    if e.shape != g.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {g.shape}")
    mse = float(np.mean((e - g) ** 2))
    if mse == 0.0:
        return math.inf
    p = float(g.max()) if peak in ("auto", None) else float(peak)
    return 10.0 * math.log10(p * p / mse)


def _gaussian_taps(win, sigma):
    r = np.arange(win) - (win - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def ssim(est, gt, window=11, k1=0.01, k2=0.03, data_range=None, sigma=1.5):
    """Mean structural similarity, 2D per z-slice and averaged over slices.

    Gaussian-weighted local statistics (``window`` taps, std ``sigma``)
    over the valid region only.  ``data_range`` defaults to the range of
    ``gt`` (1 if ``gt`` is constant).
    """
    e = as_array(est).astype(np.float64)
    g = as_array(gt).astype(np.float64)
    if e.shape != g.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {g.shape}")
    if e.ndim == 2:
        e, g = e[None], g[None]
    if min(e.shape[1:]) < window:
        raise ValueError(f"image side {min(e.shape[1:])} is smaller than the {window}-tap window")
    if data_range is None:
        data_range = float(g.max() - g.min()) or 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    taps = _gaussian_taps(window, sigma)
    pad = (window - 1) // 2

    def blur(a):
        a = correlate1d(a, taps, axis=-1, mode="reflect")
        a = correlate1d(a, taps, axis=-2, mode="reflect")
        return a[..., pad:a.shape[-2] - pad, pad:a.shape[-1] - pad]

    mx, my = blur(e), blur(g)
    vx = blur(e * e) - mx * mx
    vy = blur(g * g) - my * my
    cxy = blur(e * g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(np.mean(smap.reshape(smap.shape[0], -1).mean(axis=1)))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_frames(artifact, side, times, clamp=True):
    """Frames of the reconstructed scene at arbitrary ``times`` and grid ``side``."""
    if side < 2:
        raise ValueError("side must be >= 2")
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    shape = volume_shape_for(side, artifact.planar)
    model = artifact.model
    template = evaluate(model, coord_grid(shape, dtype=model.dtype)).reshape(shape)
    frames = []
    for t in times:
        frame = warp_volume(template, eval_warp(artifact.motion.C, float(t), shape))
        if clamp:
            frame, _ = clamp_nonnegative(frame)
        frames.append(frame.astype(model.dtype, copy=False))
    return Volume4(np.stack(frames), times)


def render_sequence(artifact, side, n_frames):
    """``n_frames`` frames at uniform times over [0, 1] on a ``side`` grid."""
    return render_frames(artifact, side, sequence_times(n_frames))


def trilinear_upsample(vol, new_side):
    """Cell-centered trilinear resampling to ``new_side`` (planar z untouched)."""
    a = as_array(vol)
    nz, ny, nx = a.shape
    if new_side < max(ny, nx):
        raise ValueError(f"cannot upsample side {max(ny, nx)} to {new_side}")
    new_z = 1 if nz == 1 else new_side
    mats = [interp_matrix(cell_centers(n), cell_centers(m))
            for n, m in ((nz, new_z), (ny, new_side), (nx, new_side))]
    return Volume3(separable_apply(mats, a.astype(np.float64)).astype(a.dtype))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    times: np.ndarray
    psnr: list
    ssim: list
    scene: str = ""
    config_digest: str = ""
    peak: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))


def _match(times, gt_times, nearest):
    times = np.asarray(times, dtype=np.float64)
    gt_times = np.asarray(gt_times, dtype=np.float64)
    if len(times) == len(gt_times) and np.allclose(times, gt_times, atol=1e-9):
        return np.arange(len(gt_times))
    if not nearest:
        raise ValueError("method frames do not align with ground-truth frames; "
                         "enable nearest-time matching")
    return np.abs(times[None, :] - gt_times[:, None]).argmin(axis=1)


def compare(methods, gt, scene="", nearest=False, config_digest=""):
    """Per-method per-frame PSNR/SSIM against ``gt`` (a :class:`Volume4`).

    The PSNR peak is ``max(gt)`` over the whole sequence.
    """
    peak = float(np.max(gt.data))
    reports = []
    for label, seq in methods:
        pick = _match(seq.times, gt.times, nearest)
        ps, ss = [], []
        for f, j in enumerate(pick):
            ps.append(psnr(seq.data[j], gt.data[f], peak))
            ss.append(ssim(seq.data[j], gt.data[f], data_range=peak))
        reports.append(MetricsReport(label, np.asarray(gt.times), ps, ss, scene,
                                     config_digest, peak))
    return reports


def _fmt(x):
    return "inf" if math.isinf(x) and x > 0 else f"{x:.6f}"


def _rows(reports):
    for r in reports:
        for f, (t, p, s) in enumerate(zip(r.times, r.psnr, r.ssim)):
            yield [r.method, str(f), f"{t:.6f}", _fmt(p), _fmt(s)]
        yield [r.method, "mean", "", _fmt(r.mean_psnr), _fmt(r.mean_ssim)]


def _ranked(reports):
    return sorted(reports, key=lambda r: -r.mean_psnr)


def reports_to_csv(reports, path=None):
    """CSV with columns method,frame,t,psnr_db,ssim; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "frame", "t", "psnr_db", "ssim"])
    w.writerows(_rows(_ranked(reports)))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def format_table(reports):
    """Fixed-width table, methods ranked by mean PSNR (best first)."""
    head = ["method", "frame", "t", "psnr_db", "ssim"]
    rows = list(_rows(_ranked(reports)))
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
