"""Coordinate network for the static template.

Coordinates are lifted with Gaussian random Fourier features

    gamma(v) = [cos(2 pi kappa B v), sin(2 pi kappa B v)]

and fed to a four-layer ReLU perceptron with a scalar linear output.  The
forward pass returns a tape of cached activations; :func:`inr_backward`
computes exact reverse-mode gradients for all parameters and, on request,
the input coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blob import load_tensors, save_tensors
from .errors import NumericFailure
from .grid import cell_centers
from .volumes import Volume3, volume_shape_for

log = logging.getLogger(__name__)

N_LAYERS = 4


@dataclass
class GrffParams:
    B: np.ndarray  # (m, 3), never optimized
    kappa: float

    @property
    def m(self):
        return self.B.shape[0]

    @property
    def width(self):
        return 2 * self.m


@dataclass
class MlpParams:
    """Weights ``(out, in)`` and biases ``(out,)`` for widths [2m, h, h, h, 1]."""

    weights: list
    biases: list

    @property
    def hidden(self):
        return self.weights[0].shape[0]


@dataclass
class InrModel:
    grff: GrffParams
    mlp: MlpParams
    seed: int = 0

    @property
    def dtype(self):
        return self.mlp.weights[0].dtype

    def params(self):
        """Trainable arrays by name; these are the live arrays, not copies."""
        out = {}
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def signature(self):
        return (self.grff.B.shape,) + tuple(w.shape for w in self.mlp.weights)

    def astype(self, dtype):
        return InrModel(
            GrffParams(self.grff.B.astype(dtype), self.grff.kappa),
            MlpParams([w.astype(dtype) for w in self.mlp.weights],
                      [b.astype(dtype) for b in self.mlp.biases]),
            self.seed,
        )

    def copy(self):
        return self.astype(self.dtype)


def init_inr(seed=0, m=128, hidden=256, kappa=1.0, dtype=np.float32):
    """Seeded model: ``B ~ N(0, 1)``; weights and biases ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    if m < 1 or hidden < 1:
        raise ValueError("m and hidden width must be >= 1")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((m, 3))
    widths = [2 * m, hidden, hidden, hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
    return InrModel(GrffParams(B.astype(dtype), float(kappa)), MlpParams(weights, biases), int(seed))


def _phase(g, v):
    return (2.0 * np.pi * g.kappa) * (v @ g.B.T)


def grff_encode(g, v):
    """Fourier features of coordinates ``v`` (n, 3) -> (n, 2m): cosines, then sines."""
    v = np.asarray(v, dtype=g.B.dtype)
    squeeze = v.ndim == 1
    p = _phase(g, np.atleast_2d(v))
    enc = np.concatenate([np.cos(p), np.sin(p)], axis=-1)
    return enc[0] if squeeze else enc


@dataclass
class Tape:
    """Activations cached by :func:`inr_forward` for the matching backward pass."""

    signature: tuple
    points: np.ndarray
    phase: np.ndarray
    inputs: list = field(default_factory=list)  # input of each layer (post-ReLU)


def inr_forward(model, points, iteration=None):
    """Evaluate the template at ``points`` (n, 3); returns ``(values (n,), tape)``."""
    pts = np.asarray(points, dtype=model.dtype)
    g = model.grff
    phase = _phase(g, pts)
    x = np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)
    inputs = []
    ws, bs = model.mlp.weights, model.mlp.biases
    for i in range(N_LAYERS):
        inputs.append(x)
        x = x @ ws[i].T
        x += bs[i]
        if i < N_LAYERS - 1:
            np.maximum(x, 0.0, out=x)
    out = x[:, 0]
    if not np.all(np.isfinite(out)):
        raise NumericFailure("template network produced non-finite values", iteration)
    return out, Tape(model.signature(), pts, phase, inputs)


def inr_backward(model, tape, cotangent, need_points=True):
    """Reverse-mode pass: ``(grads by parameter name, grad wrt points or None)``."""
    if tape.signature != model.signature():
        raise ValueError("tape was recorded with a different model layout")
    cot = np.asarray(cotangent, dtype=model.dtype).reshape(-1)
    if cot.size != tape.points.shape[0]:
        raise ValueError(f"cotangent has {cot.size} entries for {tape.points.shape[0]} points")
    ws = model.mlp.weights
    grads = {}
    gz = cot[:, None]
    for i in reversed(range(N_LAYERS)):
        a = tape.inputs[i]
        grads[f"W{i}"] = gz.T @ a
        grads[f"b{i}"] = gz.sum(axis=0)
        if i == 0 and not need_points:
            break
        ga = gz @ ws[i]
        if i > 0:
            ga *= a > 0  # ReLU of the previous layer
        gz = ga
    if not need_points:
        return grads, None
    m = model.grff.m
    gphase = np.cos(tape.phase) * gz[:, m:] - np.sin(tape.phase) * gz[:, :m]
    gpts = (2.0 * np.pi * model.grff.kappa) * (gphase @ model.grff.B)
    return grads, gpts


def coord_grid(shape, jitter=False, rng=None, dtype=np.float32):
    """Cell-centered ``(x, y, z)`` points of a (Z, Y, X) grid, flattened in C order.

    With ``jitter`` every point moves uniformly within its own cell; axes of
    length 1 (planar grids) stay at their center.
    """
    nz, ny, nx = shape
    z, y, x = np.meshgrid(cell_centers(nz), cell_centers(ny), cell_centers(nx), indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)
    if jitter:
        if rng is None:
            raise ValueError("jitter needs a random generator")
        half = np.array([1.0 / nx, 1.0 / ny, 1.0 / nz])
        half[[nx == 1, ny == 1, nz == 1]] = 0.0
        pts = pts + rng.uniform(-1.0, 1.0, pts.shape) * half
    return pts.astype(dtype)


def clamp_nonnegative(values):
    """Clip negatives to zero; returns ``(clamped, negative_mass)``.

    ``negative_mass`` equals the L1 distance between input and output.
    """
    values = np.asarray(values)
    neg = float(-values[values < 0].sum(dtype=np.float64))
    return np.maximum(values, 0), neg


def evaluate(model, points, chunk=65536):
    """Template values at many points, evaluated in chunks without a tape."""
    pts = np.asarray(points)
    out = np.empty(pts.shape[0], dtype=model.dtype)
    for s in range(0, pts.shape[0], chunk):
        out[s:s + chunk], _ = inr_forward(model, pts[s:s + chunk])
    return out


def query_template(model, side, jitter=False, seed=None, planar=False, clamp=True):
    """Render the template on a ``side``-sized cell-centered grid.

    Works at any resolution without retraining.  ``clamp`` (the export
    default) zeroes negative values; the removed mass is logged.
    """
    if side < 2:
        raise ValueError("side must be >= 2")
    shape = volume_shape_for(side, planar)
    rng = np.random.default_rng(seed) if jitter else None
    pts = coord_grid(shape, jitter, rng, model.dtype)
    vals = evaluate(model, pts).reshape(shape)
    if clamp:
        vals, neg = clamp_nonnegative(vals)
        log.debug("template export at side %d clamped negative mass %.6g", side, neg)
    return Volume3(vals)


def save_model(model, directory, name="inr"):
    tensors = {"B": model.grff.B}
    tensors.update(model.params())
    save_tensors(directory, name, tensors, kappa=model.grff.kappa, m=model.grff.m,
                 hidden=model.mlp.hidden, seed=model.seed)


def load_model(directory, name="inr"):
    t, man = load_tensors(directory, name)
    weights = [t[f"W{i}"] for i in range(N_LAYERS)]
    biases = [t[f"b{i}"] for i in range(N_LAYERS)]
    return InrModel(GrffParams(t["B"], float(man["kappa"])), MlpParams(weights, biases),
                    int(man.get("seed", 0)))
