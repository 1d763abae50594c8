"""Joint template/motion reconstruction by analysis-by-synthesis.

Every iteration renders the template network on a jittered voxel grid,
warps it to the acquisition time of a random batch of views, projects each
warped frame at its own angle and compares with the measured rows under an
L1 data term plus a spatial TV penalty on the motion coefficients.
Gradients flow back through the projector, the warp, the polynomial and the
network, and Adam updates network weights and coefficients together.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .blob import load_tensors, save_tensors
from .errors import NumericFailure
from .inr import coord_grid, init_inr, inr_backward, inr_forward, load_model, save_model
from .motion import (
    MotionCoeffs, eval_warp, eval_warp_vjp, init_motion, tv_spatial, upsample_coeffs,
    warp_volume, warp_vjp,
)
from .radon import RadonOperator, radon_forward, radon_vjp
from .volumes import ScanSchedule, volume_shape_for

log = logging.getLogger(__name__)

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class ReconConfig:
    """Hyperparameters of one reconstruction run.

    ``alpha_schedule`` is a list of ``(iteration, alpha)`` pairs; ``None``
    selects the default doubling schedule.  ``beta`` (grid side) is taken
    from the sinogram when left unset.  ``motion_lr`` overrides ``lr`` for
    the motion coefficients; ``fit_motion=False`` freezes them at zero
    (static template-only reconstruction).
    """

    lambda1: float = 1.0
    lambda2: float = 0.001
    lr: float = 0.001
    iters: int = 1000
    kappa: float = 1.0
    m: int = 128
    hidden: int = 256
    beta: Optional[int] = None
    k: int = 5
    alpha_schedule: Optional[list] = None
    angles_per_batch: int = 10
    seed: int = 0
    precision: str = "float32"
    init_scale: float = 0.0
    motion_lr: Optional[float] = None
    fit_motion: bool = True

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be positive")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be nonnegative")
        if self.lr <= 0 or (self.motion_lr is not None and self.motion_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.iters < 1 or self.angles_per_batch < 1:
            raise ValueError("iters and angles_per_batch must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
        if self.beta is not None and self.beta < 2:
            raise ValueError("beta must be >= 2")
        if self.alpha_schedule is not None:
            sched = [(int(i), int(a)) for i, a in self.alpha_schedule]
            if not sched or sched[0][0] != 0:
                raise ValueError("alpha_schedule must start at iteration 0")
            for (i0, a0), (i1, a1) in zip(sched, sched[1:]):
                if i1 < i0 or a1 < a0:
                    raise ValueError("alpha_schedule must be nondecreasing in iteration and alpha")
            if min(a for _, a in sched) < 1:
                raise ValueError("alpha must be >= 1")
            if self.beta is not None and sched[-1][1] > self.beta:
                raise ValueError("alpha cannot exceed beta")
            self.alpha_schedule = sched
        if self.k < 3:
            warnings.warn("motion polynomials below degree 3 tend to underfit nonlinear motion",
                          stacklevel=2)

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]

    def to_dict(self):
        d = asdict(self)
        if self.alpha_schedule is not None:
            d["alpha_schedule"] = [list(p) for p in self.alpha_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self):
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def default_alpha_schedule(iters, beta):
    """Start at 2 and double at 20%, 40% and 60% of the run, capped at min(16, beta // 4)."""
    cap = max(1, min(16, beta // 4))
    sched = []
    for frac, a in zip((0.0, 0.2, 0.4, 0.6), (2, 4, 8, 16)):
        a = min(a, cap)
        it = int(round(frac * iters))
        if sched and sched[-1][1] == a:
            continue
        sched.append((it, a))
    return sched


def alpha_for_iteration(cfg, iteration):
    """Lattice size in effect at ``iteration`` (piecewise-constant lookup)."""
    if cfg.alpha_schedule is not None:
        sched = cfg.alpha_schedule
    else:
        if cfg.beta is None:
            raise ValueError("the default alpha schedule needs beta")
        sched = default_alpha_schedule(cfg.iters, cfg.beta)
    alpha = sched[0][1]
    for it, a in sched:
        if iteration >= it:
            alpha = a
    return alpha


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state, params, grads, lr):
    """Bias-corrected Adam update of every array in ``params``, in place.

    ``lr`` is a float or a mapping from parameter name to learning rate.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient", state.step, name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= ((rate / bc1) * m / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


class JointLoss(NamedTuple):
    value: float
    cotangent: np.ndarray
    grad_coeffs: np.ndarray
    data_term: float
    tv_term: float


def joint_loss(synth, measured, C, lambda1=1.0, lambda2=0.001):
    """``lambda1 * mean|synth - measured| + lambda2 * TV(C)`` with its gradients.

    The cotangent is the L1 subgradient (zero at ties) wrt ``synth``.
    """
    synth = np.asarray(synth)
    measured = np.asarray(measured)
    if synth.shape != measured.shape:
        raise ValueError(f"slab shapes differ: {synth.shape} vs {measured.shape}")
    diff = synth - measured
    data = lambda1 * float(np.abs(diff).mean(dtype=np.float64))
    cot = (np.sign(diff) * (lambda1 / diff.size)).astype(synth.dtype, copy=False)
    tv, gtv = tv_spatial(C)
    tv_term = lambda2 * tv
    return JointLoss(data + tv_term, cot, (lambda2 * gtv).astype(gtv.dtype, copy=False), data, tv_term)


class Problem(NamedTuple):
    op: RadonOperator
    measured: np.ndarray  # (N, Z, R)
    times: np.ndarray
    shape: tuple
    lambda1: float
    lambda2: float
    static: bool = False  # skip the (identity) warp when motion is frozen


def objective(problem, model, coeffs, points, indices, iteration=None):
    """Loss and gradients for one batch of views.

    Returns ``(loss, model_grads, coeff_grad)`` where ``loss`` is an
    :class:`JointLoss`.
    """
    C = coeffs.C
    vals, tape = inr_forward(model, points, iteration)
    template = vals.reshape(problem.shape)
    fields = []
    synth = np.empty((len(indices),) + problem.measured.shape[1:], dtype=template.dtype)
    for k, i in enumerate(indices):
        if problem.static:
            frame = template
        else:
            W = eval_warp(C, float(problem.times[i]), problem.shape)
            fields.append(W)
            frame = warp_volume(template, W)
        synth[k] = radon_forward(problem.op, frame, [i])[0]
    loss = joint_loss(synth, problem.measured[indices], C, problem.lambda1, problem.lambda2)
    g_template = np.zeros(problem.shape, dtype=template.dtype)
    g_coeff = loss.grad_coeffs.astype(C.dtype)
    for k, i in enumerate(indices):
        g_frame = radon_vjp(problem.op, loss.cotangent[k:k + 1], [i])
        if problem.static:
            g_template += g_frame
            continue
        gt, gw = warp_vjp(template, fields[k], g_frame)
        g_template += gt
        g_coeff += eval_warp_vjp(C.shape, float(problem.times[i]), gw, C.dtype)
    grads, _ = inr_backward(model, tape, g_template.ravel(), need_points=False)
    return loss, grads, g_coeff


# ---------------------------------------------------------------------------
# Artifact
# ---------------------------------------------------------------------------


@dataclass
class ReconArtifact:
    """Everything needed to render the reconstruction at any resolution and time."""

    model: object
    motion: MotionCoeffs
    config: ReconConfig
    schedule: ScanSchedule
    history: list
    planar: bool

    def save(self, directory):
        """Write the checkpoint directory atomically (sibling temp dir + rename)."""
        directory = Path(directory)
        directory.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
        try:
            save_model(self.model, tmp, "inr")
            save_tensors(tmp, "motion", {"C": self.motion.C}, alpha=self.motion.alpha,
                         degree=self.motion.degree)
            (tmp / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")
            sch = self.schedule
            (tmp / "schedule.json").write_text(json.dumps({
                "angles_deg": [float(a) for a in sch.angles_deg],
                "times": [float(t) for t in sch.times],
                "arc": list(sch.arc), "endpoint": bool(sch.endpoint), "planar": self.planar,
            }, indent=2) + "\n")
            with open(tmp / "loss_history.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "data_loss", "tv_loss", "alpha"])
                for row in self.history:
                    w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3]])
            if directory.exists():
                old = directory.with_name(directory.name + ".old")
                if old.exists():
                    shutil.rmtree(old)
                os.replace(directory, old)
                os.replace(tmp, directory)
                shutil.rmtree(old)
            else:
                os.replace(tmp, directory)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        model = load_model(directory, "inr")
        t, _ = load_tensors(directory, "motion")
        cfg = ReconConfig.from_dict(json.loads((directory / "config.json").read_text()))
        s = json.loads((directory / "schedule.json").read_text())
        sch = ScanSchedule(s["angles_deg"], s["times"], tuple(s["arc"]), s["endpoint"])
        history = []
        with open(directory / "loss_history.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                history.append((int(row["iteration"]), float(row["data_loss"]),
                                float(row["tv_loss"]), int(row["alpha"])))
        return cls(model, MotionCoeffs(t["C"]), cfg, sch, history, bool(s["planar"]))

    @property
    def beta(self):
        return self.config.beta

    @property
    def data_losses(self):
        return np.array([h[1] for h in self.history])


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


def _resample_moments(state, name, new_alpha):
    if name in state.m:
        state.m[name] = upsample_coeffs(state.m[name], new_alpha).C
        state.v[name] = np.maximum(upsample_coeffs(state.v[name], new_alpha).C, 0.0)


def prepare(measured, cfg):
    """Resolve ``cfg`` against the sinogram and build the fixed problem data."""
    n_views, nz, n_det = measured.shape
    beta = cfg.beta or n_det
    if n_det != beta:
        raise ValueError(f"sinogram has {n_det} detector bins but beta is {beta}")
    if nz not in (1, beta):
        raise ValueError(f"sinogram has {nz} rows; expected 1 (planar) or beta={beta}")
    cfg = replace(cfg, beta=beta)
    planar = nz == 1
    op = RadonOperator.from_schedule(measured.schedule, beta, n_det)
    problem = Problem(op, np.asarray(measured.data, dtype=cfg.dtype),
                      np.asarray(measured.schedule.times), volume_shape_for(beta, planar),
                      cfg.lambda1, cfg.lambda2, not cfg.fit_motion)
    return cfg, problem


def reconstruct(measured, cfg, checkpoint_dir=None, checkpoint_every=0, progress=None):
    """Optimize template and motion against ``measured`` (a :class:`~dynct.radon.Sinogram`).

    With ``checkpoint_dir`` the artifact is written every ``checkpoint_every``
    iterations (if positive), at the end, and on interruption or numeric
    failure before the exception propagates.  ``progress`` is called as
    ``progress(iteration, loss)`` after every step.
    """
    cfg, problem = prepare(measured, cfg)
    dtype = cfg.dtype
    rng = np.random.default_rng(cfg.seed)
    model = init_inr(cfg.seed, cfg.m, cfg.hidden, cfg.kappa, dtype)
    coeffs = init_motion(alpha_for_iteration(cfg, 0), cfg.k, cfg.init_scale, cfg.seed + 1, dtype)
    n_views = measured.shape[0]
    batch = min(cfg.angles_per_batch, n_views)
    adam = AdamState()
    rates = {name: cfg.lr for name in model.params()}
    rates["C"] = cfg.motion_lr if cfg.motion_lr is not None else cfg.lr
    history = []

    def artifact():
        return ReconArtifact(model, coeffs, cfg, measured.schedule, list(history),
                             problem.shape[0] == 1)

    it = 0
    try:
        for it in range(cfg.iters):
            alpha = alpha_for_iteration(cfg, it)
            if alpha != coeffs.alpha:
                coeffs = upsample_coeffs(coeffs, alpha)
                _resample_moments(adam, "C", alpha)
            indices = rng.choice(n_views, size=batch, replace=False)
            points = coord_grid(problem.shape, jitter=True, rng=rng, dtype=dtype)
            loss, grads, g_coeff = objective(problem, model, coeffs, points, indices, it)
            if not np.isfinite(loss.value):
                raise NumericFailure("non-finite loss", it)
            params = model.params()
            if cfg.fit_motion:
                params["C"] = coeffs.C
                grads["C"] = g_coeff
            adam_step(adam, params, grads, rates)
            history.append((it, loss.data_term, loss.tv_term, coeffs.alpha))
            if progress is not None:
                progress(it, loss)
            if checkpoint_dir and checkpoint_every > 0 and (it + 1) % checkpoint_every == 0:
                artifact().save(checkpoint_dir)
    except (KeyboardInterrupt, NumericFailure) as exc:
        if isinstance(exc, NumericFailure) and exc.iteration is None:
            exc.iteration = it
        if checkpoint_dir and history:
            log.warning("saving last checkpoint after iteration %d", history[-1][0])
            artifact().save(checkpoint_dir)
        raise
    result = artifact()
    if checkpoint_dir:
        result.save(checkpoint_dir)
    return result
