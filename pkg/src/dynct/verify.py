"""Numerical self-checks: projector adjoint test and finite-difference gradient suites."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .inr import coord_grid, init_inr, inr_backward, inr_forward
from .motion import init_motion, warp_vjp, warp_volume
from .optimize import Problem, objective
from .radon import RadonOperator, radon_adjoint, radon_forward
from .volumes import make_schedule, shepp_logan, volume_shape_for


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: max rel error {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} checks)")


def _rel(a, b, floor=1e-9):
    """Relative mismatch; pairs that are both below ``floor`` count as equal."""
    scale = max(abs(a), abs(b))
    return 0.0 if scale < floor else abs(a - b) / scale


def adjoint_test(side=32, n_angles=30, pairs=20, seed=0, planar=True, tol=1e-5):
    """Worst ``|<Rx, y> - <x, R^T y>| / (|Rx| |y|)`` over random pairs."""
    rng = np.random.default_rng(seed)
    op = RadonOperator(side, np.linspace(0.0, 180.0, n_angles, endpoint=False))
    shape = volume_shape_for(side, planar)
    worst = 0.0
    for _ in range(pairs):
        x = rng.standard_normal(shape)
        y = rng.standard_normal((n_angles, shape[0], op.n_det))
        rx = radon_forward(op, x)
        lhs = float(np.vdot(rx, y))
        rhs = float(np.vdot(x, radon_adjoint(op, y)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(rx) * np.linalg.norm(y)))
    return CheckResult(f"adjoint side={side}", worst, tol, pairs)


def _fd_check(name, f, x, analytic, picks, h, tol):
    worst = 0.0
    for j in picks:
        old = x.flat[j]
        x.flat[j] = old + h
        fp = f()
        x.flat[j] = old - h
        fm = f()
        x.flat[j] = old
        worst = max(worst, _rel((fp - fm) / (2 * h), float(analytic.flat[j])))
    return CheckResult(name, worst, tol, len(picks))


def check_inr(seed=0, n=64, n_params=30, h=1e-6, tol=1e-3):
    """Weights, biases and input coordinates of a small float64 network."""
    rng = np.random.default_rng(seed)
    model = init_inr(seed, m=8, hidden=16, kappa=1.0, dtype=np.float64)
    pts = rng.uniform(-1, 1, (n, 3))
    cot = rng.standard_normal(n)

    def f():
        return float(inr_forward(model, pts)[0] @ cot)

    _, tape = inr_forward(model, pts)
    grads, gpts = inr_backward(model, tape, cot)
    results = []
    for name, p in model.params().items():
        picks = rng.choice(p.size, size=min(n_params, p.size), replace=False)
        results.append(_fd_check(f"inr {name}", f, p, grads[name], picks, h, tol))
    picks = rng.choice(pts.size, size=n_params, replace=False)
    results.append(_fd_check("inr points", f, pts, gpts, picks, h, tol))
    return _merge("inr vjp", results)


def check_warp(seed=0, n_params=30, h=1e-6, tol=1e-3):
    """Template values and displacements of a 3D and a planar warp."""
    rng = np.random.default_rng(seed)
    results = []
    for shape in ((6, 7, 8), (1, 9, 9)):
        tmpl = rng.random(shape)
        W = rng.normal(0.0, 0.15, shape + (3,))
        cot = rng.standard_normal(shape)

        def f():
            return float(np.vdot(warp_volume(tmpl, W), cot))

        gt, gw = warp_vjp(tmpl, W, cot)
        picks = rng.choice(tmpl.size, size=n_params, replace=False)
        results.append(_fd_check(f"warp template {shape}", f, tmpl, gt, picks, h, tol))
        active = np.flatnonzero(np.broadcast_to(np.array(shape)[::-1] > 1, W.shape))
        picks = rng.choice(active, size=n_params, replace=False)
        results.append(_fd_check(f"warp field {shape}", f, W, gw, picks, h, tol))
    return _merge("warp vjp", results)


def check_radon(seed=0, side=16, n_params=30, h=1e-6, tol=1e-3):
    rng = np.random.default_rng(seed)
    op = RadonOperator(side, [0.0, 33.0, 90.0, 151.0])
    x = rng.random((2, side, side))
    cot = rng.standard_normal((op.n_angles, 2, op.n_det))

    def f():
        return float(np.vdot(radon_forward(op, x), cot))

    g = radon_adjoint(op, cot)
    picks = rng.choice(x.size, size=n_params, replace=False)
    return _merge("radon vjp", [_fd_check("radon", f, x, g, picks, h, tol)])


def tiny_problem(seed=0, beta=8, n_views=4):
    """The tiny float64 instance used by the full-pipeline check."""
    rng = np.random.default_rng(seed)
    sch = make_schedule(0.0, 180.0, n_views, endpoint=False)
    op = RadonOperator.from_schedule(sch, beta)
    gt = shepp_logan(2, beta).data.astype(np.float64)
    measured = radon_forward(op, gt) + 0.05 * rng.standard_normal((n_views, 1, op.n_det))
    return Problem(op, measured, np.asarray(sch.times), volume_shape_for(beta, True), 1.0, 0.001)


def check_pipeline(seed=0, n_params=30, h=1e-6, tol=1e-3):
    """Total loss wrt parameters drawn from both the network and the motion coefficients."""
    rng = np.random.default_rng(seed)
    problem = tiny_problem(seed)
    model = init_inr(seed, m=8, hidden=16, kappa=1.0, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coeffs = init_motion(2, 2, init_scale=0.05, seed=seed + 1, dtype=np.float64)
    points = coord_grid(problem.shape, jitter=True, rng=rng, dtype=np.float64)
    indices = np.arange(problem.measured.shape[0])

    def f():
        return objective(problem, model, coeffs, points, indices)[0].value

    _, grads, gC = objective(problem, model, coeffs, points, indices)
    params = model.params()
    params["C"] = coeffs.C
    grads["C"] = gC
    names = list(params)
    # half the picks from C, the rest spread over the network
    n_c = n_params // 2
    flat = [("C", int(j)) for j in rng.choice(coeffs.C.size, size=n_c, replace=False)]
    mlp = [k for k in names if k != "C"]
    offsets = np.concatenate([[0], np.cumsum([params[k].size for k in mlp])])
    for g in rng.choice(offsets[-1], size=n_params - n_c, replace=False):
        i = int(np.searchsorted(offsets, g, side="right") - 1)
        flat.append((mlp[i], int(g - offsets[i])))
    worst = 0.0
    for name, j in flat:
        r = _fd_check(name, f, params[name], grads[name], [j], h, tol)
        worst = max(worst, r.max_error)
    return CheckResult("full pipeline loss", worst, tol, len(flat))


def _merge(name, results):
    return CheckResult(name, max(r.max_error for r in results), results[0].tolerance,
                       sum(r.n_checked for r in results))


def gradient_suite(seed=0, tol=1e-3):
    """All finite-difference checks, in pipeline order."""
    return [check_inr(seed, tol=tol), check_warp(seed, tol=tol), check_radon(seed, tol=tol),
            check_pipeline(seed, tol=tol)]
