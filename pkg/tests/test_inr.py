import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynct.blob import load_tensors
from dynct.errors import NumericFailure, VolumeFormatError
from dynct.inr import (
    GrffParams, clamp_nonnegative, coord_grid, grff_encode, init_inr, inr_backward, inr_forward,
    load_model, query_template, save_model,
)


def fd_grad(f, x, j, h):
    old = x.flat[j]
    x.flat[j] = old + h
    fp = f()
    x.flat[j] = old - h
    fm = f()
    x.flat[j] = old
    return (fp - fm) / (2 * h)


# --- encoding ----------------------------------------------------------------


def test_encode_origin():
    g = init_inr(0, m=16).grff
    enc = grff_encode(g, np.zeros(3))
    np.testing.assert_array_equal(enc, np.r_[np.ones(16), np.zeros(16)])


def test_encode_kappa_scales_b():
    B = np.random.default_rng(0).standard_normal((8, 3))
    v = np.random.default_rng(1).uniform(-1, 1, (5, 3))
    a = grff_encode(GrffParams(B, 2.0), v)
    b = grff_encode(GrffParams(2.0 * B, 1.0), v)
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(v=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_encode_range(v):
    enc = grff_encode(init_inr(0, m=8, dtype=np.float64).grff, np.array(v))
    assert enc.shape == (16,)
    assert np.all(np.abs(enc) <= 1.0)


def test_encode_depends_on_bv_only():
    # directions in the null space of B leave the encoding unchanged
    B = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    g = GrffParams(B, 1.3)
    v = np.array([[0.2, -0.4, 0.1]])
    np.testing.assert_array_equal(grff_encode(g, v), grff_encode(g, v + [[0.0, 0.7, -0.3]]))


# --- init ----------------------------------------------------------------------


def test_init_deterministic_and_shapes():
    a, b = init_inr(7, m=128, hidden=32), init_inr(7, m=128, hidden=32)
    for k, v in a.params().items():
        assert v.tobytes() == b.params()[k].tobytes()
    assert a.grff.B.tobytes() == b.grff.B.tobytes()
    assert a.grff.width == 256
    assert a.mlp.weights[0].shape == (32, 256)
    assert [w.shape for w in a.mlp.weights][1:] == [(32, 32), (32, 32), (1, 32)]
    assert init_inr(0, kappa=1.5).grff.kappa == 1.5


def test_init_fan_in_bounds():
    model = init_inr(3, m=16, hidden=64)
    for w in model.mlp.weights:
        assert np.abs(w).max() <= 1.0 / np.sqrt(w.shape[1])


def test_init_rejects_bad_args():
    with pytest.raises(ValueError):
        init_inr(0, m=0)
    with pytest.raises(ValueError):
        init_inr(0, kappa=0.0)


# --- forward -------------------------------------------------------------------


def test_zero_network_outputs_bias():
    model = init_inr(0, m=4, hidden=8, dtype=np.float64)
    for w in model.mlp.weights:
        w[...] = 0.0
    model.mlp.biases[-1][...] = 0.37
    out, _ = inr_forward(model, np.random.default_rng(0).uniform(-1, 1, (10, 3)))
    np.testing.assert_array_equal(out, 0.37)


def test_repeated_point_identical_outputs():
    model = init_inr(1, m=8, hidden=16)
    out, _ = inr_forward(model, np.tile([[0.1, -0.2, 0.3]], (6, 1)))
    # BLAS may route tail rows through a different kernel: allow a few ulps
    np.testing.assert_array_max_ulp(out, np.full_like(out, out[0]), maxulp=4)


def test_forward_is_pure():
    model = init_inr(1, m=8, hidden=16)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    assert inr_forward(model, pts)[0].tobytes() == inr_forward(model, pts)[0].tobytes()


def test_forward_non_finite_raises_with_iteration():
    model = init_inr(0, m=4, hidden=8)
    model.mlp.biases[-1][...] = np.inf
    with pytest.raises(NumericFailure) as info:
        inr_forward(model, np.zeros((2, 3)), iteration=12)
    assert info.value.iteration == 12
    assert "iteration 12" in str(info.value)


def test_first_layer_weight_fd_64bit():
    model = init_inr(2, m=8, hidden=16, dtype=np.float64)
    pts = np.random.default_rng(2).uniform(-1, 1, (40, 3))
    _, tape = inr_forward(model, pts)
    grads, _ = inr_backward(model, tape, np.ones(40))
    W0 = model.mlp.weights[0]
    rng = np.random.default_rng(3)
    for j in rng.choice(W0.size, 10, replace=False):
        fd = fd_grad(lambda: inr_forward(model, pts)[0].sum(), W0, j, 1e-4)
        assert fd == pytest.approx(grads["W0"].flat[j], rel=1e-5, abs=1e-10)


# --- backward ------------------------------------------------------------------


def test_zero_cotangent_zero_gradients():
    model = init_inr(0, m=8, hidden=16)
    pts = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    _, tape = inr_forward(model, pts)
    grads, gpts = inr_backward(model, tape, np.zeros(20))
    assert all(not np.any(g) for g in grads.values())
    assert not np.any(gpts)


def test_one_unit_network_closed_form():
    model = init_inr(0, m=3, hidden=1, kappa=1.0, dtype=np.float64)
    ws, bs = model.mlp.weights, model.mlp.biases
    ws[0][...] = 0.3
    bs[0][...] = 5.0  # keeps the first unit active for any encoding
    ws[1][...], bs[1][...] = 0.7, 0.1
    ws[2][...], bs[2][...] = 1.2, 0.2
    ws[3][...], bs[3][...] = -0.9, 0.05
    pts = np.random.default_rng(0).uniform(-1, 1, (7, 3))
    enc = grff_encode(model.grff, pts)
    z1 = enc @ ws[0][0] + 5.0
    z2 = 0.7 * z1 + 0.1
    z3 = 1.2 * z2 + 0.2
    out, tape = inr_forward(model, pts)
    np.testing.assert_allclose(out, -0.9 * z3 + 0.05)
    grads, _ = inr_backward(model, tape, np.ones(7))
    n = pts.shape[0]
    assert grads["b3"][0] == pytest.approx(n)
    assert grads["W3"][0, 0] == pytest.approx(z3.sum())
    assert grads["b2"][0] == pytest.approx(-0.9 * n)
    assert grads["W2"][0, 0] == pytest.approx(-0.9 * z2.sum())
    assert grads["W1"][0, 0] == pytest.approx(-0.9 * 1.2 * z1.sum())
    assert grads["b0"][0] == pytest.approx(-0.9 * 1.2 * 0.7 * n)
    np.testing.assert_allclose(grads["W0"][0], -0.9 * 1.2 * 0.7 * enc.sum(axis=0))


@pytest.mark.parametrize("dtype,rel", [(np.float64, 1e-5), (np.float32, 1e-3)])
def test_fd_sweep_all_layers(dtype, rel):
    # the finite-difference reference always runs in 64-bit
    rng = np.random.default_rng(5)
    model = init_inr(5, m=8, hidden=16, dtype=dtype)
    ref = model.astype(np.float64)
    pts = rng.uniform(-1, 1, (32, 3)).astype(dtype)
    pts64 = pts.astype(np.float64)
    cot = rng.standard_normal(32).astype(dtype)

    def loss():
        return float(inr_forward(ref, pts64)[0] @ cot.astype(np.float64))

    _, tape = inr_forward(model, pts)
    grads, gpts = inr_backward(model, tape, cot)
    for name, p in ref.params().items():
        for j in rng.choice(p.size, min(50, p.size), replace=False):
            fd = fd_grad(loss, p, j, 1e-6)
            assert fd == pytest.approx(float(grads[name].flat[j]), rel=rel, abs=1e-7)
    for j in range(pts.size):
        fd = fd_grad(loss, pts64, j, 1e-6)
        assert fd == pytest.approx(float(gpts.flat[j]), rel=rel, abs=1e-6)


def test_tape_mismatch():
    a = init_inr(0, m=8, hidden=16)
    b = init_inr(0, m=8, hidden=8)
    _, tape = inr_forward(a, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        inr_backward(b, tape, np.ones(3))
    with pytest.raises(ValueError):
        inr_backward(a, tape, np.ones(4))


# --- grids and export ---------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(side=st.integers(2, 12), planar=st.booleans(), seed=st.integers(0, 1000))
def test_jitter_stays_within_half_voxel(side, planar, seed):
    shape = (1, side, side) if planar else (side, side, side)
    exact = coord_grid(shape, dtype=np.float64)
    jit = coord_grid(shape, jitter=True, rng=np.random.default_rng(seed), dtype=np.float64)
    assert np.all(np.abs(jit - exact) <= 1.0 / side + 1e-12)
    if planar:
        assert np.all(jit[:, 2] == 0.0)


def test_coord_grid_order():
    pts = coord_grid((2, 3, 4))
    # C order over (z, y, x): x varies fastest
    assert pts[1, 0] > pts[0, 0] and pts[1, 1] == pts[0, 1]
    assert pts[4, 1] > pts[0, 1]
    assert pts[12, 2] > pts[0, 2]


def test_query_template_any_resolution():
    model = init_inr(0, m=16, hidden=16)
    a = query_template(model, 20)
    b = query_template(model, 64, planar=True)
    assert a.shape == (20, 20, 20) and b.shape == (1, 64, 64)
    assert query_template(model, 20).data.tobytes() == a.data.tobytes()
    assert a.data.min() >= 0.0


def test_clamp_reports_negative_mass():
    x = np.array([-0.5, 0.2, -0.25, 1.0])
    out, neg = clamp_nonnegative(x)
    assert neg == pytest.approx(np.abs(out - x).sum())
    assert neg == pytest.approx(0.75)


def test_model_checkpoint_roundtrip(tmp_path):
    model = init_inr(4, m=8, hidden=16, kappa=1.5)
    save_model(model, tmp_path)
    back = load_model(tmp_path)
    assert back.grff.kappa == 1.5
    assert back.grff.B.tobytes() == model.grff.B.tobytes()
    for k, v in model.params().items():
        assert back.params()[k].tobytes() == v.tobytes()
    _, man = load_tensors(tmp_path, "inr")
    assert man["m"] == 8 and man["seed"] == 4


def test_model_checkpoint_truncated(tmp_path):
    save_model(init_inr(0, m=4, hidden=4), tmp_path)
    blob = tmp_path / "inr.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        load_model(tmp_path)
