import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from czsl.diffprims import (
    AffineParams,
    Mlp2Params,
    affine_backward,
    affine_forward,
    grad_check,
    hinge,
    load_checkpoint,
    mlp2_backward,
    mlp2_forward,
    save_checkpoint,
)


def test_affine_examples():
    p = AffineParams(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(affine_forward(p, [2, 3]), [2, 3])
    p = AffineParams(np.array([[1.0, 1.0]]), np.array([1.0]))
    np.testing.assert_array_equal(affine_forward(p, [2, 3]), [6])
    with pytest.raises(ValueError):
        affine_forward(p, [1, 2, 3])


def test_affine_backward_matches_finite_differences(rng):
    p = AffineParams.init(rng, 3, 4)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 4))

    def f():
        return float((affine_forward(p, x) * up).sum())

    p.zero_grad()
    dx = affine_backward(p, x, up)
    np.testing.assert_allclose(dx, up @ p.W, rtol=1e-12)
    report = grad_check(f, p.tensors(), p.grads())
    assert report.max_error < 1e-6


def test_backward_accumulates_linearly(rng):
    p = AffineParams.init(rng, 3, 2)
    x1, x2 = rng.normal(size=3), rng.normal(size=3)
    u1, u2 = rng.normal(size=2), rng.normal(size=2)
    p.zero_grad()
    affine_backward(p, x1, u1)
    affine_backward(p, x2, u2)
    gW = p.gW.copy()
    p.zero_grad()
    affine_backward(p, np.stack([x1, x2]), np.stack([u1, u2]))
    np.testing.assert_allclose(p.gW, gW, rtol=1e-12)


def test_mlp_examples():
    p = Mlp2Params.init(np.random.default_rng(0), 3, 4, 2)
    for t in p.tensors().values():
        t[...] = 0
    p.layer2.b[...] = [0.5, -1.0]
    np.testing.assert_array_equal(mlp2_forward(p, [1, 2, 3]), [0.5, -1.0])
    p = Mlp2Params(AffineParams(np.array([[1.0]]), np.zeros(1)), AffineParams(np.array([[1.0]]), np.zeros(1)))
    assert abs(mlp2_forward(p, [0.5])[0] - 0.462117) < 1e-6


@pytest.mark.parametrize("activation", ["tanh", "sigmoid", "softplus"])
def test_mlp_grad_check(activation):
    rng = np.random.default_rng(5)
    p = Mlp2Params.init(rng, 7, 5, 2, activation)
    x = rng.normal(size=(3, 7))
    up = rng.normal(size=(3, 2))

    def f():
        return float((mlp2_forward(p, x) * up).sum())

    p.zero_grad()
    _, cache = mlp2_forward(p, x, return_cache=True)
    mlp2_backward(p, cache, up)
    assert grad_check(f, p.tensors(), p.grads()).max_error < 1e-5


def test_hinge_examples():
    assert hinge(0.1, 0.8, 0.5)[0] == 0.0
    assert hinge(0.5, 0.3, 0.3)[0] == pytest.approx(0.5)
    assert hinge(0.1, 0.2, 0.4)[0] == pytest.approx(0.3)
    assert hinge(0.1, 0.2, 0.4)[1:] == (-1.0, 1.0)
    # exactly at the kink: inactive branch
    assert hinge(0.5, 1.0, 0.5) == (0.0, -0.0, 0.0)
    with pytest.raises(ValueError):
        hinge(-0.1, 0, 0)


@given(st.floats(0, 2), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_hinge_convex_in_neg_and_monotone_in_pos(m, sp, a, b, t):
    f = lambda sn: hinge(m, sp, sn)[0]
    mid = t * a + (1 - t) * b
    assert f(mid) <= t * f(a) + (1 - t) * f(b) + 1e-12
    lo, hi = min(a, b), max(a, b)
    assert hinge(m, hi, 0.0)[0] <= hinge(m, lo, 0.0)[0]


def test_grad_check_quadratic():
    w = np.array([0.3, -1.2, 2.0])
    report = grad_check(lambda: float(w @ w), {"w": w}, {"w": 2 * w})
    assert report.passed and report.max_error < 1e-8


def test_grad_check_flags_kink():
    w = np.array([1.0])
    report = grad_check(lambda: float(max(0.0, w[0] - 1.0)), {"w": w}, {"w": np.zeros(1)}, kink_distance=lambda: 0.0)
    assert report.skipped and not report.passed and "kink" in report.reason


def test_grad_check_detects_wrong_gradient():
    w = np.array([0.5, 1.5])
    assert not grad_check(lambda: float(w @ w), {"w": w}, {"w": w}).passed


def test_grad_check_nonfinite():
    w = np.array([0.0])
    with pytest.raises(FloatingPointError):
        grad_check(lambda: float(np.log(w[0] + 5e-6) if w[0] > 0 else np.nan), {"w": w}, {"w": np.zeros(1)})


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"b.x": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "c": np.array(1.5)}
    save_checkpoint(tmp_path / "m.czpm", tensors)
    raw = (tmp_path / "m.czpm").read_bytes()
    assert raw[:5] == b"CZPM1"
    back = load_checkpoint(tmp_path / "m.czpm")
    assert list(back) == ["a", "b.x", "c"]
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32).astype(np.float64))
    save_checkpoint(tmp_path / "n.czpm", back)
    assert (tmp_path / "n.czpm").read_bytes() == raw
