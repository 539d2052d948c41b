import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from p2plab import autodiff as ad
from p2plab.errors import DimensionError, NumericalError

TOL = 1e-4


def check(f, x):
    assert ad.grad_check(f, x) < TOL


@pytest.mark.parametrize("name,f", [
    ("tanh", lambda tp, x: ad.sum_(ad.tanh(x))),
    ("exp", lambda tp, x: ad.sum_(ad.exp(ad.scale(x, 0.5)))),
    ("log", lambda tp, x: ad.sum_(ad.log(ad.add_scalar(ad.square(x), 1.0)))),
    ("sqrt", lambda tp, x: ad.sum_(ad.sqrt(ad.add_scalar(ad.square(x), 0.5)))),
    ("abs_smooth", lambda tp, x: ad.sum_(ad.abs_smooth(x))),
    ("softmax", lambda tp, x: ad.sum_(ad.mul(ad.softmax(x), tp.const(np.arange(12.0).reshape(3, 4))))),
    ("mean_axis", lambda tp, x: ad.sum_(ad.square(ad.mean(x, axis=0)))),
    ("transpose", lambda tp, x: ad.sum_(ad.mul(ad.transpose(x, (1, 0)), tp.const(np.ones((4, 3)) * 2)))),
    ("reshape", lambda tp, x: ad.sum_(ad.square(ad.reshape(x, (2, 6))))),
    ("slice", lambda tp, x: ad.sum_(ad.square(x[1:, ::2]))),
    ("concat", lambda tp, x: ad.sum_(ad.square(ad.concat([x, ad.tanh(x)], axis=-1)))),
    ("stack", lambda tp, x: ad.sum_(ad.square(ad.stack([x, ad.scale(x, 3.0)], axis=0)))),
    ("broadcast", lambda tp, x: ad.sum_(ad.square(ad.broadcast_to(ad.reshape(x, (1, 3, 4)), (2, 3, 4))))),
    ("minimum", lambda tp, x: ad.sum_(ad.minimum(x, ad.scale(x, -0.5)))),
])
def test_op_gradients(name, f, rng):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 0.05] += 0.1  # keep away from kinks of minimum
    check(f, x)


def test_matmul_and_bias_gradients(rng):
    W = rng.standard_normal((2, 4, 3))
    b = rng.standard_normal((2, 3))

    def f(tp, x):
        return ad.sum_(ad.tanh(ad.add_bias(ad.matmul(x, tp.const(W)), tp.const(b))))

    check(f, rng.standard_normal((2, 5, 4)))

    X = rng.standard_normal((2, 5, 4))

    def g(tp, w):
        return ad.sum_(ad.square(ad.matmul(tp.const(X), w)))

    check(g, W)


def test_take_rows_gradient(rng):
    def f(tp, x):
        return ad.sum_(ad.square(ad.take_rows(x, [0, 2, 1, 0])))

    check(f, rng.standard_normal((4, 3, 3, 2)))


def test_clip_has_zero_gradient_outside():
    tp = ad.Tape()
    x = tp.param(np.array([-2.0, 0.5, 3.0]))
    g = ad.backward(tp, ad.sum_(ad.clip(x, -1.0, 1.0)))[x.node]
    assert g.tolist() == [0.0, 1.0, 0.0]


def test_negative_control_detects_wrong_gradient(rng):
    f = lambda tp, x: ad.sum_(ad.square(x))  # noqa: E731
    x = rng.standard_normal(5)
    assert ad.grad_check(f, x, analytic=2 * ad.analytic_grad(f, x)) > 0.5


def test_backward_requires_scalar():
    tp = ad.Tape()
    x = tp.param(np.ones(3))
    with pytest.raises(DimensionError):
        ad.backward(tp, ad.tanh(x))


def test_unreached_params_get_zero_grads():
    tp = ad.Tape()
    x = tp.param(np.ones(2))
    y = tp.param(np.ones(3))
    g = ad.backward(tp, ad.sum_(x))
    assert np.all(g[y.node] == 0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_check_finite_mode():
    tp = ad.Tape(check_finite=True)
    x = tp.param(np.array([1000.0]))
    with pytest.raises(NumericalError):
        ad.exp(x)


def test_shape_mismatch_errors():
    tp = ad.Tape()
    with pytest.raises(DimensionError):
        ad.add(tp.param(np.ones(2)), tp.param(np.ones(3)))
    with pytest.raises(DimensionError):
        ad.matmul(tp.param(np.ones((2, 3))), tp.param(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_chain_rule_property(x):
    f = lambda tp, z: ad.sum_(ad.tanh(ad.mul(z, ad.exp(ad.scale(z, 0.3)))))  # noqa: E731
    assert ad.grad_check(f, x) < TOL


def test_save_load_round_trip(tmp_path, rng):
    arrays_ = {"a": rng.standard_normal((2, 3)), "b": np.array(4.0), "c": rng.standard_normal(5)}
    p = ad.save_arrays(arrays_, tmp_path / "ck.bin", {"seed": 3})
    back, meta = ad.load_arrays(p)
    assert meta == {"seed": 3}
    for k in arrays_:
        assert np.array_equal(back[k], arrays_[k])
    # byte-stable
    p2 = ad.save_arrays(arrays_, tmp_path / "ck2.bin", {"seed": 3})
    assert p.read_bytes() == p2.read_bytes()
