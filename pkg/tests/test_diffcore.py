import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoformer import diffcore as dc
from geoformer.diffcore import ShapeError, Tensor, grad_check


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def weighted_sum(out, rng):
    # random projection so every output entry contributes a distinct weight
    w = rng.normal(size=out.shape)
    return dc.sum_(dc.mul(out, w))


# -- forward examples --------------------------------------------------------

def test_softmax_uniform():
    y = dc.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(y.data, [1 / 3] * 3)


def test_sigmoid_zero():
    assert dc.sigmoid(Tensor(np.array(0.0))).item() == 0.5


def test_mean_gradient_is_one_over_n():
    x = Tensor(np.arange(7.0), requires_grad=True)
    dc.mean(x).backward()
    np.testing.assert_array_equal(x.grad, np.full(7, 1 / 7))


def test_square_gradcheck_scalar():
    x = Tensor(np.array([3.0]), requires_grad=True)
    dc.sum_(dc.square(x)).backward()
    assert x.grad[0] == 6.0
    rep = grad_check(lambda: dc.sum_(dc.square(x)), [x], eps=1e-4)
    assert rep.ok and rep.max_rel_err < 1e-8


def test_layer_norm_zero_variance_finite_grad():
    x = Tensor(np.full((2, 5), 3.0), requires_grad=True)
    g = Tensor(np.ones(5), requires_grad=True)
    b = Tensor(np.zeros(5), requires_grad=True)
    rng = np.random.default_rng(0)
    out = weighted_sum(dc.layer_norm(x, g, b), rng)
    out.backward()
    assert np.all(np.isfinite(x.grad))
    assert np.all(np.isfinite(g.grad))


def test_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(a, b)
    with pytest.raises(ShapeError):
        dc.add(a, Tensor(np.zeros(2)))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# -- gradient properties -------------------------------------------------------

def _unary_cases():
    return {
        "relu": lambda x: dc.relu(x),
        "sigmoid": lambda x: dc.sigmoid(x),
        "gelu": lambda x: dc.gelu(x),
        "softmax": lambda x: dc.softmax(x),
        "exp": lambda x: dc.exp(x),
        "square": lambda x: dc.square(x),
        "reshape": lambda x: dc.reshape(x, (-1,)),
        "transpose": lambda x: dc.transpose(x),
        "roll": lambda x: dc.roll(x, (1, -2), (0, 1)),
        "slice": lambda x: x[1:, ::2],
        "gather": lambda x: dc.gather(x, np.array([0, 0, 1]), axis=0),
        "mean_axis": lambda x: dc.mean(x, axis=1),
        "sum_all": lambda x: dc.sum_(x),
        "pad": lambda x: dc.pad(x, ((1, 0), (0, 2))),
        "broadcast": lambda x: dc.broadcast_to(x[:, :1], (3,) + x[:, :1].shape[:1] + (4,)),
        "scale": lambda x: dc.scale(x, -2.5),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@given(rows=st.integers(2, 4), cols=st.integers(3, 5), seed=st.integers(0, 2**16))
@settings(max_examples=8, deadline=None)
def test_unary_gradients(name, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, rows, cols)
    if name == "relu":
        # stay away from the kink
        x.data[np.abs(x.data) < 1e-3] = 0.5
    fn = _unary_cases()[name]
    w = rng.normal(size=fn(Tensor(x.data)).shape)
    rep = grad_check(lambda: dc.sum_(dc.mul(fn(x), w)), [x], eps=1e-6)
    assert rep.max_rel_err < 1e-3, rep


def test_log_gradient():
    rng = np.random.default_rng(1)
    x = leaf(rng, 3, 4, lo=0.5, hi=2.0)
    rep = grad_check(lambda: dc.sum_(dc.log(x)), [x])
    assert rep.ok


@given(b=st.integers(1, 3), m=st.integers(1, 4), n=st.integers(1, 4), p=st.integers(1, 4),
       seed=st.integers(0, 2**16))
@settings(max_examples=15, deadline=None)
def test_matmul_gradients(b, m, n, p, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, b, m, n)
    w = leaf(rng, n, p)
    wb = leaf(rng, b, n, p)
    g = rng.normal(size=(b, m, p))
    rep = grad_check(lambda: dc.sum_(dc.mul(dc.matmul(a, w), g)), [a, w])
    assert rep.max_rel_err < 1e-3
    rep = grad_check(lambda: dc.sum_(dc.mul(dc.matmul(a, wb), g)), [a, wb])
    assert rep.max_rel_err < 1e-3


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(2)
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 3, 4)
    c = leaf(rng, 4)
    g = rng.normal(size=(2, 3, 4))
    for fn in (lambda: dc.add(dc.mul(a, b), c), lambda: dc.sub(dc.add(a, b), dc.mul(a, c))):
        rep = grad_check(lambda: dc.sum_(dc.mul(fn(), g)), [a, b, c])
        assert rep.max_rel_err < 1e-3


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, 2, 3, 6)
    gam = leaf(rng, 6, lo=0.5, hi=1.5)
    bet = leaf(rng, 6)
    g = rng.normal(size=(2, 3, 6))
    rep = grad_check(lambda: dc.sum_(dc.mul(dc.layer_norm(x, gam, bet), g)), [x, gam, bet])
    assert rep.max_rel_err < 1e-3


def test_unfold_and_concat_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng, 2, 5, 5, 3)
    y = dc.unfold(x, 3, stride=2, padding=1)
    assert y.shape == (2, 3, 3, 27)
    g = rng.normal(size=y.shape)
    rep = grad_check(lambda: dc.sum_(dc.mul(dc.unfold(x, 3, 2, 1), g)), [x])
    assert rep.max_rel_err < 1e-3
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    g2 = rng.normal(size=(2, 5))
    rep = grad_check(lambda: dc.sum_(dc.mul(dc.concat([a, b], axis=1), g2)), [a, b])
    assert rep.max_rel_err < 1e-3


def test_add_mask_is_constant():
    rng = np.random.default_rng(5)
    x = leaf(rng, 2, 3, 3)
    mask = np.where(np.eye(3) > 0, 0.0, -1e9)
    y = dc.softmax(dc.add_mask(x, mask))
    off = y.data[:, ~np.eye(3, dtype=bool)]
    assert np.all(off < 1e-40)


# -- structural invariants ---------------------------------------------------

@given(seed=st.integers(0, 2**16), n=st.integers(2, 9))
@settings(max_examples=30, deadline=None)
def test_softmax_sums_to_one(seed, n):
    rng = np.random.default_rng(seed)
    y = dc.softmax(Tensor(rng.normal(scale=10, size=(4, n))))
    np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-12)


@given(seed=st.integers(0, 2**16), s0=st.integers(-7, 7), s1=st.integers(-7, 7))
@settings(max_examples=30, deadline=None)
def test_roll_inverse_is_identity(seed, s0, s1):
    x = np.random.default_rng(seed).normal(size=(2, 5, 4, 3))
    t = dc.roll(dc.roll(Tensor(x), (s0, s1), (1, 2)), (-s0, -s1), (1, 2))
    assert np.array_equal(t.data, x)


def test_backward_linearity():
    rng = np.random.default_rng(6)
    x = leaf(rng, 3, 4)
    w = rng.normal(size=(4, 2))

    def l1():
        return dc.sum_(dc.square(dc.matmul(x, Tensor(w))))

    def l2():
        return dc.mean(dc.gelu(x))

    dc.add(l1(), l2()).backward()
    together = x.grad.copy()
    x.zero_grad()
    l1().backward()
    l2().backward()
    np.testing.assert_allclose(x.grad, together, rtol=1e-12, atol=1e-14)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = dc.mul(x, x)
    dc.sum_(dc.add(y, y)).backward()
    assert x.grad[0] == 8.0


def test_deterministic_repeat():
    def run():
        rng = np.random.default_rng(7)
        x = leaf(rng, 16, 8)
        w = leaf(rng, 8, 8)
        out = dc.mean(dc.softmax(dc.gelu(dc.matmul(x, w))))
        out.backward()
        return out.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = dc.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_float32_precision_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 3), dtype=np.float32), requires_grad=True)
    y = dc.layer_norm(dc.gelu(dc.matmul(x, w)), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))
    assert y.dtype == np.float32
    dc.mean(y).backward()
    assert x.grad.dtype == np.float32


def test_gradcheck_rejects_bad_eps_and_precision():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: dc.sum_(x), [x], eps=1e-2)
    x32 = Tensor(np.ones(2, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: dc.sum_(x32), [x32])


def test_gradcheck_flags_nonfinite():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    rep = grad_check(lambda: dc.sum_(dc.log(x)), [x], eps=1e-4, names=["x"])
    assert not rep.ok
    assert rep.failures[0].name == "x"
