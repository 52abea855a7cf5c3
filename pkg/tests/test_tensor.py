import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsepo import tensor as T
from sparsepo.gradcheck import check_gradient


def test_forward_examples():
    assert np.array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])
    np.testing.assert_allclose(T.log_softmax(T.Tensor([0.0, 0.0])).data, [-0.693147] * 2, atol=1e-6)
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


def test_backward_square():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.sum_(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_stop_gradient():
    x = T.Tensor([1.5, -2.0], requires_grad=True)
    y = T.Tensor([0.5, 3.0], requires_grad=True)
    T.sum_(T.stop_gradient(x) * y).backward()
    assert x.grad is None or np.all(x.grad == 0)
    assert np.array_equal(y.grad, x.data)


def test_sigmoid_chain_matches_central_difference():
    w = T.Tensor([1.0], requires_grad=True)
    h = T.Tensor([1.0])
    T.sum_(T.sigmoid(w * h)).backward()

    def f(v):
        return 1.0 / (1.0 + np.exp(-v))

    fd = (f(1.0 + 1e-6) - f(1.0 - 1e-6)) / 2e-6
    assert w.grad[0] == pytest.approx(fd, abs=1e-9)
    assert w.grad[0] == pytest.approx(0.196612, abs=1e-6)


def test_grads_accumulate_over_calls():
    x = T.Tensor([3.0], requires_grad=True)
    T.sum_(x * 2.0).backward()
    T.sum_(x * 2.0).backward()
    assert x.grad[0] == 4.0


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shape_mismatch_names_primitive():
    with pytest.raises(T.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        T.add(T.Tensor(np.ones(2)), T.Tensor(np.ones(3)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_gradcheck_exp_example():
    rep = check_gradient(lambda x: T.sum_(T.exp(x)), T.Tensor([0.0, 1.0]), step=1e-6, tol=1e-4)
    assert rep.passed


def test_gradcheck_reports_nonfinite_coordinate():
    # the central difference steps below zero on purpose
    with np.errstate(invalid="ignore"):
        rep = check_gradient(lambda x: T.sum_(T.log(x)), T.Tensor([1.0, 1e-7]), step=1e-6)
    assert not rep.passed
    assert "1" in rep.failure


def _unary_cases():
    return {
        "relu": (lambda a: T.relu(a), lambda r: r.normal(size=(3, 4)) + 0.05),
        "sigmoid": (T.sigmoid, lambda r: r.normal(size=(3, 4))),
        "log_sigmoid": (T.log_sigmoid, lambda r: 3 * r.normal(size=(3, 4))),
        "exp": (T.exp, lambda r: r.normal(size=(3, 4))),
        "log": (T.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
        "sqrt": (T.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
        "clamp": (lambda a: T.clamp(a, 0.1, 0.9), lambda r: r.uniform(-0.5, 1.5, size=(3, 4))),
        "neg": (T.neg, lambda r: r.normal(size=(3,))),
        "mean": (lambda a: T.mean(a, axis=1), lambda r: r.normal(size=(3, 4))),
        "var": (lambda a: T.var(a, axis=-1), lambda r: r.normal(size=(3, 4))),
        "logsumexp": (lambda a: T.logsumexp(a, axis=-1), lambda r: r.normal(size=(3, 4))),
        "log_softmax": (lambda a: T.log_softmax(a), lambda r: r.normal(size=(3, 4))),
        "softmax": (lambda a: T.softmax(a), lambda r: r.normal(size=(3, 4))),
        "reshape": (lambda a: T.reshape(a, (4, 3)), lambda r: r.normal(size=(3, 4))),
        "transpose": (lambda a: T.transpose(a), lambda r: r.normal(size=(3, 4))),
        "swapaxes": (lambda a: T.swapaxes(a, 0, 2), lambda r: r.normal(size=(2, 3, 4))),
        "take": (lambda a: T.take(a, np.array([0, 2, 2])), lambda r: r.normal(size=(3, 4))),
        "getitem": (lambda a: a[1:, ::2], lambda r: r.normal(size=(3, 4))),
    }


# clamp and relu kinks are avoided by keeping inputs away from the break points
def _safe(name, x):
    if name == "relu":
        x[np.abs(x) < 0.05] = 0.3
    if name == "clamp":
        for b in (0.1, 0.9):
            x[np.abs(x - b) < 0.02] = 0.5
    return x


@pytest.mark.parametrize("name", list(_unary_cases()))
def test_unary_gradients(name):
    op, draw = _unary_cases()[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = _safe(name, draw(rng))
        w = rng.normal(size=np.shape(op(T.Tensor(x)).data))
        rep = check_gradient(lambda a: T.sum_(op(a) * w), T.Tensor(x))
        assert rep.passed, (name, seed, rep.failure)


BINARY = {
    "add": (T.add, (3, 4), (4,)),
    "sub": (T.sub, (3, 1), (3, 4)),
    "mul": (T.mul, (3, 4), (3, 4)),
    "div": (T.div, (3, 4), (1, 4)),
    "maximum": (T.maximum, (3, 4), (3, 4)),
    "matmul": (T.matmul, (2, 3, 4), (4, 5)),
    "matmul_vec": (T.matmul, (3, 4), (4,)),
}


@pytest.mark.parametrize("name", list(BINARY))
def test_binary_gradients(name):
    op, sa, sb = BINARY[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        if name == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if name == "maximum":
            b = a + np.where(rng.random(sa) < 0.5, -1, 1) * rng.uniform(0.1, 1, sa)
        w = rng.normal(size=op(T.Tensor(a), T.Tensor(b)).shape)
        rep = check_gradient(lambda x, y: T.sum_(op(x, y) * w), [T.Tensor(a), T.Tensor(b)])
        assert rep.passed, (name, seed, rep.failure)


def test_structural_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.normal(size=(2, 3)) for _ in range(3))
        cond = rng.random((2, 3)) < 0.5
        ids = rng.integers(0, 5, size=(2, 3))
        tab = rng.normal(size=(5, 4))
        gain, bias = rng.normal(size=4), rng.normal(size=4)
        x4 = rng.normal(size=(2, 3, 4))
        wv = rng.normal(size=(2, 3))
        we = rng.normal(size=(2, 3, 4))
        checks = [
            (lambda x, y: T.sum_(T.where(cond, x, y) * wv), [a, b]),
            (lambda x, y: T.sum_(T.concat([x, y], axis=1) * np.tile(wv, 2)), [a, b]),
            (lambda x, y, z: T.sum_(T.stack([x, y, z], axis=0)[1] * wv), [a, b, c]),
            (lambda t: T.sum_(T.embedding(t, ids) * we), [tab]),
            (lambda t: T.sum_(T.gather_last(t, ids % 4) * wv), [x4]),
            (lambda x, g, h: T.sum_(T.layer_norm(x, g, h) * we), [x4, gain, bias]),
        ]
        for f, xs in checks:
            rep = check_gradient(f, [T.Tensor(x) for x in xs])
            assert rep.passed, (seed, rep.failure)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_log_softmax_normalizes(xs):
    lse = np.log(np.exp(T.log_softmax(T.Tensor(xs)).data).sum())
    assert abs(lse) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 700))
def test_log_sigmoid_is_finite_and_matches(z):
    v = T.log_sigmoid(T.Tensor([z])).data[0]
    assert np.isfinite(v)
    assert v == pytest.approx(-np.logaddexp(0.0, -z), abs=1e-12)
