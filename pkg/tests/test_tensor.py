import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbc import tensor as T
from avbc.gradcheck import check_gradients
from avbc.tensor import NonFiniteError, Tape, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------- matmul
def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_zero_rhs():
    out = T.matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - ref)) < 1e-12


def test_matmul_shape_error_reports_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_gradients(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    (T.matmul(a, b) * g).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# ------------------------------------------------------------------ softmax
def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == 1.0 and 0.0 <= out[1] < 1e-300


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    denom = sum(mpmath.e ** x for x in xs)
    ref = [float(mpmath.e ** x / denom) for x in xs]
    np.testing.assert_allclose(T.softmax(Tensor(np.array(xs, float))).data, ref, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    out = T.softmax(Tensor(np.array(xs))).data
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.all(out >= 0) and np.all(out <= 1)


# --------------------------------------------------------------- layer norm
def test_layer_norm_constant_row_gives_zero():
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    mu = sum(Fraction(v) for v in [1, 2, 3]) / 3
    var = sum((Fraction(v) - mu) ** 2 for v in [1, 2, 3]) / 3
    eps = 1e-5
    ref = [(v - float(mu)) / math.sqrt(float(var) + eps) for v in x]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps).data
    np.testing.assert_allclose(out, ref, rtol=1e-14)
    assert out[0] == pytest.approx(-math.sqrt(1.5), rel=1e-4)


def test_layer_norm_zero_gamma_gives_beta(rng):
    beta = rng.normal(size=5)
    out = T.layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(beta)).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta, (3, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10**6))
def test_layer_norm_row_statistics(rows, d, seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(rows, d))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


# ----------------------------------------------------------------- backward
def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_x(rng):
    x = leaf(rng.normal(size=(4,)))
    ((x * x).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_backward_accumulates_shared_leaf():
    x = leaf([2.0])
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_tape_topological_order():
    x = leaf([1.0, 2.0])
    y = T.exp(x)
    loss = (y * x).sum()
    tape = Tape.from_output(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert len(set(pos)) == len(tape.nodes)
    assert tape.ops()[-1] == "sum"


def test_tape_released_after_backward():
    x = leaf([1.0, 2.0])
    loss = (x * 3.0).sum()
    loss.backward()
    assert loss._parents == ()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_forward_names_op():
    with pytest.raises(NonFiniteError) as info:
        T.log(Tensor([0.0]))
    assert info.value.op == "log"


def test_forward_determinism(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))

    def run():
        return T.softmax(T.matmul(Tensor(a), Tensor(b)), axis=-1).data

    assert run().tobytes() == run().tobytes()


# ----------------------------------------------------------- gradient check
def test_check_gradients_linear_map_exact(rng):
    w = leaf(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))
    rep = check_gradients(lambda: T.matmul(x, w).sum(), [w], tol=1e-10)
    assert rep.passed, rep.summary()


def test_check_gradients_softmax_cross_entropy(rng):
    logits = leaf(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    rep = check_gradients(lambda: -T.log_softmax(logits)[np.arange(5), labels].mean(), [logits], tol=1e-6)
    assert rep.passed, rep.summary()


def test_check_gradients_reports_wrong_gradient(rng):
    x = leaf(rng.normal(size=3))

    def bad():
        # forward x², backward claims 3x
        return T._make((x.data ** 2).sum(), (x,), lambda g: (g * 3 * x.data,), "bad").sum()

    rep = check_gradients(bad, [x])
    assert not rep.passed and len(rep.failures) == 3


UNARY = {
    "exp": T.exp, "tanh": T.tanh, "sigmoid": T.sigmoid, "silu": T.silu,
    "softmax": lambda x: T.softmax(x, axis=-1), "log_softmax": lambda x: T.log_softmax(x, axis=-1),
    "logsumexp": lambda x: T.logsumexp(x, axis=-1), "glu": lambda x: T.glu(x, axis=-1),
    "sqrt_pos": lambda x: T.sqrt(x * x + 1.0), "pow": lambda x: T.power(x * x + 1.0, 1.5),
    "swapaxes": lambda x: x.swapaxes(0, 1), "transpose": lambda x: T.transpose(x, (1, 0)),
    "reshape": lambda x: x.reshape(-1), "mean_axis": lambda x: x.mean(axis=0),
    "getitem": lambda x: x[np.array([0, 2, 2])], "pad": lambda x: T.pad(x, [(1, 2), (0, 1)]),
    "div": lambda x: x / (x * x + 2.0),
    "unfold": lambda x: T.unfold(x, (3,), (2,), (1,)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_gradcheck(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = leaf(rng.normal(size=(4, 6)))
    weights = None

    def f():
        nonlocal weights
        y = UNARY[name](x)
        if weights is None:
            weights = np.random.default_rng(1).normal(size=y.shape)
        return (y * weights).sum()

    rep = check_gradients(f, [x], tol=1e-4)
    assert rep.passed, rep.summary()


def test_layer_norm_gradcheck(rng):
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    rep = check_gradients(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b], tol=1e-4)
    assert rep.passed, rep.summary()


def test_broadcast_matmul_gradcheck(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    rep = check_gradients(lambda: (T.matmul(a, b) * w).sum(), [a, b], tol=1e-4)
    assert rep.passed, rep.summary()


def test_unfold_3d_gradcheck(rng):
    x = leaf(rng.normal(size=(3, 4, 4, 2)))
    w = None

    def f():
        nonlocal w
        y = T.unfold(x, (3, 3, 3), (1, 2, 2), (1, 1, 1))
        if w is None:
            w = np.random.default_rng(2).normal(size=y.shape)
        return (y * w).sum()

    rep = check_gradients(f, [x], tol=1e-4)
    assert rep.passed, rep.summary()


def test_concat_split_roundtrip_gradients(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(4, 3)))
    w = rng.normal(size=(6, 3))
    rep = check_gradients(lambda: (T.concat([a, b]) * w).sum(), [a, b])
    assert rep.passed
    p, q = T.split(T.concat([a, b]), [2, 4])
    np.testing.assert_array_equal(p.data, a.data)
    np.testing.assert_array_equal(q.data, b.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10**6))
def test_random_composite_gradcheck(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r.normal(size=(m, k))), leaf(r.normal(size=(k, n)))
    rep = check_gradients(lambda: T.log_softmax(T.tanh(T.matmul(a, b)), axis=-1).sum(), [a, b], tol=1e-4)
    assert rep.passed, rep.summary()
