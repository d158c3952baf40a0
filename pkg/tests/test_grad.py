import numpy as np
import pytest

from eattn import numerics as nx
from eattn.grad import (GradCheckReport, Tape, backward, check_function, finite_diff_grad,
                        grad_check, rel_error)
from eattn.numerics import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_square_sum_gradient():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = nx.sum_(nx.square(x))
    np.testing.assert_array_equal(backward(tape, loss)[x].data, [2, 4, 6])


def test_cumsum_gradient_is_reversed_cumsum():
    x = leaf([0.3, -1.0, 2.0])
    with Tape() as tape:
        loss = nx.sum_(nx.cumsum(x, 0))
    g = backward(tape, loss)[x].data
    np.testing.assert_allclose(g, [3, 2, 1])
    fd = finite_diff_grad(lambda z: nx.sum_(nx.cumsum(z, 0)), x).data
    np.testing.assert_allclose(g, fd, rtol=1e-8)


def test_exp_gradient_at_zero():
    x = leaf([0.0])
    with Tape() as tape:
        loss = nx.sum_(nx.exp(x))
    assert backward(tape, loss)[x].item() == 1.0


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = nx.square(x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_disconnected_leaf_gets_zero():
    x, unused = leaf([1.0, 2.0]), leaf([5.0, 6.0, 7.0])
    with Tape() as tape:
        loss = nx.sum_(nx.mul(x, 3.0))
    g = backward(tape, loss, wrt=[x, unused])
    np.testing.assert_array_equal(g[unused].data, np.zeros(3))
    np.testing.assert_array_equal(g[x].data, [3, 3])


def test_backward_twice_is_identical():
    x = leaf(nx.Rng(1).generator.uniform(-1, 1, size=(4, 3)))
    with Tape() as tape:
        loss = nx.sum_(nx.softmax(nx.mul(x, x), 0))
    a = backward(tape, loss)[x].data.copy()
    b = backward(tape, loss)[x].data
    np.testing.assert_array_equal(a, b)


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = nx.exp(x)
        nx.sum_(nx.mul(y, x))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(t is None or id(t) in seen for t in node.inputs)
        seen.add(id(node.out))


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        nx.exp(x)
    assert len(tape) == 0


def test_finite_diff_examples():
    assert abs(finite_diff_grad(lambda z: nx.sum_(nx.square(z)), Tensor([3.0])).item() - 6) < 1e-6
    x = Tensor(nx.Rng(0).generator.normal(size=(2, 3)))
    np.testing.assert_allclose(finite_diff_grad(nx.sum_, x).data, np.ones((2, 3)), atol=1e-9)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda z: nx.sum_(nx.div(Tensor([1.0]), z)), Tensor([0.0]), h=0.0)


def test_rel_error_floor():
    assert rel_error(np.array([0.0]), np.array([1e-12]))[0] == pytest.approx(1e-4)
    assert rel_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def _rand(seed, shape):
    return nx.Rng(seed).generator.uniform(-1, 1, size=shape)


UNARY = {
    "neg": nx.neg, "exp": nx.exp, "square": nx.square, "tanh": nx.tanh,
    "pow3": lambda a: nx.pow_int(a, 3),
    "sqrt": lambda a: nx.sqrt(nx.add(nx.square(a), 1.0)),
    "cumsum": lambda a: nx.cumsum(a, 1),
    "sum": lambda a: nx.sum_(a, axis=0, keepdims=True),
    "mean": lambda a: nx.mean(a, axis=1),
    "max": lambda a: nx.max_(a, axis=1),
    "softmax": lambda a: nx.softmax(a, 1),
    "masked_softmax": lambda a: nx.softmax(a, 1, mask=np.tril(np.ones((4, 5), bool))),
    "log_softmax": lambda a: nx.log_softmax(a, 0),
    "reshape": lambda a: nx.reshape(a, (5, 4)),
    "transpose": lambda a: nx.transpose(a, (1, 0)),
    "getitem": lambda a: nx.getitem(a, (slice(1, 3), slice(None, None, 2))),
    "stack": lambda a: nx.stack([a, nx.square(a)], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_vjp(name):
    fn = UNARY[name]
    proj = _rand(99, fn(Tensor(_rand(0, (4, 5)))).shape)
    reports = check_function(lambda a: nx.sum_(nx.mul(fn(a), Tensor(proj))), {"a": _rand(0, (4, 5))})
    assert reports[0].max_rel_error < 1e-5, reports


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_primitive_vjp_with_broadcast(op):
    a, b = _rand(1, (3, 4)), _rand(2, (1, 4)) + (3.0 if op == "div" else 0.0)
    proj = Tensor(_rand(3, (3, 4)))
    reports = check_function(lambda a, b: nx.sum_(nx.mul(nx.elementwise(op, a, b), proj)),
                             {"a": a, "b": b})
    assert max(r.max_rel_error for r in reports) < 1e-5, reports


def test_matmul_vjp_batched():
    proj = Tensor(_rand(5, (2, 3, 2)))
    reports = check_function(lambda a, b: nx.sum_(nx.mul(nx.matmul(a, b), proj)),
                             {"a": _rand(6, (2, 3, 4)), "b": _rand(7, (4, 2))})
    assert max(r.max_rel_error for r in reports) < 1e-5, reports


def test_gradcheck_report_passed():
    assert GradCheckReport("q", 5e-5, 10).passed()
    assert not GradCheckReport("q", 2e-4, 10).passed(1e-4)


@pytest.mark.parametrize("kernel,shape,kw", [
    ("ea_series", (1, 8, 4), {"order": 2, "causal": False}),
    ("ea_series", (1, 8, 4), {"order": 6, "causal": False}),
    ("ea_full", (1, 6, 3), {}),
    ("ea_full", (1, 6, 3), {"causal": True}),
    ("sa", (1, 8, 8), {"heads": 2}),
    ("sa", (1, 8, 8), {"heads": 2, "causal": True}),
])
def test_kernel_grad_check(kernel, shape, kw):
    reports = grad_check(kernel, shape, seed=0, **kw)
    assert [r.name for r in reports] == ["q", "k", "v"]
    assert all(r.passed(1e-4) for r in reports), reports


def test_causal_series_grad_off_first_position():
    # The first query's gradient exists only through the epsilon guard
    # (~1e-12), below what central differences at h=1e-5 resolve; every
    # other entry must agree tightly.
    from eattn.grad import finite_diff_grad as fd
    from eattn.kernels import EaConfig, ea_series_forward

    cfg = EaConfig(order=2, causal=True)
    g = nx.Rng(0).generator
    q, k, v = (g.uniform(-1, 1, size=(8, 4)) for _ in range(3))
    proj = Tensor(g.uniform(-1, 1, size=(8, 4)))
    qt = Tensor(q, requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_(nx.mul(ea_series_forward(qt, Tensor(k), Tensor(v), cfg), proj))
    ga = backward(tape, loss)[qt].data
    gn = fd(lambda x: nx.sum_(nx.mul(ea_series_forward(x, Tensor(k), Tensor(v), cfg), proj)),
            Tensor(q)).data
    assert np.max(np.abs(ga[0])) < 1e-10
    assert rel_error(ga[1:], gn[1:]).max() < 1e-4
