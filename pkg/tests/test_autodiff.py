import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simoe import autodiff as ad
from simoe.autodiff import Tensor


def central_diff(f, x: np.ndarray, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def grad_of(build, *tensors):
    for t in tensors:
        t.zero_grad()
    with ad.recording() as tape:
        out = build()
    ad.backward(out, tape)
    return [t.grad for t in tensors]


def test_matmul_values():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(ad.matmul(eye, Tensor([[3.0], [4.0]])).values, [[3.0], [4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).values, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_matches_column_sums_and_fd(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    (ga,) = grad_of(lambda: ad.sum(ad.matmul(a, b)), a)
    np.testing.assert_allclose(ga, np.broadcast_to(b.values.sum(axis=1), (3, 4)))
    fd = central_diff(lambda: (a.values @ b.values).sum(), a.values)
    assert np.max(np.abs(ga - fd) / (np.abs(fd) + 1e-12)) < 1e-6


@pytest.mark.parametrize("x, value, grad", [(0.5, 0.5, 1.0), (-0.3, 0.0, 0.0), (1.7, 1.0, 0.0),
                                            (0.0, 0.0, 0.0), (1.0, 1.0, 0.0)])
def test_clamp01(x, value, grad):
    t = Tensor(np.array([x]), requires_grad=True)
    (g,) = grad_of(lambda: ad.sum(ad.clamp01(t)), t)
    assert ad.clamp01(t).values[0] == value
    assert g[0] == grad


def test_basic_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(4))).values, [0.25] * 4)
    logits = Tensor(np.zeros((2, 5, 64)))
    ce = ad.cross_entropy_logits(logits, np.zeros((2, 5), dtype=int), np.ones((2, 5)))
    assert ce.item() == pytest.approx(math.log(64), abs=1e-12)
    assert ce.item() == pytest.approx(4.1589, abs=1e-4)


def test_empty_mask_is_degenerate():
    with pytest.raises(ad.DegenerateInputError):
        ad.cross_entropy_logits(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), dtype=int), np.zeros((1, 3)))
    with pytest.raises(ad.DegenerateInputError):
        ad.softmax(Tensor(np.zeros((2, 0))))


def test_backward_simple_cases():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    (g,) = grad_of(lambda: ad.sum(x), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    y = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = grad_of(lambda: ad.sum(ad.mul(y, y)), y)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_accumulates_and_rejects_non_scalar():
    y = Tensor([1.0, 2.0], requires_grad=True)
    with ad.recording() as tape:
        out = ad.sum(ad.mul(y, y))
    ad.backward(out, tape)
    ad.backward(out, tape)
    np.testing.assert_array_equal(y.grad, [4.0, 8.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(y, y), tape)


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with ad.recording() as tape:
        ad.sum(ad.tanh(ad.matmul(x, ad.sigmoid(x))))
    produced = set()
    leaves = {id(x)}
    for rec in tape.records:
        for inp in rec.inputs:
            assert id(inp) in produced or id(inp) in leaves or not inp.requires_grad
        produced.add(id(rec.output))


def test_mlp_gradients_match_finite_differences(rng):
    x = rng.normal(size=(5, 4))
    ws = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True, name=f"w{k}")
          for k, s in enumerate([(6, 4), (6, 6), (3, 6)])]

    def f():
        h = ad.tanh(ad.linear(x, ws[0]))
        h = ad.sigmoid(ad.linear(h, ws[1]))
        out = ad.softmax(ad.linear(h, ws[2]))
        return ad.sum(ad.mul(out, out))

    assert ad.finite_difference_check(f, ws, h=1e-5) < 1e-4


def test_finite_difference_check_closed_forms():
    x = Tensor(np.array(0.3), requires_grad=True)
    assert ad.finite_difference_check(lambda: ad.scale(x, 1.0), [x]) < 1e-9
    z = Tensor(np.array(0.0), requires_grad=True)
    assert ad.finite_difference_check(lambda: ad.sigmoid(z), [z], h=1e-5) < 1e-8
    z.zero_grad()
    with ad.recording() as tape:
        out = ad.sigmoid(z)
    ad.backward(out, tape)
    assert z.grad == 0.25


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_difference_check_rejects_non_finite():
    x = Tensor(np.array(-1.0), requires_grad=True)
    with pytest.raises(ad.NumericError):
        ad.finite_difference_check(lambda: ad.log(x), [x])


# one builder per primitive: (input shapes, scalar function of the inputs)
_SCALAR_TARGETS = np.linspace(-1.0, 1.0, 60)


def _weighted(t):
    w = _SCALAR_TARGETS[: t.values.size].reshape(t.shape)
    return ad.sum(ad.mul(t, w))


PRIMITIVES = {
    "add": ([(3, 4), (4,)], lambda a, b: _weighted(ad.add(a, b))),
    "sub": ([(3, 4), (3, 1)], lambda a, b: _weighted(ad.sub(a, b))),
    "mul": ([(3, 4), (1, 4)], lambda a, b: _weighted(ad.mul(a, b))),
    "div": ([(3, 4), (3, 4)], lambda a, b: _weighted(ad.div(a, ad.add(ad.exp(b), 0.5)))),
    "scale": ([(5,)], lambda a: _weighted(ad.scale(a, -2.5))),
    "exp": ([(2, 3)], lambda a: _weighted(ad.exp(a))),
    "log": ([(2, 3)], lambda a: _weighted(ad.log(ad.add(ad.mul(a, a), 0.3)))),
    "sqrt": ([(2, 3)], lambda a: _weighted(ad.sqrt(ad.add(ad.mul(a, a), 0.2)))),
    "sigmoid": ([(4,)], lambda a: _weighted(ad.sigmoid(a))),
    "tanh": ([(4,)], lambda a: _weighted(ad.tanh(a))),
    "silu": ([(4,)], lambda a: _weighted(ad.silu(a))),
    "sum_axis": ([(3, 4)], lambda a: _weighted(ad.sum(a, axis=1))),
    "mean": ([(3, 4)], lambda a: _weighted(ad.mean(a, axis=0))),
    "softmax": ([(3, 5)], lambda a: _weighted(ad.softmax(a))),
    "matmul_batched": ([(2, 3, 4), (4, 2)], lambda a, b: _weighted(ad.matmul(a, b))),
    "linear": ([(2, 3, 4), (5, 4)], lambda a, b: _weighted(ad.linear(a, b))),
    "rmsnorm": ([(3, 6), (6,)], lambda a, b: _weighted(ad.rmsnorm(a, b))),
    "rmsnorm_batched_gain": ([(2, 3, 6), (2, 1, 6)], lambda a, b: _weighted(ad.rmsnorm(a, b))),
    "embedding": ([(7, 3)], lambda a: _weighted(ad.embedding_gather(a, np.array([[1, 4, 1], [0, 6, 2]])))),
    "cross_entropy": ([(2, 3, 5)], lambda a: ad.cross_entropy_logits(
        a, np.array([[1, 4, 0], [2, 2, 3]]), np.array([[1, 1, 0], [0, 1, 1]]))),
    "l2_normalize_rows": ([(3, 4)], lambda a: _weighted(ad.l2_normalize_rows(a))),
    "transpose_reshape": ([(2, 3, 4)], lambda a: _weighted(ad.reshape(ad.transpose(a, (0, 2, 1)), (8, 3)))),
    "getitem": ([(4, 5)], lambda a: _weighted(ad.getitem(a, (slice(1, 3), [0, 0, 4])))),
    "concat_stack": ([(2, 3), (1, 3)], lambda a, b: _weighted(ad.stack([ad.concat([a, b]), ad.concat([b, a])]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_random_seeds(name):
    shapes, fn = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        ts = [Tensor(r.normal(size=s), requires_grad=True) for s in shapes]
        worst = max(worst, ad.finite_difference_check(lambda: fn(*ts), ts, h=1e-5))
    assert worst < 1e-4, f"{name}: max rel err {worst:.3g}"


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(5, 8))
    a = ad.softmax(ad.linear(x, w)).values
    b = ad.softmax(ad.linear(x, w)).values
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_on_simplex(xs):
    p = ad.softmax(Tensor(np.array(xs))).values
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.recording() as tape, ad.no_grad():
        ad.exp(x)
    assert len(tape) == 0
