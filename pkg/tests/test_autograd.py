import math

import mpmath
import numpy as np
import pytest

from tripledml.autograd import (
    Tensor,
    concat,
    grad_check,
    l2_norm,
    log_softmax,
    matmul,
    softmax,
    sq_euclidean,
    tensor,
)
from tripledml.errors import ContractError, NumericError, ShapeError


def test_matmul_identity():
    a = tensor([[1.0, 0.0], [0.0, 1.0]])
    b = tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_orthogonal_selection():
    out = tensor([[1.0, 0.0]]) @ tensor([[0.0], [5.0]])
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    a0 = rng.normal(size=(3, 2))
    b = tensor([[1.0], [1.0]])
    a = tensor(a0, requires_grad=True)
    matmul(a, b).sum().backward()

    h = 1e-5
    numeric = np.zeros_like(a0)
    for idx in np.ndindex(a0.shape):
        up, down = a0.copy(), a0.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = ((up @ b.data).sum() - (down @ b.data).sum()) / (2 * h)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-9)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax(tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_input_does_not_overflow(self):
        out = softmax(tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0
        assert out[1] < 1e-300

    def test_matches_high_precision_oracle(self):
        mpmath.mp.dps = 50
        xs = [mpmath.mpf(1), mpmath.mpf(2), mpmath.mpf(3)]
        denom = sum(mpmath.exp(v) for v in xs)
        expected = [float(mpmath.exp(v) / denom) for v in xs]
        np.testing.assert_allclose(softmax(tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-15)

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            softmax(tensor([1.0, float("nan")]))

    def test_sums_to_one_for_large_magnitudes(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x = rng.uniform(-1e3, 1e3, size=(4, 9))
            s = softmax(tensor(x), axis=1).data.sum(axis=1)
            assert np.max(np.abs(s - 1.0)) <= 1e-12

    def test_log_softmax_consistent(self):
        x = tensor([[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]])
        np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax(x).data, rtol=1e-14)


class TestGradCheck:
    def test_square_is_exact(self):
        err = grad_check(lambda x: x * x, tensor(3.0))
        assert err < 1e-9

    def test_softmax_weighted_sum(self):
        rng = np.random.default_rng(1)
        x = tensor(rng.normal(size=5))
        assert grad_check(lambda t: (softmax(t) * t).sum(), x, h=1e-5) < 1e-6

    def test_step_out_of_range(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: x * x, tensor(1.0), h=1e-2)

    def test_non_finite_output(self):
        with pytest.raises(NumericError):
            grad_check(lambda x: (x - 1.0).log(), tensor(1.0))


def _primitive_cases():
    # each case: (name, builder(rng) -> list of inputs, f)
    return [
        ("add", lambda r: [r.uniform(-3, 3, (3, 4)), r.uniform(-3, 3, (3, 4))], lambda a, b: ((a + b) * (a + b)).sum()),
        ("sub_row_broadcast", lambda r: [r.uniform(-3, 3, (3, 4)), r.uniform(-3, 3, 4)], lambda a, b: ((a - b) * a).sum()),
        ("mul", lambda r: [r.uniform(-3, 3, (2, 3)), r.uniform(-3, 3, (2, 3))], lambda a, b: (a * b).sum()),
        ("div", lambda r: [r.uniform(-3, 3, 4), r.uniform(0.5, 3, 4)], lambda a, b: (a / b).sum()),
        ("scalar", lambda r: [r.uniform(-3, 3, 4)], lambda a: (3.0 * a - 2.0 + a / 4.0).sum() * 0.5),
        ("pow", lambda r: [r.uniform(-3, 3, 4)], lambda a: (a**3).sum()),
        ("exp", lambda r: [r.uniform(-3, 3, 5)], lambda a: a.exp().sum()),
        ("log", lambda r: [r.uniform(0.2, 3, 5)], lambda a: a.log().sum()),
        ("sqrt", lambda r: [r.uniform(0.2, 3, 5)], lambda a: a.sqrt().sum()),
        ("relu", lambda r: [r.uniform(-3, 3, 6)], lambda a: (a.relu() * a).sum()),
        ("tanh", lambda r: [r.uniform(-3, 3, 6)], lambda a: a.tanh().sum()),
        ("matmul", lambda r: [r.uniform(-3, 3, (2, 3)), r.uniform(-3, 3, (3, 2))], lambda a, b: (matmul(a, b) ** 2).sum()),
        ("softmax", lambda r: [r.uniform(-3, 3, (2, 4))], lambda a: (softmax(a, axis=1) * a).sum()),
        ("log_softmax", lambda r: [r.uniform(-3, 3, (2, 4))], lambda a: (log_softmax(a, axis=1) * a).sum()),
        ("l2_norm", lambda r: [r.uniform(-3, 3, (3, 4))], lambda a: l2_norm(a, axis=1).sum()),
        ("sq_euclidean", lambda r: [r.uniform(-3, 3, (3, 4)), r.uniform(-3, 3, (3, 4))], lambda a, b: sq_euclidean(a, b).sum()),
        ("mean", lambda r: [r.uniform(-3, 3, (3, 4))], lambda a: (a.mean(axis=0) ** 2).sum() + a.mean()),
        ("gather_rows", lambda r: [r.uniform(-3, 3, (4, 3))], lambda a: (a.gather_rows([0, 2, 2, 3]) ** 2).sum()),
        ("pick", lambda r: [r.uniform(-3, 3, (3, 4))], lambda a: (a.pick([1, 0, 3]) ** 2).sum()),
        ("concat", lambda r: [r.uniform(-3, 3, (2, 3)), r.uniform(-3, 3, (1, 3))], lambda a, b: (concat([a, b]) ** 2).sum()),
        ("expand", lambda r: [r.uniform(-3, 3, (3, 1)), r.uniform(-3, 3, (3, 4))], lambda a, b: (a.expand(3, 4) * b).sum()),
        ("reshape_T", lambda r: [r.uniform(-3, 3, (2, 6))], lambda a: (a.reshape(3, 4).T ** 2).sum()),
    ]


@pytest.mark.parametrize("name,build,f", _primitive_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_primitive_gradients(name, build, f):
    rng = np.random.default_rng(abs(hash(name)) % (2**32))
    worst = 0.0
    for _ in range(100):
        inputs = [tensor(v) for v in build(rng)]
        worst = max(worst, grad_check(f, inputs, h=1e-5))
    assert worst < 1e-6, f"{name}: {worst:.3e}"


def test_backward_requires_scalar_root():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_sets_root_grad_and_is_deterministic():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(5, 4))
    x0 = rng.normal(size=(6, 5))

    def run():
        w = tensor(w0, requires_grad=True)
        loss = log_softmax(matmul(tensor(x0), w), axis=1).pick([0, 1, 2, 3, 0, 1]).mean()
        order = loss.tape()
        loss.backward()
        return w.grad, loss, order

    g1, root, order = run()
    g2, _, _ = run()
    assert np.array_equal(g1, g2)
    # root seeded with 1.0; leaf grads survive, intermediate ones are released
    assert order[-1] is root
    assert np.array_equal(root.grad, np.ones(()))


def test_tape_is_topological():
    a = tensor(2.0, requires_grad=True)
    b = a * a
    c = b + a
    d = c * b
    order = d.tape()
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert len(order) == len({id(n) for n in order})


def test_shared_subexpression_accumulates():
    a = tensor(3.0, requires_grad=True)
    b = a * a
    (b * b + b).backward()
    # d/da (a^4 + a^2) = 4a^3 + 2a
    assert a.grad == pytest.approx(4 * 27 + 6)


def test_broadcast_rules():
    m = tensor(np.ones((2, 3)))
    assert (m + tensor([1.0, 2.0, 3.0])).shape == (2, 3)
    assert (m * 2.0).shape == (2, 3)
    with pytest.raises(ShapeError):
        m + tensor(np.ones((2, 1)))
    with pytest.raises(ShapeError):
        m + tensor(np.ones(2))
    assert (m * tensor(np.ones((2, 1))).expand(2, 3)).shape == (2, 3)


def test_no_graph_without_requires_grad():
    out = tensor([1.0, 2.0]) * 3.0
    assert not out.requires_grad
    assert out._parents == ()


def test_clamp_blocks_gradient_outside_range():
    x = tensor([0.0, 0.5, 2.0], requires_grad=True)
    x.clamp(1e-12, 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_item_on_non_scalar():
    with pytest.raises(ContractError):
        tensor([1.0, 2.0]).item()
    assert math.isclose(tensor([[4.0]]).item(), 4.0)
