import numpy as np
import pytest

from mssgcl import autodiff as ad
from mssgcl.autodiff import AdamState, BatchNormStats, Tensor, adam_step, grad_check
from mssgcl.errors import ContractError, ShapeError


def param(rng, *shape, positive=False):
    v = rng.normal(size=shape)
    return Tensor(np.abs(v) + 0.5 if positive else v, requires_grad=True)


def central_difference(fn, p, eps=1e-6):
    """Independent numeric gradient used as the oracle."""
    out = np.zeros_like(p.values)
    flat, g = p.values.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = fn().item()
        flat[k] = orig - eps
        lo = fn().item()
        flat[k] = orig
        g[k] = (hi - lo) / (2 * eps)
    return out


def test_segment_sum_example():
    x = Tensor([[1.0, 2], [3, 4], [5, 6]])
    out = ad.segment_sum(x, [0, 0, 1], 2)
    np.testing.assert_array_equal(out.values, [[4, 6], [5, 6]])


def test_relu_backward():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ad.reduce_sum(ad.scale(ad.relu(x), 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 3.0])


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="segment_sum"):
        ad.segment_sum(Tensor(np.ones((3, 2))), [0, 1], 2)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.relu(x).backward()


def test_shared_subexpression_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = x * x
    ad.reduce_sum(y + y).backward()
    np.testing.assert_allclose(x.grad, 4 * x.values)


def _primitive_cases():
    """(name, builder) where builder(rng) -> (scalar fn, params)."""

    def matmul(rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        return lambda: ad.reduce_sum(ad.sigmoid(a @ b)), [a, b]

    def add_broadcast(rng):
        a, b = param(rng, 3, 4), param(rng, 4)
        return lambda: ad.reduce_sum(ad.sigmoid(a + b)), [a, b]

    def sub_mul(rng):
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        return lambda: ad.reduce_sum((a - b) * a), [a, b]

    def scale(rng):
        a = param(rng, 5)
        return lambda: ad.reduce_sum(ad.sigmoid(ad.scale(a, -2.5))), [a]

    def relu(rng):
        a = param(rng, 4, 3)
        w = Tensor(rng.normal(size=(4, 3)))
        return lambda: ad.reduce_sum(ad.relu(a) * w), [a]

    def sigmoid(rng):
        a = param(rng, 6)
        return lambda: ad.reduce_sum(ad.sigmoid(ad.scale(a, 4.0))), [a]

    def lse(rng):
        a = param(rng, 4, 5)
        return lambda: ad.mean(ad.logsumexp_rows(a)), [a]

    def mean(rng):
        a = param(rng, 3, 3)
        return lambda: ad.mean(a * a), [a]

    def concat(rng):
        a, b = param(rng, 2, 3), param(rng, 2, 2)
        w = Tensor(rng.normal(size=(2, 5)))
        return lambda: ad.reduce_sum(ad.sigmoid(ad.concatenate([a, b], axis=1)) * w), [a, b]

    def normalize(rng):
        a = param(rng, 4, 3)
        w = Tensor(rng.normal(size=(4, 3)))
        return lambda: ad.reduce_sum(ad.l2_normalize_rows(a) * w), [a]

    def batch_norm_train(rng):
        x, g, b = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        w = Tensor(rng.normal(size=(6, 3)))
        stats = BatchNormStats.fresh(3)
        return lambda: ad.reduce_sum(ad.batch_norm(x, g, b, stats, training=True) * w), [x, g, b]

    def batch_norm_eval(rng):
        x, g, b = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        w = Tensor(rng.normal(size=(6, 3)))
        stats = BatchNormStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
        return lambda: ad.reduce_sum(ad.batch_norm(x, g, b, stats, training=False) * w), [x, g, b]

    def segment_sum(rng):
        a = param(rng, 5, 2)
        ids = rng.integers(0, 3, size=5)
        return lambda: ad.reduce_sum(ad.sigmoid(ad.segment_sum(a, ids, 3))), [a]

    def take_rows(rng):
        a = param(rng, 4, 3)
        idx = rng.integers(0, 4, size=7)
        return lambda: ad.reduce_sum(ad.sigmoid(ad.take_rows(a, idx))), [a]

    def transpose(rng):
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        return lambda: ad.reduce_sum(ad.sigmoid(a @ b.T)), [a, b]

    def reduce_sum_axis(rng):
        a = param(rng, 3, 4)
        return lambda: ad.reduce_sum(ad.sigmoid(ad.reduce_sum(a, axis=1))), [a]

    return [(f.__name__, f) for f in (
        matmul, add_broadcast, sub_mul, scale, relu, sigmoid, lse, mean, concat, normalize,
        batch_norm_train, batch_norm_eval, segment_sum, take_rows, transpose, reduce_sum_axis,
    )]


@pytest.mark.parametrize("name,build", _primitive_cases())
def test_primitive_gradients(name, build):
    for seed in range(20):
        fn, params = build(np.random.default_rng(seed))
        assert grad_check(fn, params, eps=1e-6) < 1e-4, f"{name} seed {seed}"


def test_random_composite_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, w, b = param(rng, 5, 3), param(rng, 3, 4), param(rng, 4)
        ids = np.array([0, 0, 1, 2, 2])

        def fn():
            h = ad.relu(x @ w + b)
            pooled = ad.segment_sum(h, ids, 3)
            return ad.mean(ad.logsumexp_rows(ad.l2_normalize_rows(pooled)))

        fn().backward()
        for p in (x, w, b):
            numeric = central_difference(fn, p)
            rel = np.abs(p.grad - numeric) / np.maximum(np.maximum(np.abs(p.grad), np.abs(numeric)), 1e-8)
            assert rel.max() < 1e-4
            p.zero_grad()


class TestGradCheck:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        fn = lambda: ad.reduce_sum(x * x)  # noqa: E731
        fn().backward()
        np.testing.assert_allclose(x.grad, [2, 4, 6])
        x.zero_grad()
        assert grad_check(fn, [x]) < 1e-7

    def test_constant_function(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        assert grad_check(lambda: Tensor(3.0), [x]) == 0.0

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda: x * x, [x])

    def test_eps_range(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda: ad.reduce_sum(x), [x], eps=1e-2)


def test_segment_sum_gather_adjoint():
    # <segment_sum(x), y> == <x, gather(y)> for the linear pair.
    rng = np.random.default_rng(3)
    x = param(rng, 7, 2)
    ids = rng.integers(0, 4, size=7)
    y = rng.normal(size=(4, 2))
    ad.reduce_sum(ad.segment_sum(x, ids, 4) * Tensor(y)).backward()
    np.testing.assert_allclose(x.grad, y[ids])
    assert np.isclose((ad.segment_sum(x, ids, 4).values * y).sum(), (x.values * y[ids]).sum())


def test_batch_norm_eval_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 3)))
    g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    stats = BatchNormStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    first = ad.batch_norm(x, g, b, stats, training=False).values
    second = ad.batch_norm(x, g, b, stats, training=False).values
    np.testing.assert_array_equal(first, second)
    # Affine: f(2x) - f(x) == f(x) - f(0)
    zero = ad.batch_norm(Tensor(np.zeros((5, 3))), g, b, stats, training=False).values
    double = ad.batch_norm(Tensor(2 * x.values), g, b, stats, training=False).values
    np.testing.assert_allclose(double - first, first - zero)


def test_batch_norm_running_stats_momentum():
    x = Tensor(np.array([[1.0], [3.0]]))
    stats = BatchNormStats.fresh(1)
    ad.batch_norm(x, Tensor([1.0]), Tensor([0.0]), stats, training=True)
    np.testing.assert_allclose(stats.running_mean, [0.2])
    np.testing.assert_allclose(stats.running_var, [0.9 + 0.1 * 1.0])


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
        p.grad = np.zeros(2)
        adam_step({"p": p}, AdamState(lr=0.1))
        np.testing.assert_array_equal(p.values, [0.3, -1.2])
        assert p.grad is None

    def test_first_step(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = AdamState(lr=0.1)
        adam_step({"p": p}, state)
        np.testing.assert_allclose(p.values, [-0.1 * 1.0 / (1.0 + 1e-8)], rtol=1e-12)
        assert state.step == 1

    def test_constant_gradient_descends(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        values = []
        for _ in range(2):
            p.grad = np.array([1.0])
            adam_step({"p": p}, state)
            values.append(p.values[0])
        assert 0.0 > values[0] > values[1]

    def test_missing_gradient_named(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ContractError, match="'weights'"):
            adam_step({"weights": p}, AdamState())
