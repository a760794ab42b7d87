import math

import numpy as np
import pytest

from cotvote import tensor as T
from cotvote.errors import ConfigError, NumericError, ShapeError
from cotvote.rng import RngStream
from cotvote.tensor import Tensor, finite_difference_check, no_grad


def rand(rng, *shape):
    return rng.normal(shape)


def fd_check_op(build, tensors, eps=1e-5):
    """Finite-difference a composite op over its Tensor inputs."""
    return finite_difference_check(build, tensors, eps=eps)


# -- basic contracts -----------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((eye @ m).data, m.data)


def test_matmul_projector():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    m = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((p @ m).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))
    assert "(3, 4)" in str(err.value) and "(5, 2)" in str(err.value)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_sum_backward_all_ones():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_at_3():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_grad_accumulates_until_cleared():
    x = Tensor(2.0, requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(8.0)
    x.grad = None
    (x * x).backward()
    assert x.grad == pytest.approx(4.0)


def test_leaf_grad_sums_over_all_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * 3.0
    (y.sum() + (x * x).sum()).backward()
    assert np.allclose(x.grad, 3.0 + 2.0 * x.data)


def test_diamond_graph_with_unequal_path_depths():
    # x feeds a shallow consumer and, through m, a deep one; both
    # contributions must land in x.grad
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    m = x.sum(axis=0) / 2.0
    dev = x - m
    loss = ((dev * dev).sum() * 0.0 + (m * 1.0).sum())
    loss.backward()
    assert np.allclose(x.grad, 0.5)

    x.grad = None
    probe = np.array([0.3, -0.7])
    err = finite_difference_check(
        lambda: (((x - x.sum(axis=0) / 2.0) * probe).exp()).sum(), [x]
    )
    assert err <= 1e-6


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(4), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and not y.requires_grad


# -- softmax cross-entropy ------------------------------------------------------


def test_ce_uniform_two_classes():
    loss = T.softmax_cross_entropy(Tensor([0.0, 0.0]), 0)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_ce_three_way_symmetry():
    loss = T.softmax_cross_entropy(Tensor([10.0, 10.0, 10.0]), 2)
    assert loss.item() == pytest.approx(math.log(3.0), abs=1e-12)


def test_ce_matches_unstabilized_formula():
    logits = [1.0, 4.0, 0.0]
    direct = -logits[1] + math.log(sum(math.exp(x) for x in logits))
    loss = T.softmax_cross_entropy(Tensor(logits), 1)
    assert loss.item() == pytest.approx(direct, abs=1e-12)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)


def test_ce_rejects_single_class():
    with pytest.raises(ShapeError):
        T.softmax_cross_entropy(Tensor([1.0]), 0)


def test_ce_shift_invariance():
    rng = RngStream(3, 1)
    logits = rng.normal((7,))
    for c in (0.5, -13.0, 250.0):
        a = T.softmax_cross_entropy(Tensor(logits), 4).item()
        b = T.softmax_cross_entropy(Tensor(logits + c), 4).item()
        assert a == pytest.approx(b, abs=1e-12)


def test_ce_convexity_witness():
    # CE(t*a + (1-t)*b, y) <= t*CE(a,y) + (1-t)*CE(b,y) for all mixes
    rng = RngStream(11, 0)
    for trial in range(200):
        a = rng.normal((6,)) * 3.0
        b = rng.normal((6,)) * 3.0
        y = int(rng.integers(0, 6))
        t = rng.random()
        lhs = T.softmax_cross_entropy(Tensor(t * a + (1 - t) * b), y).item()
        rhs = t * T.softmax_cross_entropy(Tensor(a), y).item() + (1 - t) * T.softmax_cross_entropy(
            Tensor(b), y
        ).item()
        assert lhs <= rhs + 1e-12


# -- dropout ---------------------------------------------------------------------


def test_dropout_p_zero_is_identity():
    x = Tensor(np.arange(10.0), requires_grad=True)
    y = T.dropout(x, 0.0, RngStream(0), training=True)
    assert y is x


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(10.0))
    y = T.dropout(x, 0.5, None, training=False)
    assert y is x


def test_dropout_bad_probability():
    x = Tensor(np.ones(3))
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(ConfigError):
            T.dropout(x, p, RngStream(0), training=True)


def test_dropout_survivor_fraction_and_mean():
    x = Tensor(np.full(100_000, 2.0))
    y = T.dropout(x, 0.5, RngStream(42, 9), training=True)
    survivors = np.count_nonzero(y.data) / x.size
    assert abs(survivors - 0.5) < 0.01
    assert abs(y.data.mean() - 2.0) / 2.0 < 0.02


def test_dropout_deterministic_per_stream():
    x = Tensor(np.ones(1000))
    a = T.dropout(x, 0.3, RngStream(7, 1), training=True)
    b = T.dropout(x, 0.3, RngStream(7, 1), training=True)
    assert np.array_equal(a.data, b.data)


# -- finite-difference agreement for every differentiable op ---------------------


def test_fd_quadratic_tiny_error():
    theta = Tensor(RngStream(1, 2).normal((6,)), requires_grad=True)
    err = finite_difference_check(lambda: (theta * theta).sum() * 0.5, [theta])
    assert err <= 1e-8


def test_fd_matmul():
    rng = RngStream(5, 0)
    a = Tensor(rng.normal((3, 4)), requires_grad=True)
    b = Tensor(rng.normal((4, 2)), requires_grad=True)
    err = finite_difference_check(lambda: (T.matmul(a, b) * T.matmul(a, b)).sum(), [a, b])
    assert err <= 1e-6


def test_fd_batched_matmul_shared_weight():
    rng = RngStream(5, 1)
    a = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal((4, 5)), requires_grad=True)
    err = finite_difference_check(lambda: (T.matmul(a, w) * 0.3).exp().sum(), [a, w])
    assert err <= 1e-6


def test_fd_elementwise_chain():
    rng = RngStream(5, 2)
    x = Tensor(rng.normal((8,)) * 0.5 + 2.0, requires_grad=True)
    y = Tensor(rng.normal((8,)) * 0.5 + 3.0, requires_grad=True)

    def f():
        return ((x * y + x / y - y).exp() * 0.1 + (x * x).sqrt()).log().sum()

    assert finite_difference_check(f, [x, y]) <= 1e-6


def test_fd_softmax():
    x = Tensor(RngStream(5, 3).normal((3, 7)), requires_grad=True)
    w = RngStream(6, 3).normal((3, 7))
    err = finite_difference_check(lambda: (T.softmax(x) * w).sum(), [x])
    assert err <= 1e-6


def test_fd_cross_entropy_layer():
    rng = RngStream(5, 4)
    x = Tensor(rng.normal((4, 6)), requires_grad=True)
    w = Tensor(rng.normal((6, 9)), requires_grad=True)
    targets = rng.integers(0, 9, (4,))
    err = finite_difference_check(
        lambda: T.cross_entropy_logits(T.matmul(x, w), targets).mean(), [x, w]
    )
    assert err <= 1e-6


def test_fd_layer_norm():
    rng = RngStream(5, 5)
    x = Tensor(rng.normal((3, 6)), requires_grad=True)
    g = Tensor(rng.normal((6,)) * 0.2 + 1.0, requires_grad=True)
    b = Tensor(rng.normal((6,)) * 0.2, requires_grad=True)
    probe = rng.normal((3, 6))
    err = finite_difference_check(lambda: (T.layer_norm(x, g, b) * probe).sum(), [x, g, b])
    assert err <= 1e-6


def test_fd_embedding_scatter_add():
    rng = RngStream(5, 6)
    table = Tensor(rng.normal((10, 4)), requires_grad=True)
    ids = np.array([1, 3, 3, 0, 9])
    probe = rng.normal((5, 4))
    err = finite_difference_check(lambda: (T.embedding(table, ids) * probe).sum(), [table])
    assert err <= 1e-6


def test_fd_attention():
    rng = RngStream(5, 7)
    q = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
    k = Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    v = Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    mask = np.zeros((2, 3, 5))
    mask[:, :, -1] = -1e9
    probe = rng.normal((2, 3, 4))
    err = finite_difference_check(lambda: (T.attention(q, k, v, mask) * probe).sum(), [q, k, v])
    assert err <= 1e-6


def test_fd_through_dropout_with_replayed_stream():
    x = Tensor(RngStream(5, 8).normal((20,)), requires_grad=True)

    def f():
        # fresh stream per call so every evaluation sees the same mask
        return (T.dropout(x, 0.4, RngStream(99, 1), training=True) * 0.7).exp().sum()

    assert finite_difference_check(f, [x]) <= 1e-6


def test_attention_matches_composition_from_primitives():
    rng = RngStream(5, 9)
    q = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
    k = Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    v = Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    mask = np.zeros((2, 3, 5))
    mask[:, 1:, 0] = -1e9

    fused = T.attention(q, k, v, mask)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(4)) + Tensor(mask)
    composed = T.matmul(T.softmax(scores), v)
    assert np.allclose(fused.data, composed.data, atol=1e-12)

    probe = rng.normal((2, 3, 4))
    (fused * probe).sum().backward()
    gq_fused = q.grad.copy()
    q.grad = None
    (composed * probe).sum().backward()
    assert np.allclose(gq_fused, q.grad, atol=1e-12)


def test_layer_norm_matches_composition():
    rng = RngStream(5, 10)
    x = Tensor(rng.normal((4, 6)))
    g = Tensor(rng.normal((6,)) + 1.0)
    b = Tensor(rng.normal((6,)))
    fused = T.layer_norm(x, g, b)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    composed = xc / (var + 1e-5).sqrt() * g + b
    assert np.allclose(fused.data, composed.data, atol=1e-12)


def test_sqrt_zero_subgradient_keeps_nan_out():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    y = x.sqrt().sum()
    y.backward()
    assert np.array_equal(x.grad, [0.0, 0.25])


def test_fd_rejects_bad_eps():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ConfigError):
        finite_difference_check(lambda: (x * x).sum(), [x], eps=0.0)


def test_fd_rejects_non_finite_objective():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError):
        finite_difference_check(lambda: (x / x).sum(), [x])
