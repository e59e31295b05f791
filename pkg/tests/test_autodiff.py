import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smoothinv import autodiff as ad
from smoothinv.autodiff import Tensor, backward, finite_diff_grad
from smoothinv.errors import ContractError, DimensionError


def rel_err(a, b, floor=1e-6):
    """Largest elementwise relative error over entries with magnitude above ``floor``."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    mag = np.maximum(np.abs(a), np.abs(b))
    keep = mag > floor
    if not keep.any():
        return float(np.max(np.abs(a - b)))
    return float(np.max(np.abs(a - b)[keep] / mag[keep]))


def grad_of(fn, x):
    leaf = Tensor(x, requires_grad=True)
    (g,) = backward(fn(leaf), [leaf])
    return g


def fd_of(fn, x, h=1e-4):
    return finite_diff_grad(lambda z: fn(Tensor(z)).item(), x, h)


# --------------------------------------------------------------------------
# matmul


def test_matmul_identity_and_zero():
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ad.matmul(np.eye(3), x).data, x)
    assert np.array_equal(ad.matmul(np.zeros((2, 3)), x).data, np.zeros((2, 2)))


def test_matmul_hand_value():
    out = ad.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 2)))


def test_matmul_gradients_both_inputs():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    f_a = lambda t: ad.total(ad.relu(ad.matmul(t, Tensor(b))))  # noqa: E731
    f_b = lambda t: ad.total(ad.matmul(Tensor(a), t))  # noqa: E731
    assert rel_err(grad_of(f_a, a), fd_of(f_a, a)) < 1e-4
    assert rel_err(grad_of(f_b, b), fd_of(f_b, b)) < 1e-4


# --------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(1).random((2, 4, 4))
    k = np.zeros((2, 2, 1, 1))
    k[0, 0] = k[1, 1] = 1.0
    assert np.array_equal(ad.conv2d(x, k).data, x)


def test_conv_zero_input():
    assert not ad.conv2d(np.zeros((1, 5, 5)), np.ones((3, 1, 2, 2))).data.any()


def test_conv_hand_value():
    out = ad.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_output_size_with_stride():
    out = ad.conv2d(np.ones((1, 7, 7)), np.ones((1, 1, 3, 3)), stride=2)
    assert out.shape == (1, 3, 3)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 2))
    out = ad.conv2d(x, k, stride=2).data
    for f in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = x[:, 2 * i:2 * i + 3, 2 * j:2 * j + 2]
                assert out[f, i, j] == pytest.approx((patch * k[f]).sum())


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=(2, 3, 2 if stride == 2 else 4, 2 if stride == 2 else 4))
    f_x = lambda t: ad.total(ad.mul(ad.conv2d(t, Tensor(k), stride), Tensor(w)))  # noqa: E731
    f_k = lambda t: ad.total(ad.mul(ad.conv2d(Tensor(x), t, stride), Tensor(w)))  # noqa: E731
    assert rel_err(grad_of(f_x, x), fd_of(f_x, x)) < 1e-4
    assert rel_err(grad_of(f_k, k), fd_of(f_k, k)) < 1e-4


# --------------------------------------------------------------------------
# relu, pooling


def test_relu_cases():
    assert not ad.relu(-np.arange(1.0, 5)).data.any()
    pos = np.arange(1.0, 5)
    assert np.array_equal(ad.relu(pos).data, pos)
    assert ad.relu(np.array([-1.0, 0, 2])).data.tolist() == [0, 0, 2]


def test_relu_subgradient_at_zero_is_zero():
    g = grad_of(lambda t: ad.total(ad.relu(t)), np.array([-1.0, 0.0, 2.0]))
    assert g.tolist() == [0.0, 0.0, 1.0]


def test_avg_pool_cases():
    assert np.all(ad.avg_pool2(np.full((2, 4, 6), 0.7)).data == pytest.approx(0.7))
    assert ad.avg_pool2(np.array([[[0.0, 2], [4, 6]]])).data.item() == 3.0
    assert not ad.avg_pool2(np.zeros((1, 4, 4))).data.any()


def test_avg_pool_odd_size():
    with pytest.raises(DimensionError):
        ad.avg_pool2(np.zeros((1, 3, 4)))


def test_avg_pool_gradient():
    x = np.random.default_rng(4).normal(size=(2, 4, 4))
    w = np.random.default_rng(5).normal(size=(2, 2, 2))
    f = lambda t: ad.total(ad.mul(ad.avg_pool2(t), Tensor(w)))  # noqa: E731
    assert rel_err(grad_of(f, x), fd_of(f, x)) < 1e-4


# --------------------------------------------------------------------------
# cross-entropy


def test_cross_entropy_uniform_logits():
    for t in (0, 4, 9):
        assert ad.softmax_cross_entropy(np.zeros(10), t).item() == pytest.approx(np.log(10), abs=1e-12)


def test_cross_entropy_large_gap():
    logits = np.zeros(10)
    logits[3] = 100.0
    loss = ad.softmax_cross_entropy(logits, 3).item()
    assert 0 <= loss < 1e-30 or loss == 0.0


def test_cross_entropy_hand_value():
    assert ad.softmax_cross_entropy(np.array([1.0, 0.0]), 0).item() == pytest.approx(0.313262, abs=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(np.zeros(3), -1)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = np.random.default_rng(6).normal(size=7)
    g = grad_of(lambda t: ad.softmax_cross_entropy(t, 2), logits)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    expected = p - np.eye(7)[2]
    assert np.allclose(g, expected, atol=1e-12)
    fd = fd_of(lambda t: ad.softmax_cross_entropy(t, 2), logits)
    assert rel_err(g, fd) < 1e-4


def test_batched_cross_entropy_is_mean():
    logits = np.random.default_rng(7).normal(size=(4, 5))
    targets = [0, 3, 1, 4]
    batched = ad.softmax_cross_entropy(logits, targets).item()
    single = np.mean([ad.softmax_cross_entropy(row, t).item() for row, t in zip(logits, targets)])
    assert batched == pytest.approx(single, rel=1e-12)


# --------------------------------------------------------------------------
# backward / finite differences


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    (g,) = backward(ad.total(x), [x])
    assert np.array_equal(g, np.ones((3, 4)))


def test_backward_independent_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(4), requires_grad=True)
    gx, gy = backward(ad.total(x), [x, y])
    assert np.array_equal(gy, np.zeros(4))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(ad.relu(x))


def test_backward_visits_shared_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.add(y, y)  # 2x^2
    (g,) = backward(ad.total(z), [x])
    assert g.tolist() == [8.0]
    graph = ad.Graph.trace(ad.total(z))
    assert len({id(n) for n in graph.nodes}) == len(graph.nodes)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_backward_two_layer_net_against_finite_differences():
    rng = np.random.default_rng(8)
    w1, w2 = rng.normal(size=(6, 5)), rng.normal(size=(5, 3))
    x = rng.normal(size=(1, 6))

    def f(t):
        return ad.softmax_cross_entropy(ad.matmul(ad.relu(ad.matmul(t, Tensor(w1))), Tensor(w2)), [1])

    assert rel_err(grad_of(f, x), fd_of(f, x)) < 1e-4


def test_finite_diff_square():
    g = finite_diff_grad(lambda z: float(z[0] ** 2), np.array([3.0]), 1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant():
    assert not finite_diff_grad(lambda z: 4.2, np.ones(5)).any()


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda z: 0.0, np.ones(2), 0.0)


@pytest.mark.parametrize("op", ["sigmoid", "log", "softmax_pick", "broadcast", "l2_norm", "mean0", "cast"])
def test_misc_op_gradients(op):
    rng = np.random.default_rng(9)
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(3, 4))
    fns = {
        "sigmoid": lambda t: ad.total(ad.mul(ad.sigmoid(t), Tensor(w))),
        "log": lambda t: ad.total(ad.mul(ad.log(t), Tensor(w))),
        "softmax_pick": lambda t: ad.pick(ad.mean0(ad.softmax(t)), 2),
        "broadcast": lambda t: ad.total(ad.mul(ad.broadcast_to(ad.reshape(t, (1, 3, 4)), (2, 3, 4)),
                                               Tensor(np.stack([w, -2 * w])))),
        "l2_norm": lambda t: ad.l2_norm(t),
        "mean0": lambda t: ad.total(ad.mul(ad.broadcast_to(ad.mean0(t), (3, 4)), Tensor(w))),
        "cast": lambda t: ad.total(ad.mul(ad.cast(t, np.float64), Tensor(w))),
    }
    f = fns[op]
    assert rel_err(grad_of(f, x), fd_of(f, x)) < 1e-4


# --------------------------------------------------------------------------
# norms


def test_l2_norm_cases():
    assert ad.l2_norm(np.zeros(4)).item() == 0.0
    assert ad.l2_norm(np.eye(5)[2]).item() == 1.0
    assert ad.l2_norm(np.array([3.0, 4.0])).item() == 5.0


def test_l2_project_cases():
    x = np.array([0.3, 0.4])
    assert np.array_equal(ad.l2_project(x, 1.0), x)
    assert np.allclose(ad.l2_project(np.array([3.0, 4.0]), 2.5), [1.5, 2.0])
    assert not ad.l2_project(np.zeros(3), 0.7).any()


def test_l2_project_negative_radius():
    with pytest.raises(ContractError):
        ad.l2_project(np.ones(2), -1.0)


def test_l2_normalize_cases():
    u = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(ad.l2_normalize(u), u)
    assert np.allclose(ad.l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    with np.errstate(all="raise"):
        assert not ad.l2_normalize(np.zeros(4)).any()


# --------------------------------------------------------------------------
# properties

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)
vectors = arrays(np.float32, st.integers(1, 64), elements=finite)


@settings(max_examples=300, deadline=None)
@given(vectors, st.floats(0, 100, width=32))
def test_projection_feasible_and_idempotent(x, eps):
    once = ad.l2_project(x, eps)
    assert ad.l2_norm(once).item() <= eps * (1 + 1e-9)
    twice = ad.l2_project(once, eps)
    assert np.array_equal(once, twice)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 12)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(logits):
    p = ad.softmax(logits).data
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, (2, 6, 6), elements=finite))
def test_ops_are_deterministic(x):
    k = np.linspace(-1, 1, 2 * 2 * 3 * 3, dtype=np.float32).reshape(2, 2, 3, 3)
    a = ad.avg_pool2(ad.relu(ad.conv2d(x, k))).data
    b = ad.avg_pool2(ad.relu(ad.conv2d(x.copy(), k.copy()))).data
    assert np.array_equal(a.view(np.uint32), b.view(np.uint32))


def test_tensor_data_is_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
