"""Tensor engine: finite-difference oracles per primitive, backward
semantics, Adam behavior, checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volplace import autodiff as ad
from volplace.autodiff import Adam, AdamState, Tensor, adam_step, backward, no_grad
from volplace.errors import (
    DetachedTensor,
    MissingFile,
    NonFiniteValue,
    NotScalarLoss,
    ParseError,
    ShapeMismatch,
)


def rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-2)
    return np.max(np.abs(a - n) / denom)


def fd_grad(scalar_fn, x, h=1e-4):
    """Central finite differences of scalar_fn w.r.t. array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = scalar_fn(x)
        x[i] = orig - h
        fm = scalar_fn(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def analytic_grad(scalar_fn, x):
    t = Tensor(x.copy(), requires_grad=True)
    loss = scalar_fn(t)
    grads = backward(loss)
    return grads[t]


def check_op(build_loss, x, h=1e-4):
    """build_loss maps a Tensor (or array inside fd) to a scalar."""
    a = analytic_grad(lambda t: build_loss(t), x)
    n = fd_grad(lambda arr: build_loss(Tensor(arr)).item(), x.copy(), h=h)
    assert rel_err(a, n) < 1e-4, f"rel err {rel_err(a, n)}"


# --------------------------------------------------------------------------
# Trivial pinned cases
# --------------------------------------------------------------------------

def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(2, 2))
    out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.allclose(out.data, m)


def test_layer_norm_constant_vector_is_zero():
    out = ad.layer_norm(Tensor(np.full((1, 5), 3.7)))
    assert np.allclose(out.data, 0.0)


def test_segment_softmax_singleton_is_one():
    out = ad.softmax_over_segments(Tensor(np.array([2.3])), np.array([0]), 1)
    assert np.allclose(out.data, [1.0])


def test_segment_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    vals = Tensor(rng.normal(size=20))
    ids = rng.integers(0, 5, size=20)
    out = ad.softmax_over_segments(vals, ids, 5)
    sums = np.zeros(5)
    np.add.at(sums, ids, out.data)
    present = np.unique(ids)
    assert np.allclose(sums[present], 1.0)


def test_square_sum_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    loss = ad.sum_reduce(ad.square(x))
    grads = backward(loss)
    assert np.allclose(grads[x], [6.0])


def test_unused_parameter_gets_no_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    p = Tensor(np.array([5.0]), requires_grad=True)
    loss = ad.sum_reduce(ad.square(x))
    grads = backward(loss)
    assert p not in grads and p.grad is None


def test_relu_subgradient_zero_at_zero():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    loss = ad.sum_reduce(ad.relu(x))
    grads = backward(loss)
    assert np.allclose(grads[x], [0.0, 0.0, 1.0])


def test_max_reduce_ties_go_to_first():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    loss = ad.sum_reduce(ad.max_reduce(x, axis=1))
    grads = backward(loss)
    assert np.allclose(grads[x], [[0.0, 1.0, 0.0]])


# --------------------------------------------------------------------------
# Finite-difference oracles per primitive
# --------------------------------------------------------------------------

def weighted_sum(t, w):
    return ad.sum_reduce(ad.mul(t, Tensor(w)))


def test_fd_matmul():
    rng = np.random.default_rng(10)
    for _ in range(8):
        b = rng.normal(size=(4, 3))
        w = rng.normal(size=(5, 3))
        check_op(lambda t: weighted_sum(ad.matmul(t, Tensor(b)), w),
                 rng.normal(size=(5, 4)))


def test_fd_add_sub_mul_div_broadcast():
    rng = np.random.default_rng(11)
    for _ in range(8):
        other = rng.normal(size=(1, 4)) + 3.0
        w = rng.normal(size=(3, 4))
        x = rng.normal(size=(3, 4))
        check_op(lambda t: weighted_sum(ad.add(t, Tensor(other)), w), x.copy())
        check_op(lambda t: weighted_sum(ad.sub(t, Tensor(other)), w), x.copy())
        check_op(lambda t: weighted_sum(ad.mul(t, Tensor(other)), w), x.copy())
        check_op(lambda t: weighted_sum(ad.div(t, Tensor(other)), w), x.copy())
        # gradient w.r.t. the broadcast side
        xb = rng.normal(size=(1, 4))
        big = Tensor(rng.normal(size=(3, 4)))
        check_op(lambda t: weighted_sum(ad.add(Tensor(w), ad.mul(big, t)), w), xb)


def test_fd_unary_ops():
    rng = np.random.default_rng(12)
    for _ in range(8):
        w = rng.normal(size=(3, 4))
        safe = rng.normal(size=(3, 4))
        safe = np.where(np.abs(safe) < 0.05, 0.3, safe)  # keep away from kinks
        check_op(lambda t: weighted_sum(ad.relu(t), w), safe.copy())
        check_op(lambda t: weighted_sum(ad.leaky_relu(t, 0.2), w), safe.copy())
        check_op(lambda t: weighted_sum(ad.sigmoid(t), w), rng.normal(size=(3, 4)))
        check_op(lambda t: weighted_sum(ad.square(t), w), rng.normal(size=(3, 4)))
        check_op(lambda t: weighted_sum(ad.sqrt(t), w), rng.random((3, 4)) + 0.5)
        check_op(lambda t: weighted_sum(ad.mul_scalar(t, -1.7), w), rng.normal(size=(3, 4)))


def test_fd_layer_norm():
    rng = np.random.default_rng(13)
    for _ in range(8):
        w = rng.normal(size=(4, 6))
        check_op(lambda t: weighted_sum(ad.layer_norm(t), w), rng.normal(size=(4, 6)))


def test_fd_concat():
    rng = np.random.default_rng(14)
    b = rng.normal(size=(3, 2))
    w = rng.normal(size=(3, 6))
    check_op(
        lambda t: weighted_sum(ad.concat([t, Tensor(b)], axis=1), w),
        rng.normal(size=(3, 4)),
    )


def test_fd_segment_softmax():
    rng = np.random.default_rng(15)
    for _ in range(8):
        ids = rng.integers(0, 4, size=12)
        w = rng.normal(size=12)
        check_op(
            lambda t: weighted_sum(ad.softmax_over_segments(t, ids, 4), w),
            rng.normal(size=12),
        )


def test_fd_gather_scatter():
    rng = np.random.default_rng(16)
    for _ in range(8):
        idx = rng.integers(0, 5, size=9)
        w = rng.normal(size=(9, 3))
        check_op(lambda t: weighted_sum(ad.gather_rows(t, idx), w),
                 rng.normal(size=(5, 3)))
        w2 = rng.normal(size=(5, 3))
        check_op(lambda t: weighted_sum(ad.scatter_add_rows(t, idx, 5), w2),
                 rng.normal(size=(9, 3)))


def test_fd_reductions():
    rng = np.random.default_rng(17)
    for _ in range(8):
        x = rng.normal(size=(4, 5))
        check_op(lambda t: ad.sum_reduce(ad.square(ad.mean_reduce(t, axis=0))), x.copy())
        check_op(lambda t: ad.mean_reduce(ad.square(t)), x.copy())
        # separate entries so the argmax is stable under the fd step
        spread = rng.permutation(20).reshape(4, 5) * 0.37 + rng.normal(size=(4, 5)) * 0.01
        w = rng.normal(size=5)
        check_op(lambda t: weighted_sum(ad.max_reduce(t, axis=0), w), spread)
        check_op(lambda t: ad.square(ad.max_reduce(t)), spread.copy())


def test_fd_composed_chain():
    # several primitives composed, one pass through everything
    rng = np.random.default_rng(18)
    w1 = rng.normal(size=(4, 6))
    w2 = rng.normal(size=(6, 2))

    def loss_fn(t):
        h = ad.relu(ad.matmul(t, Tensor(w1)))
        h = ad.layer_norm(h)
        h = ad.sigmoid(ad.matmul(h, Tensor(w2)))
        return ad.mean_reduce(ad.square(h))

    check_op(loss_fn, rng.normal(size=(3, 4)))


# --------------------------------------------------------------------------
# backward semantics
# --------------------------------------------------------------------------

def test_backward_linearity():
    rng = np.random.default_rng(20)
    x0 = rng.normal(size=(3, 3))

    def l1(t):
        return ad.sum_reduce(ad.square(t))

    def l2(t):
        return ad.mean_reduce(ad.sigmoid(t))

    xa = Tensor(x0.copy(), requires_grad=True)
    g_joint = backward(ad.add(l1(xa), l2(xa)))[xa]
    xb = Tensor(x0.copy(), requires_grad=True)
    g1 = backward(l1(xb))[xb]
    xc = Tensor(x0.copy(), requires_grad=True)
    g2 = backward(l2(xc))[xc]
    assert np.allclose(g_joint, g1 + g2)


def test_gradient_accumulates_over_shared_subexpression():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.square(x)          # x^2
    loss = ad.sum_reduce(ad.add(y, y))  # 2 x^2 -> d/dx = 4x = 8
    grads = backward(loss)
    assert np.allclose(grads[x], [8.0])


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(3, 3))
    t = Tensor(x.copy(), requires_grad=True)
    before = t.data.copy()
    loss = ad.sum_reduce(ad.relu(ad.layer_norm(ad.matmul(t, Tensor(x.copy())))))
    backward(loss)
    assert np.array_equal(t.data, before)


def test_not_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalarLoss):
        backward(ad.square(x))


def test_detached_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        loss = ad.sum_reduce(ad.square(x))
    with pytest.raises(DetachedTensor):
        backward(loss)
    with pytest.raises(DetachedTensor):
        backward(ad.sum_reduce(ad.square(Tensor(np.ones(3)))))


def test_nonfinite_loss():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with np.errstate(divide="ignore"):
        loss = ad.sum_reduce(ad.div(x, Tensor(np.array([0.0]))))
    with pytest.raises(NonFiniteValue):
        backward(loss)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = ad.matmul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_shape_mismatch_cases():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeMismatch):
        ad.gather_rows(Tensor(np.ones((2, 3))), np.array([5]))
    with pytest.raises(ShapeMismatch):
        ad.softmax_over_segments(Tensor(np.ones(3)), np.array([0, 1, 4]), 2)
    with pytest.raises(ShapeMismatch):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bias_gradient_is_column_sum(seed):
    rng = np.random.default_rng(seed)
    h = Tensor(rng.normal(size=(5, 3)))
    b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    w = rng.normal(size=(5, 3))
    grads = backward(weighted_sum(ad.add(h, b), w))
    assert np.allclose(grads[b], w.sum(axis=0, keepdims=True))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    params = {"w": Tensor(p0.copy(), requires_grad=True)}
    state = AdamState(lr=0.1)
    params = adam_step(params, {"w": np.zeros((2, 2))}, state)
    assert np.array_equal(params["w"].data, p0)
    # missing entry treated as zero gradient
    params = adam_step(params, {}, state)
    assert np.array_equal(params["w"].data, p0)


def test_adam_constant_gradient_update_magnitude():
    # with constant g, bias correction gives m_hat=g, v_hat=g^2, so each
    # update has magnitude lr * |g| / (|g| + eps) ~ lr
    lr = 0.01
    g = np.full((3,), 0.37)
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = AdamState(lr=lr)
    prev = params["w"].data.copy()
    for _ in range(1000):
        prev = params["w"].data.copy()
        params = adam_step(params, {"w": g}, state)
    step_mag = np.abs(params["w"].data - prev)
    assert np.all(np.abs(step_mag - lr) / lr < 0.01)
    assert state.step_count == 1000


def test_adam_moves_against_gradient():
    params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    state = AdamState(lr=0.1)
    params = adam_step(params, {"w": np.array([2.0])}, state)
    assert params["w"].data[0] < 1.0


def test_adam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(99)
        params = {"w": Tensor(rng.normal(size=(4, 2)), requires_grad=True)}
        opt = Adam(lr=0.05)
        traj = []
        for _ in range(20):
            g = rng.normal(size=(4, 2))
            params = opt.step(params, {"w": g})
            traj.append(params["w"].data.copy())
        return traj

    t1, t2 = run(), run()
    for a, b in zip(t1, t2):
        assert np.array_equal(a, b)


def test_adam_shape_mismatch():
    params = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"w": np.zeros(3)}, AdamState())


def test_adam_descends_on_quadratic():
    x_opt = np.array([1.0, -2.0, 0.5])
    params = {"x": Tensor(np.zeros(3), requires_grad=True)}
    opt = Adam(lr=0.05)
    for _ in range(500):
        x = params["x"]
        loss = ad.sum_reduce(ad.square(ad.sub(x, Tensor(x_opt))))
        grads = backward(loss)
        params = opt.step(params, {"x": grads[x]})
    assert np.allclose(params["x"].data, x_opt, atol=1e-2)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    params = {
        "a.W": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
        "b": Tensor(rng.normal(size=4), requires_grad=True),
    }
    ad.save_checkpoint(params, tmp_path / "ck.json")
    loaded = ad.load_checkpoint(tmp_path / "ck.json")
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)
        assert loaded[name].requires_grad


def test_checkpoint_missing_and_bad_version(tmp_path):
    with pytest.raises(MissingFile):
        ad.load_checkpoint(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text('{"schema_version": 99, "tensors": {}}')
    with pytest.raises(ParseError):
        ad.load_checkpoint(tmp_path / "bad.json")
