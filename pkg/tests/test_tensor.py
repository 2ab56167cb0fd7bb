import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lightdp import tensor as T
from lightdp.tensor import ContractError, DimensionError, NumericError, Tensor

from conftest import rel_err


def grad_of(fn, *arrays_):
    """Analytic gradients of scalar fn(*tensors) w.r.t. each array (64-bit)."""
    ts = [Tensor(a, requires_grad=True, name=f"x{i}") for i, a in enumerate(arrays_)]
    with T.Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    return [t.grad for t in ts]


def fd_of(fn, *arrays_, which=0):
    arrs = [np.array(a, dtype=np.float64) for a in arrays_]
    return T.finite_difference_grad(lambda: float(fn(*[Tensor(a) for a in arrs]).data), arrs[which])


def check_fd(fn, *arrays_, tol=1e-4):
    analytic = grad_of(fn, *arrays_)
    for i in range(len(arrays_)):
        assert rel_err(analytic[i], fd_of(fn, *arrays_, which=i)) <= tol


# -- matmul ----------------------------------------------------------------------
def test_matmul_identity(rng):
    b = rng.standard_normal((3, 5))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_fd(rng):
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    check_fd(lambda x, y: T.tsum(T.matmul(x, y)), a, b)


def test_matmul_batched_gradient_fd(rng):
    a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 2))
    check_fd(lambda x, y: T.tsum(T.square(T.matmul(x, y))), a, b)
    c = rng.uniform(-2, 2, (2, 4, 3))
    check_fd(lambda x, y: T.tsum(T.square(T.matmul(x, y))), a, c)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- elementwise --------------------------------------------------------------------
def test_add_zero_identity(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.elementwise("add", Tensor(x), 0.0).data, x)


def test_gelu_zero():
    assert T.elementwise("gelu", Tensor([0.0])).data[0] == 0.0


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 33)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_gelu_gradient_at_points():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    check_fd(lambda t: T.tsum(T.gelu(t)), x)


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_ops_fd_with_broadcast(rng, op):
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4,))
    check_fd(lambda x, y: T.tsum(T.square(T.elementwise(op, x, y))), a, b)


def test_scale_fd(rng):
    check_fd(lambda x: T.tsum(T.square(T.elementwise("scale", x, c=-1.7))), rng.uniform(-2, 2, (5,)))


def test_incompatible_shapes_raise():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3,))))


def test_unknown_elementwise_op():
    with pytest.raises(ContractError):
        T.elementwise("pow", Tensor([1.0]))


# -- softmax / layernorm ---------------------------------------------------------------
def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)


def test_softmax_stabilized():
    out = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert np.max(np.abs(out - [1.0, 0.0, 0.0])) <= 1e-12


def test_softmax_jvp_fd(rng):
    x, w = rng.uniform(-2, 2, (3, 5)), rng.uniform(-2, 2, (3, 5))
    check_fd(lambda t: T.tsum(T.mul(T.softmax(t, axis=-1), Tensor(w))), x)
    check_fd(lambda t: T.tsum(T.mul(T.softmax(t, axis=0), Tensor(w))), x)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1.0)


def test_layernorm_constant_row_is_zero():
    out = T.layernorm(Tensor(np.full((2, 6), 3.5))).data
    assert np.array_equal(out, np.zeros((2, 6)))


def test_layernorm_moments(rng):
    out = T.layernorm(Tensor(rng.uniform(-2, 2, (5, 32)))).data
    assert np.max(np.abs(out.mean(-1))) <= 1e-6
    assert np.allclose(out.var(-1), 1.0, atol=1e-3)


def test_layernorm_fd(rng):
    x, g, b = rng.uniform(-2, 2, (3, 6)), rng.uniform(-2, 2, (6,)), rng.uniform(-2, 2, (6,))
    w = rng.uniform(-2, 2, (3, 6))
    check_fd(lambda t, gg, bb: T.tsum(T.mul(T.layernorm(t, gg, bb), Tensor(w))), x, g, b)


# -- backward contract ------------------------------------------------------------------
def test_backward_sum_is_ones(rng):
    (g,) = grad_of(lambda t: T.tsum(t), rng.standard_normal((3, 2)))
    assert np.array_equal(g, np.ones((3, 2)))


def test_backward_square_is_2x(rng):
    x = rng.standard_normal((4,))
    (g,) = grad_of(lambda t: T.tsum(T.mul(t, t)), x)
    assert np.allclose(g, 2 * x)


def test_backward_returns_zero_for_unreachable():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.square(a))
    grads = tape.backward(loss, {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.zeros(2))
    assert np.array_equal(grads["a"], 2 * np.ones(3))


def test_backward_nonscalar_raises():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.square(a)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_each_tape_node_visited_once():
    # diamond: y = x*x + x*x shares x; every node must pass gradient exactly once
    x = Tensor(np.array([1.5]), requires_grad=True)
    with T.Tape() as tape:
        s = T.square(x)
        y = T.tsum(T.add(s, s))
    tape.backward(y)
    assert np.allclose(x.grad, [4 * 1.5])
    assert len(tape) == 3


def test_chain_rule_matches_staged(rng):
    x = rng.uniform(-2, 2, (4, 3))
    w = rng.uniform(-2, 2, (3, 3))
    (fused,) = grad_of(lambda t: T.tsum(T.gelu(T.matmul(t, Tensor(w)))), x)
    # staged: dL/dh = gelu'(h), dL/dx = dL/dh @ w^T
    h = Tensor(x @ w, requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.gelu(h))
    tape.backward(loss)
    assert np.allclose(fused, h.grad @ w.T, rtol=1e-12, atol=1e-12)


def test_no_tape_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    out = T.square(a)
    assert out.tape_id is None and out._backward is None


def test_no_grad_suspends_recording():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            T.square(a)
        assert len(tape) == 0


def test_getitem_and_reshape_fd(rng):
    x = rng.uniform(-2, 2, (3, 4))
    check_fd(lambda t: T.tsum(T.square(t[1:, ::2].reshape(-1))), x)
    check_fd(lambda t: T.tsum(T.square(t.transpose(1, 0)[[0, 0, 2]])), x)


def test_straight_through_forward_and_backward():
    relaxed = Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
    w = np.array([1.0, -2.0, 3.0])
    with T.Tape() as tape:
        st_ = T.straight_through(np.array([0.0, 1.0, 0.0]), relaxed)
        loss = T.tsum(T.mul(st_, Tensor(w)))
    assert np.array_equal(st_.data, [0.0, 1.0, 0.0])
    tape.backward(loss)
    assert np.array_equal(relaxed.grad, w)


def test_determinism(rng):
    x = rng.standard_normal((8, 8)).astype(np.float32)
    outs = [T.layernorm(T.gelu(T.matmul(Tensor(x), Tensor(x)))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


# -- SVD --------------------------------------------------------------------------------
def test_svd_diagonal():
    _, s, _ = T.svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(s, [3, 2, 1], atol=1e-12)


def test_svd_rank_one(rng):
    w = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    _, s, _ = T.svd(w)
    assert s[0] > 0 and np.all(s[1:] <= 1e-10 * s[0])


@pytest.mark.parametrize("shape", [(16, 16), (7, 5), (5, 9), (1, 4), (3, 1)])
def test_svd_reconstruction_and_oracle(rng, shape):
    w = rng.standard_normal(shape)
    u, s, v = T.svd(w)
    assert np.linalg.norm(w - (u * s) @ v.T) / np.linalg.norm(w) <= 1e-5
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert np.allclose(s, np.linalg.svd(w, compute_uv=False), atol=1e-10)


def test_svd_nonfinite_names_matrix():
    with pytest.raises(NumericError, match="blocks.3.attn.wq"):
        T.svd(np.array([[np.nan, 1.0], [0.0, 1.0]]), name="blocks.3.attn.wq")


def test_svd_iteration_cap_raises(rng):
    with pytest.raises(NumericError, match="did not converge"):
        T.svd(rng.standard_normal((12, 12)), max_sweeps=1)
