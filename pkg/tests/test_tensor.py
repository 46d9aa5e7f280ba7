import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmsa import tensor as T
from mmsa.tensor import AdamState, DomainError, ShapeError, Tape, Tensor, adam_step, backward, finite_diff_check


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


UNARY = {
    "exp": T.exp,
    "log": lambda x: T.log(T.exp(x) + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 1.0),
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
    "relu": lambda x: T.relu(x + 0.05),
    "abs": lambda x: T.absolute(x + 0.05),
    "power": lambda x: T.power(x * x + 1.0, 1.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng, 3, 4)
    res = finite_diff_check(lambda ps: T.tsum(UNARY[name](ps[0]) * np.arange(12.0).reshape(3, 4)), [x])
    assert res.max_rel_error < 1e-5, res


def test_broadcasting_gradients_unbroadcast(rng):
    a, b, c = leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 3, 1)
    f = lambda ps: T.tsum((ps[0] * ps[1] - ps[2]) / (ps[1] * ps[1] + 1.0))
    assert finite_diff_check(f, [a, b, c]).max_rel_error < 1e-6
    with Tape() as tape:
        loss = f([a, b, c])
    g = backward(tape, loss, [a, b, c])
    assert g[b].shape == (4,) and g[c].shape == (3, 1)


def test_matmul_spmm_and_shape_errors(rng):
    import scipy.sparse as sp
    a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
    m = sp.random(4, 3, density=0.5, random_state=0, format="csr")
    f = lambda ps: T.tsum(T.spmm(m, ps[0] @ ps[1]) ** 2)
    assert finite_diff_check(f, [a, b]).max_rel_error < 1e-6
    with pytest.raises(ShapeError):
        T.matmul(a, a)


def test_indexing_concat_stack_reshape(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 2)
    idx = np.array([0, 2, 2, 3])

    def f(ps):
        x = T.concat([T.take_rows(ps[0], idx), ps[1]], axis=1)
        y = T.stack([x, x * 2.0], axis=0)
        return T.tsum(T.reshape(y, (8, 5))[1:6] ** 2) + T.tsum(T.transpose(ps[0])[1])

    assert finite_diff_check(f, [a, b]).max_rel_error < 1e-6


def test_softmax_rows_sum_to_one_and_gradient(rng):
    x = leaf(rng, 5, 7)
    s = T.softmax(x * 50.0, axis=1)
    assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)
    w = rng.normal(size=(5, 7))
    assert finite_diff_check(lambda ps: T.tsum(T.softmax(ps[0], axis=1) * w), [x]).max_rel_error < 1e-6
    with pytest.raises(DomainError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=1)


def test_softmax_is_stable_for_large_inputs():
    s = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])))
    assert np.allclose(s.data, [0.5, 0.5, 0.0])


def test_softplus_large_arguments_are_exact():
    out = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert out[0] == 0.0 and np.isclose(out[1], np.log(2.0)) and out[2] == 800.0


def test_norm_gradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        n = T.norm(x)
    assert backward(tape, n, [x])[x].tolist() == [0.0, 0.0, 0.0]


def test_cosine_similarity_and_zero_vector():
    u = Tensor(np.array([1.0, 0.0]))
    assert T.cosine_similarity(u, Tensor(np.array([2.0, 0.0]))).item() == pytest.approx(1.0)
    with pytest.raises(DomainError):
        T.cosine_similarity(u, Tensor(np.zeros(2)))


def test_conv2d_matches_naive_loop_and_gradient(rng):
    x, w, b = leaf(rng, 2, 7, 7, 3), leaf(rng, 3, 3, 3, 4), leaf(rng, 4)
    out = T.conv2d(x, w, b, stride=2, pad=1).data
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for i in range(4):
            for j in range(4):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                ref[n, i, j] = np.tensordot(patch, w.data, axes=3) + b.data
    assert np.allclose(out, ref, atol=1e-12)
    f = lambda ps: T.tsum(T.conv2d(ps[0], ps[1], ps[2], stride=2, pad=1) ** 2)
    assert finite_diff_check(f, [x, w, b]).max_rel_error < 1e-5


def test_unused_parameter_gets_zero_gradient(rng):
    a, b = leaf(rng, 2), leaf(rng, 2)
    with Tape() as tape:
        loss = T.tsum(a * a)
    g = backward(tape, loss, [a, b])
    assert np.all(g[b] == 0.0)


def test_no_tape_records_nothing(rng):
    a = leaf(rng, 3)
    with Tape() as tape:
        with T.no_tape():
            T.exp(a)
    assert len(tape) == 0


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.001)
    adam_step(state, [p], [np.array([3.0, -0.5])])
    assert np.allclose(p.data, [1.0 - 0.001, -2.0 + 0.001], atol=1e-9)


def test_adam_zero_lr_leaves_parameters():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    adam_step(AdamState(lr=0.0), [p], [np.ones(2)])
    assert p.data.tolist() == [1.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_sum_of_exp_gradient_equals_exp(x):
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.exp(t))
    assert np.allclose(backward(tape, loss, [t])[t], np.exp(x))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(x):
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(s >= 0) and np.allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_hand_cases():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    swap = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert (a @ swap).data.tolist() == [[2.0, 1.0], [4.0, 3.0]]
    assert (Tensor(np.eye(2)) @ a).data.tolist() == a.data.tolist()
    assert (Tensor([[2.0]]) @ Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_softmax_closed_forms():
    assert np.allclose(T.softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)
    assert np.allclose(T.softmax(Tensor([4.0, 4.0, 4.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softplus_values_and_identity(rng):
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(0.693147, abs=1e-6)
    assert abs(T.softplus(Tensor(50.0)).item() - 50.0) < 1e-9
    x = rng.normal(size=20) * 10
    assert np.allclose(T.softplus(Tensor(x)).data - T.softplus(Tensor(-x)).data, x, atol=1e-12)


def test_cosine_of_diagonal():
    c = T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item()
    assert c == pytest.approx(0.707107, abs=1e-6)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0


def test_backward_square_and_sum():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    assert backward(tape, y, [x])[x] == pytest.approx(6.0)
    v = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        s = v.sum()
    assert backward(tape, s, [v])[v].tolist() == [1.0] * 4


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(T.ContractError):
        backward(tape, y, [x])


def test_finite_diff_linear_and_constant(rng):
    x = leaf(rng, 4)
    w = rng.normal(size=4)
    assert finite_diff_check(lambda ps: T.tsum(ps[0] * w), [x]).max_rel_error < 1e-9
    assert finite_diff_check(lambda ps: T.tsum(ps[0] * 0.0) + 3.0, [x]).max_rel_error == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_reports_non_finite(rng):
    x = Tensor(np.array([1e-12]), requires_grad=True)
    res = finite_diff_check(lambda ps: T.tsum(T.log(ps[0])), [x])
    assert not res.finite and res.param_index == 0


def test_adam_step_counter_and_shape_check():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState()
    adam_step(state, [p], [np.ones(2)])
    adam_step(state, [p], [np.ones(2)])
    assert state.step == 2
    with pytest.raises(ShapeError):
        adam_step(state, [p], [np.ones(3)])
