import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from escorte import numcore as nc


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nc.matmul(np.eye(2), a), a)


def test_matmul_hand_computed():
    out = nc.matmul([[1, 2], [3, 4]], [[5], [6]])
    np.testing.assert_array_equal(out, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_relu_cases():
    np.testing.assert_array_equal(nc.relu(np.array([-1.0, 2.0, 0.0])), [0, 2, 0])
    np.testing.assert_array_equal(nc.relu(-np.ones((2, 3))), np.zeros((2, 3)))
    x = np.array([[0.5, 3.0]])
    np.testing.assert_array_equal(nc.relu(x), x)


def test_row_softmax_examples():
    np.testing.assert_allclose(nc.row_softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]], atol=1e-15)
    # e / (e + 1)
    np.testing.assert_allclose(
        nc.row_softmax(np.array([[1.0, 0.0]])), [[0.7310585786300049, 0.2689414213699951]], atol=1e-15
    )
    out = nc.row_softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 1.0 and out[0, 1] < 1e-300


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 5),
    st.integers(1, 6),
    st.integers(0, 2**32 - 1),
    st.floats(-50, 50),
)
def test_row_softmax_sums_and_shift_invariance(rows, cols, seed, shift):
    v = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    s = nc.row_softmax(v)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nc.row_softmax(v + shift), s, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matmul_associative(m, n, k, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, n)), r.normal(size=(n, k)), r.normal(size=(k, p))
    np.testing.assert_allclose(nc.matmul(nc.matmul(a, b), c), nc.matmul(a, nc.matmul(b, c)), atol=1e-9)


def test_backward_square():
    t = nc.Tape()
    x = t.leaf(3.0)
    g = nc.backward(t, x * x)
    assert g[x] == 6.0


def test_backward_relu_dead_region():
    t = nc.Tape()
    x = t.leaf(np.array([-1.0]))
    g = nc.backward(t, nc.sum_(nc.relu(x)))
    assert g[x][0] == 0.0


def test_backward_nonscalar_loss_is_contract_error():
    t = nc.Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(nc.ContractError):
        nc.backward(t, x * 2.0)


def test_backward_exposes_intermediate_leaf_gradients():
    t = nc.Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    c = t.leaf(np.array([3.0, 4.0]))  # not optimized, still differentiated
    g = nc.backward(t, nc.sum_(x * c))
    np.testing.assert_array_equal(g[c], [1.0, 2.0])


def test_backward_visits_each_node_once():
    t = nc.Tape()
    x = t.leaf(np.array([2.0]))
    y = x * x
    loss = nc.sum_(y + y)
    ids = [n[0] for n in t.nodes]
    assert len(ids) == len(set(ids)) and ids == sorted(ids)
    assert nc.backward(t, loss)[x][0] == 8.0


def test_matmul_chain_matches_finite_differences():
    r = nc.make_rng(1)
    ps = [r.normal(size=(3, 3)) for _ in range(3)]

    def f(v):
        return nc.sum_(nc.mul(nc.matmul(nc.matmul(v[0], v[1]), v[2]), np.arange(9.0).reshape(3, 3)))

    assert nc.grad_check(f, ps) < 1e-6


def test_grad_check_quadratic_form():
    r = nc.make_rng(2)
    q = r.normal(size=(4, 4))
    q = q @ q.T
    x = r.normal(size=(4, 1))

    def f(v):
        return nc.sum_(nc.matmul(nc.transpose(v[0], (1, 0)), nc.matmul(q, v[0])))

    assert nc.grad_check(f, [x]) < 1e-9


@pytest.mark.parametrize(
    "op",
    [
        lambda v: nc.sum_(nc.mul(nc.softmax(v[0]), np.arange(12.0).reshape(3, 4))),
        lambda v: nc.sum_(nc.mul(nc.log_softmax(v[0]), np.arange(12.0).reshape(3, 4))),
        lambda v: nc.sum_(nc.mul(nc.layer_norm(v[0]), np.arange(12.0).reshape(3, 4))),
        lambda v: nc.sum_(nc.l2norm(v[0])),
        lambda v: nc.sum_(nc.mean(nc.mul(v[0], v[0]), axis=1)),
        lambda v: nc.sum_(nc.mul(nc.transpose(nc.reshape(v[0], (4, 3)), (1, 0)), np.arange(12.0).reshape(3, 4))),
        lambda v: nc.sum_(nc.log(nc.add(nc.mul(v[0], v[0]), 1.0))),
        lambda v: nc.sum_(nc.mul(nc.take(v[0], 1, axis=1), nc.take(v[0], -1, axis=1))),
    ],
    ids=["softmax", "log_softmax", "layer_norm", "l2norm", "mean", "reshape_transpose", "log", "take"],
)
def test_primitive_gradients(op):
    x = nc.make_rng(3).normal(size=(3, 4))
    assert nc.grad_check(op, [x]) < 1e-6


def test_masked_softmax_gradient_and_fallback():
    x = nc.make_rng(4).normal(size=(2, 5))
    valid = np.array([[True, False, True, True, False], [False] * 5])
    out = nc.softmax(x, valid)
    assert out[0, 1] == 0.0 and out[0, 4] == 0.0
    np.testing.assert_allclose(out[1], nc.softmax(x[1]))  # all masked -> plain softmax
    w = np.arange(10.0).reshape(2, 5)
    assert nc.grad_check(lambda v: nc.sum_(nc.mul(nc.softmax(v[0], valid), w)), [x]) < 1e-6


def test_broadcast_add_gradient():
    r = nc.make_rng(5)
    x, b = r.normal(size=(2, 3, 4)), r.normal(size=(4,))
    w = r.normal(size=(2, 3, 4))
    assert nc.grad_check(lambda v: nc.sum_(nc.mul(nc.add(v[0], v[1]), w)), [x, b]) < 1e-6


def test_batched_weight_matmul_gradient():
    r = nc.make_rng(6)
    x, wt = r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))
    m = r.normal(size=(2, 3, 5))
    assert nc.grad_check(lambda v: nc.sum_(nc.mul(nc.matmul(v[0], v[1]), m)), [x, wt]) < 1e-6


def test_adam_first_step_closed_form():
    st_ = nc.AdamState(lr=1e-3)
    (p,), st1 = nc.adam_step([np.array([0.0])], [np.array([1.0])], st_)
    # bias correction makes the first step lr * g / (|g| + eps)
    assert p[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), abs=1e-18)
    assert st1.step == 1


def test_adam_zero_gradient_and_determinism():
    p0 = [np.array([[1.0, -2.0]])]
    out, s = nc.adam_step(p0, [np.zeros((1, 2))], nc.AdamState())
    np.testing.assert_array_equal(out[0], p0[0])
    a = nc.adam_step(p0, [np.array([[0.3, 0.1]])], s)
    b = nc.adam_step(p0, [np.array([[0.3, 0.1]])], s)
    np.testing.assert_array_equal(a[0][0], b[0][0])
    assert a[1].step == b[1].step == 2


def test_adam_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.adam_step([np.zeros(2)], [np.zeros(3)], nc.AdamState())


def test_rng_streams_reproducible():
    a = nc.make_rng(42, 3).normal(size=10)
    b = nc.make_rng(42, 3).normal(size=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, nc.make_rng(42, 4).normal(size=10))


def test_checkpoint_round_trip_bit_exact():
    r = nc.make_rng(7)
    params = {"W": r.normal(size=(3, 2)), "b": r.normal(size=(2,)), "s": np.array(np.pi)}
    blob = nc.dumps_checkpoint("reid", {"in_dim": 3}, params)
    assert blob.startswith(b"ESCORTE-CKPT")
    kind, dims, back = nc.loads_checkpoint(blob)
    assert kind == "reid" and dims == {"in_dim": 3}
    for k in params:
        assert back[k].tobytes() == np.asarray(params[k]).tobytes()
    assert nc.dumps_checkpoint(kind, dims, back) == blob


def test_checkpoint_rejects_bad_input():
    blob = nc.dumps_checkpoint("reid", {}, {"W": np.ones((2, 2))})
    with pytest.raises(nc.CheckpointError):
        nc.loads_checkpoint(b"NOT-A-CKPT" + blob[10:])
    with pytest.raises(nc.CheckpointError):
        nc.loads_checkpoint(blob[:-3])
