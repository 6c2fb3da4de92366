import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hatnas import numerics as nx
from hatnas.numerics import AdamState, DimensionError, Tensor, gradcheck

TOL = 1e-5


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=grad)


def weighted_sum(y: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalar ``sum(y @ r)`` with a fixed random ``r`` so every output entry matters."""
    r = np.random.default_rng(rng_seed).uniform(-1, 1, size=(y.shape[-1], 1))
    return nx.total(nx.matmul(y, Tensor(r)))


# ---------------------------------------------------------------- point values

def test_matmul_identity_and_hand_value():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_point_values():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows(Tensor(np.full((1, 4), 2.5))).data, [[0.25] * 4])


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = nx.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(nx.softmax_rows(Tensor(x + c)).data, p, rtol=0, atol=1e-12)


def test_layer_norm_point_values():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = nx.layer_norm(Tensor([[1.0, 3.0]]), g, b).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-3)
    bias = Tensor([0.3, -0.7, 1.1])
    const = nx.layer_norm(Tensor(np.full((2, 3), 4.2)), Tensor(np.ones(3)), bias).data
    np.testing.assert_allclose(const, np.tile(bias.data, (2, 1)), atol=1e-12)


def test_relu_values():
    np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_uniform_logits_give_log_vocab():
    v = 7
    loss = nx.cross_entropy(Tensor(np.zeros((4, v))), np.array([1, 2, 3, 4]))
    assert loss.item() == pytest.approx(np.log(v), abs=1e-14)


def test_cross_entropy_ignores_padding():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5))
    full = nx.cross_entropy(Tensor(logits[:2]), np.array([3, 4])).item()
    padded = nx.cross_entropy(Tensor(logits), np.array([3, 4, 0, 0])).item()
    assert padded == pytest.approx(full, abs=1e-15)


def test_out_of_vocab_ids_raise():
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), np.array([1, 3]))
    with pytest.raises(IndexError):
        nx.embedding_lookup(Tensor(np.zeros((3, 2))), np.array([[0, 5]]))


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))

    def run():
        h = nx.softmax_rows(nx.matmul(Tensor(x), Tensor(w)))
        return nx.layer_norm(h, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("transpose_b", [False, True])
def test_grad_matmul(rng, transpose_b):
    a = rand(rng, 3, 4)
    b = rand(rng, 5, 4) if transpose_b else rand(rng, 4, 5)
    assert gradcheck(lambda: weighted_sum(nx.matmul(a, b, transpose_b)), [a, b]) <= TOL


def test_grad_of_sum_of_product(rng):
    a, b = rand(rng, 3, 3), rand(rng, 3, 2)
    assert gradcheck(lambda: nx.total(nx.matmul(a, b)), [a, b]) <= 1e-6


def test_grad_add_bias_scale(rng):
    x, b = rand(rng, 4, 3), rand(rng, 3)
    assert gradcheck(lambda: weighted_sum(nx.scale(nx.add_bias(x, b), 1.7)), [x, b]) <= TOL


def test_grad_add(rng):
    x, y = rand(rng, 3, 3), rand(rng, 3, 3)
    assert gradcheck(lambda: weighted_sum(nx.add(x, y)), [x, y]) <= TOL


def test_grad_relu(rng):
    # keep entries away from the kink
    x = Tensor(np.sign(rng.uniform(-1, 1, (4, 5))) * rng.uniform(0.05, 1, (4, 5)), requires_grad=True)
    assert gradcheck(lambda: weighted_sum(nx.relu(x)), [x]) <= TOL


def test_grad_softmax(rng):
    x = rand(rng, 3, 6)
    assert gradcheck(lambda: weighted_sum(nx.softmax_rows(x)), [x]) <= TOL


def test_grad_layer_norm(rng):
    x, g, b = rand(rng, 4, 6), rand(rng, 6), rand(rng, 6)
    assert gradcheck(lambda: weighted_sum(nx.layer_norm(x, g, b)), [x, g, b]) <= TOL


def test_grad_embedding(rng):
    table = rand(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    assert gradcheck(lambda: weighted_sum(nx.embedding_lookup(table, ids)), [table]) <= TOL


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_grad_cross_entropy(rng, smoothing):
    logits = rand(rng, 5, 4)
    targets = np.array([1, 3, 0, 2, 1])
    assert gradcheck(lambda: nx.cross_entropy(logits, targets, label_smoothing=smoothing), [logits]) <= TOL


def test_grad_soft_cross_entropy(rng):
    logits = rand(rng, 4, 5)
    q = rng.dirichlet(np.ones(5), size=4)
    valid = np.array([True, True, False, True])
    assert gradcheck(lambda: nx.soft_cross_entropy(logits, q, valid), [logits]) <= TOL


def test_grad_mse(rng):
    p = rand(rng, 6, 1)
    t = rng.normal(size=(6, 1))
    assert gradcheck(lambda: nx.mean_squared_error(p, t), [p]) <= TOL


def test_grad_prefix_and_concat(rng):
    w = rand(rng, 5, 4)
    x, y = rand(rng, 4, 3), rand(rng, 6, 3)

    def fn():
        cat = nx.concat_seq([x, y], batch=2)                       # [2*(2+3), 3]
        return weighted_sum(nx.matmul(cat, nx.prefix(w, (3, 2))))
    assert gradcheck(fn, [w, x, y]) <= TOL
    # entries outside the prefix receive exactly zero gradient
    assert np.all(w.grad[3:] == 0) and np.all(w.grad[:, 2:] == 0)


def test_grad_repeat_seq_accumulates(rng):
    x = rand(rng, 4, 3)
    assert gradcheck(lambda: weighted_sum(nx.repeat_seq(x, 2, 3)), [x]) <= TOL


@pytest.mark.parametrize("heads,causal", [(1, False), (2, True), (4, False)])
def test_grad_attention(rng, heads, causal):
    b, tq, tk, width = 2, 3, 4, 8
    q, k, v = rand(rng, b * tq, width), rand(rng, b * tk, width), rand(rng, b * tk, width)
    key_valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    mask = nx.attention_mask(b, tq, tk, key_valid=key_valid, causal=causal, q_offset=1)
    assert gradcheck(lambda: weighted_sum(nx.attention(q, k, v, heads, b, mask)), [q, k, v]) <= TOL


def test_attention_single_key_returns_value(rng):
    q, k, v = rand(rng, 1, 8), rand(rng, 1, 8), rand(rng, 1, 8)
    for heads in (1, 2, 4):
        np.testing.assert_allclose(nx.attention(q, k, v, heads, 1).data, v.data, atol=1e-15)


def test_attention_duplicate_keys(rng):
    q, k, v = rand(rng, 3, 8), rand(rng, 2, 8), rand(rng, 2, 8)
    one = nx.attention(q, k, v, 2, 1).data
    kk = nx.concat_seq([k, k], 1)
    vv = nx.concat_seq([v, v], 1)
    np.testing.assert_allclose(nx.attention(q, kk, vv, 2, 1).data, one, atol=1e-12)


def test_backward_frees_intermediates(rng):
    x = rand(rng, 3, 3)
    h = nx.relu(x)
    loss = weighted_sum(h)
    loss.backward()
    assert h.grad is None and x.grad is not None


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([0.5, -2.0])}
    state = AdamState()
    for _ in range(10):
        nx.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [0.5, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    nx.adam_step(p, {"w": np.array([3.0, -0.01, 250.0])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, 1.01, 0.99], atol=1e-8)


def test_adam_minimizes_square():
    p = {"x": np.array([1.0])}
    state = AdamState()
    for _ in range(500):
        nx.adam_step(p, {"x": 2 * p["x"]}, state, lr=0.1)
    assert abs(p["x"][0]) < 1e-3


def test_adam_regions_touch_only_front_slice():
    p = {"w": np.ones((3, 3))}
    state = AdamState()
    nx.adam_step(p, {"w": np.ones((3, 3))}, state, lr=0.1, regions={"w": (2, 1)})
    assert np.all(p["w"][:2, :1] < 1) and np.all(p["w"][2:] == 1) and np.all(p["w"][:, 1:] == 1)
    assert state.t["w"].tolist() == [[1, 0, 0], [1, 0, 0], [0, 0, 0]]


def test_adam_per_entry_counters_match_separate_runs():
    # an entry first touched at step 3 behaves like a fresh Adam run
    g = np.array([[0.3, -0.2]])
    joint = {"w": np.zeros((1, 2))}
    st_joint = AdamState()
    for step in range(4):
        region = (1, 2) if step >= 2 else (1, 1)
        nx.adam_step(joint, {"w": g}, st_joint, lr=0.01, regions={"w": region})
    fresh = {"w": np.zeros((1, 2))}
    st_fresh = AdamState()
    for _ in range(2):
        nx.adam_step(fresh, {"w": g}, st_fresh, lr=0.01)
    assert joint["w"][0, 1] == fresh["w"][0, 1]
