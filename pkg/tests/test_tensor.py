import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from novabert import tensor as T


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f with respect to array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_grads(build_loss, tensors, tol=1e-4):
    """build_loss() must rebuild the graph from the given leaf tensors."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    T.backward(loss)
    for t in tensors:
        num = numeric_grad(lambda: float(build_loss().data), t.data)
        ana = t.grad
        assert ana is not None
        denom = np.abs(num) + 1e-8
        rel = np.abs(ana - num) / denom
        assert rel.max() < tol, f"grad mismatch: max rel err {rel.max()}"


def rand(shape, rng, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_dot():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data[0, 0] == 11.0


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.abs(got - expect).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
    left = T.matmul(T.matmul(T.Tensor(a), T.Tensor(b)), T.Tensor(c)).data
    right = T.matmul(T.Tensor(a), T.matmul(T.Tensor(b), T.Tensor(c))).data
    assert np.abs(left - right).max() < 1e-9


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    out = T.softmax_lastdim(T.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3)


def test_softmax_no_overflow():
    out = T.softmax_lastdim(T.Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] > 0.999999


def test_softmax_high_precision_oracle():
    import mpmath
    x = [1.0, 2.0, 3.0]
    es = [mpmath.e ** xi for xi in x]
    s = sum(es)
    expect = np.array([float(e / s) for e in es])
    out = T.softmax_lastdim(T.Tensor(x)).data
    assert np.abs(out - expect).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.integers(1, 5))
def test_softmax_rows_sum_to_one_and_nonneg(row, nrows):
    x = np.array([row] * nrows)
    out = T.softmax_lastdim(T.Tensor(x)).data
    assert np.all(out >= 0)
    assert np.abs(out.sum(axis=-1) - 1).max() < 1e-6


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_attention_uniform_when_q_k_zero():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((1, 1, 3, 4))
    z = np.zeros_like(v)
    out, attn = T.scaled_dot_attention(T.Tensor(z), T.Tensor(z), T.Tensor(v))
    assert np.allclose(out.data, np.broadcast_to(v.mean(axis=2, keepdims=True), v.shape))
    assert np.allclose(attn.data, 1 / 3)


def test_attention_single_key():
    v = np.array([[[[2.0, 5.0]]]])
    q = np.array([[[[1.0, -1.0]]]])
    out, attn = T.scaled_dot_attention(T.Tensor(q), T.Tensor(q), T.Tensor(v))
    assert np.array_equal(out.data, v)
    assert np.array_equal(attn.data, [[[[1.0]]]])


def test_attention_hand_case():
    # L=2, d=1: Q=K=[1,0], V=[2,4]
    q = np.array([[1.0], [0.0]]).reshape(1, 2, 1)
    v = np.array([[2.0], [4.0]]).reshape(1, 2, 1)
    out, attn = T.scaled_dot_attention(T.Tensor(q), T.Tensor(q), T.Tensor(v))
    row0 = np.exp([1.0, 0.0])
    row0 /= row0.sum()
    assert np.allclose(attn.data[0, 0], row0)
    assert np.allclose(out.data[0, 0, 0], row0 @ np.array([2.0, 4.0]))


def test_attention_all_masked_row_errors():
    q = np.zeros((1, 3, 4))
    mask = np.zeros((1, 1, 3), dtype=bool)
    with pytest.raises(ValueError, match="masked"):
        T.scaled_dot_attention(T.Tensor(q), T.Tensor(q), T.Tensor(q), key_mask=mask)


def test_attention_rows_stochastic_with_mask():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((2, 4, 3))
    mask = np.array([[True, True, False, False]]).reshape(1, 1, 4)
    out, attn = T.scaled_dot_attention(T.Tensor(q), T.Tensor(q), T.Tensor(q),
                                       key_mask=mask)
    assert np.abs(attn.data.sum(-1) - 1).max() < 1e-12
    assert np.all(attn.data[..., 2:] == 0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_half_square_gives_x():
    x = T.Tensor([1.0, -2.0, 0.5], requires_grad=True)
    T.backward(T.mul(T.tsum(T.mul(x, x)), 0.5))
    assert np.allclose(x.grad, x.data)


def test_backward_twice_errors():
    x = T.Tensor([1.0], requires_grad=True)
    loss = T.tsum(x)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_non_scalar_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, x))


# ---------------------------------------------------------------------------
# finite-difference checks for every differentiable op
# ---------------------------------------------------------------------------

def test_fd_add_mul_broadcast():
    rng = np.random.default_rng(10)
    a, b = rand((3, 4), rng), rand((4,), rng)
    check_grads(lambda: T.tsum(T.mul(T.add(a, b), a)), [a, b])


def test_fd_matmul_batched():
    rng = np.random.default_rng(11)
    a, b = rand((2, 3, 4), rng), rand((4, 5), rng)
    check_grads(lambda: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])


def test_fd_softmax():
    rng = np.random.default_rng(12)
    x = rand((3, 5), rng)
    w = rng.standard_normal((3, 5))
    check_grads(lambda: T.tsum(T.mul(T.softmax_lastdim(x), w)), [x])


def test_fd_gelu_sigmoid():
    rng = np.random.default_rng(13)
    x = rand((4, 3), rng)
    check_grads(lambda: T.tsum(T.gelu(x)), [x])
    check_grads(lambda: T.tsum(T.sigmoid(x)), [x])


def test_fd_layer_norm():
    rng = np.random.default_rng(14)
    x, g, b = rand((2, 3, 6), rng), rand((6,), rng), rand((6,), rng)
    w = rng.standard_normal((2, 3, 6))
    check_grads(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), w)), [x, g, b])


def test_fd_concat_stack_reshape_transpose():
    rng = np.random.default_rng(15)
    a, b = rand((2, 3), rng), rand((2, 4), rng)
    check_grads(
        lambda: T.tsum(T.mul(T.concat_lastdim([a, b]), T.concat_lastdim([a, b]))),
        [a, b])
    c, d = rand((2, 3), rng), rand((2, 3), rng)
    check_grads(lambda: T.tsum(T.mul(T.stack([c, d], axis=-2), 2.0)), [c, d])
    e = rand((2, 6), rng)
    check_grads(
        lambda: T.tsum(T.mul(T.transpose(T.reshape(e, (2, 3, 2)), (1, 0, 2)), 3.0)),
        [e])


def test_fd_embedding_lookup():
    rng = np.random.default_rng(16)
    table = rand((7, 4), rng)
    idx = np.array([[0, 3, 3], [6, 1, 0]])
    w = rng.standard_normal((2, 3, 4))
    check_grads(lambda: T.tsum(T.mul(T.embedding_lookup(table, idx), w)), [table])


def test_fd_cross_entropy_masked():
    rng = np.random.default_rng(17)
    logits = rand((6, 5), rng)
    labels = np.array([1, 0, 3, 5, 0, 2])
    check_grads(lambda: T.cross_entropy_masked(logits, labels), [logits])


def test_fd_attention_masked():
    rng = np.random.default_rng(18)
    q, k, v = rand((1, 2, 4, 3), rng), rand((1, 2, 4, 3), rng), rand((1, 2, 4, 3), rng)
    mask = np.array([True, True, True, False]).reshape(1, 1, 1, 4)
    w = rng.standard_normal((1, 2, 4, 3))

    def loss():
        out, _ = T.scaled_dot_attention(q, k, v, key_mask=mask)
        return T.tsum(T.mul(out, w))

    check_grads(loss, [q, k, v])


# ---------------------------------------------------------------------------
# misc contracts
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits_is_log_m():
    logits = T.Tensor(np.zeros((3, 7)))
    labels = np.array([1, 4, 7])
    loss = T.cross_entropy_masked(logits, labels)
    assert abs(loss.item() - np.log(7)) < 1e-12


def test_cross_entropy_no_valid_labels_errors():
    with pytest.raises(ValueError):
        T.cross_entropy_masked(T.Tensor(np.zeros((2, 3))), np.array([0, 0]))


def test_embedding_lookup_out_of_range():
    table = T.Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.embedding_lookup(table, np.array([4]))


def test_dropout_train_and_eval():
    rng = np.random.default_rng(19)
    x = T.Tensor(np.ones((1000,)), requires_grad=True)
    out = T.dropout(x, 0.25, rng, train=True)
    kept = out.data != 0
    assert 0.6 < kept.mean() < 0.9
    assert np.allclose(out.data[kept], 1 / 0.75)
    same = T.dropout(x, 0.25, rng, train=False)
    assert same is x


def test_dropout_seeded_reproducible():
    x = np.arange(100.0)
    a = T.dropout(T.Tensor(x), 0.5, np.random.default_rng(7), train=True).data
    b = T.dropout(T.Tensor(x), 0.5, np.random.default_rng(7), train=True).data
    assert np.array_equal(a, b)


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        h = T.gelu(T.matmul(x, x))
        h = T.dropout(h, 0.1, rng, train=True)
        loss = T.tsum(T.mul(h, h))
        T.backward(loss)
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
