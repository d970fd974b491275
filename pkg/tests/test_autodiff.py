import numpy as np
import pytest

from flowsage.autodiff import Tensor, add, backward, bce_with_logits, concat, cross_entropy, \
    dropout, matmul, mul, relu, row_gather, segment_mean, sigmoid, tensor_mean, tensor_sum


def leaf(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward values


def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_segment_mean_with_empty_segment():
    out = segment_mean(Tensor([[2.0], [4.0], [6.0]]), [0, 0, 1], 3)
    assert np.array_equal(out.data, [[3.0], [6.0], [0.0]])


def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = Tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
    # row x col by hand: [[7+18+33, 8+20+36], [28+45+66, 32+50+72]]
    assert np.array_equal(matmul(a, b).data, [[58.0, 64.0], [139.0, 154.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_bias_broadcasts_over_leading_dim():
    out = add(Tensor(np.ones((3, 2))), Tensor([10.0, 20.0]))
    assert np.array_equal(out.data, [[11.0, 21.0]] * 3)
    with pytest.raises(ValueError, match=r"\(3, 2\).*\(3,\)"):
        add(Tensor(np.ones((3, 2))), Tensor(np.zeros(3)))


def test_concat_last_axis_and_row_gather():
    a, b = Tensor([[1.0], [2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(concat([a, b]).data, [[1.0, 3.0, 4.0], [2.0, 5.0, 6.0]])
    g = row_gather(b, [1, 1, 0])
    assert np.array_equal(g.data, [[5.0, 6.0], [5.0, 6.0], [3.0, 4.0]])
    with pytest.raises(ValueError, match="out of range"):
        row_gather(b, [2])


def test_sigmoid_stable_at_extremes():
    out = sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 and out.data[1] == 0.5 and out.data[2] == 1.0


def test_segment_mean_id_range_checked():
    with pytest.raises(ValueError, match="out of range"):
        segment_mean(Tensor([[1.0]]), [3], 2)


def test_segment_mean_identity_when_each_row_own_segment():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    out = segment_mean(Tensor(x), np.arange(5), 5)
    assert np.allclose(out.data, x)


def test_dropout_identity_and_scaling():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    assert dropout(x, 0.0, True) is x
    assert dropout(x, 0.5, False) is x
    out = dropout(x, 0.5, True, rng=np.random.default_rng(0))
    assert set(np.unique(out.data)) <= {0.0, 2.0}
    with pytest.raises(ValueError, match="rng"):
        dropout(x, 0.5, True)


# ---------------------------------------------------------------------------
# hand-checked gradients


def test_grad_sum_of_linear_map_is_outer_product_structure():
    w = leaf([[1.0, 2.0], [3.0, 4.0]])
    x = leaf([[5.0], [6.0]], grad=False)
    loss = tensor_sum(matmul(w, x))
    backward(loss)
    # d/dW sum(Wx) = ones @ x^T, every row equal to x
    assert np.array_equal(w.grad, [[5.0, 6.0], [5.0, 6.0]])


def test_unused_parameter_keeps_zero_grad():
    used = leaf([[1.0, 1.0]])
    unused = leaf([[7.0, 7.0]])
    for t in (used, unused):
        t.grad = np.zeros_like(t.data)
    backward(tensor_sum(mul(used, used)))
    assert np.array_equal(unused.grad, np.zeros((1, 2)))
    assert np.array_equal(used.grad, [[2.0, 2.0]])


def test_grad_accumulates_across_reuse():
    x = leaf([2.0])
    backward(tensor_sum(add(x, x)))
    assert np.array_equal(x.grad, [2.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(relu(x))


# ---------------------------------------------------------------------------
# losses


def test_bce_zero_logit_is_ln2():
    loss = bce_with_logits(Tensor([0.0]), [1.0])
    assert abs(loss.item() - np.log(2.0)) < 1e-7


def test_bce_perfect_large_logits_near_zero():
    loss = bce_with_logits(Tensor([10.0, -10.0]), [1.0, 0.0])
    assert loss.item() < 1e-3


def test_bce_matches_naive_float64_formula():
    logits = np.array([0.3, -1.2, 2.5])
    targets = np.array([1.0, 0.0, 1.0])
    sig = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    expected = float(np.mean(-(targets * np.log(sig) + (1 - targets) * np.log(1 - sig))))
    loss = bce_with_logits(leaf(logits), targets)
    assert abs(loss.item() - expected) < 1e-12
    with pytest.raises(ValueError, match="empty"):
        bce_with_logits(Tensor(np.zeros(0)), [])


def test_cross_entropy_uniform_logits_is_ln_k():
    loss = cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert abs(loss.item() - np.log(5.0)) < 1e-6
    with pytest.raises(ValueError, match="empty"):
        cross_entropy(Tensor(np.zeros((0, 3))), [])
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_matches_naive_float64_formula():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = float(np.mean(-np.log(probs[np.arange(6), y])))
    assert abs(cross_entropy(leaf(z), y).item() - expected) < 1e-12


# ---------------------------------------------------------------------------
# finite-difference oracle over random op graphs


def _numerical_grads(run, leaves, eps=1e-3):
    grads = []
    for t in leaves:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = run().item()
            flat[i] = orig - eps
            fm = run().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def _far_from_relu_kink(rng, shape):
    # keep |value| >= 0.05 so central differences never straddle the kink
    return (rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _random_program(rng):
    """A random pipeline of <= 6 ops over small 2-D leaves, reduced to a scalar."""
    n = int(rng.integers(2, 8))
    d = int(rng.integers(2, 8))
    leaves = [leaf(_far_from_relu_kink(rng, (n, d)))]
    script = []
    ops = ["matmul", "add_bias", "mul", "relu", "sigmoid", "concat",
           "row_gather", "segment_mean"]
    shape = (n, d)
    for _ in range(int(rng.integers(1, 7))):
        op = ops[int(rng.integers(0, len(ops)))]
        if op == "matmul":
            k = int(rng.integers(2, 8))
            leaves.append(leaf(_far_from_relu_kink(rng, (shape[1], k)) * 0.5))
            script.append(("matmul", len(leaves) - 1))
            shape = (shape[0], k)
        elif op == "add_bias":
            leaves.append(leaf(_far_from_relu_kink(rng, (shape[1],))))
            script.append(("add_bias", len(leaves) - 1))
        elif op == "mul":
            leaves.append(leaf(_far_from_relu_kink(rng, shape)))
            script.append(("mul", len(leaves) - 1))
        elif op in ("relu", "sigmoid"):
            script.append((op, None))
        elif op == "concat":
            leaves.append(leaf(_far_from_relu_kink(rng, (shape[0], 2))))
            script.append(("concat", len(leaves) - 1))
            shape = (shape[0], shape[1] + 2)
        elif op == "row_gather":
            m = int(rng.integers(2, 8))
            idx = rng.integers(0, shape[0], size=m)
            script.append(("row_gather", idx))
            shape = (m, shape[1])
        elif op == "segment_mean":
            segs = int(rng.integers(1, 5))
            ids = rng.integers(0, segs, size=shape[0])
            script.append(("segment_mean", (ids, segs)))
            shape = (segs, shape[1])
    reducer = ["mean", "sum", "bce", "ce"][int(rng.integers(0, 4))]
    aux = None
    if reducer == "bce":
        aux = rng.integers(0, 2, size=shape[0] * shape[1]).astype(np.float64)
    elif reducer == "ce":
        aux = rng.integers(0, shape[1], size=shape[0])

    def run():
        h = leaves[0]
        for op, arg in script:
            if op == "matmul":
                h = matmul(h, leaves[arg])
            elif op == "add_bias":
                h = add(h, leaves[arg])
            elif op == "mul":
                h = mul(h, leaves[arg])
            elif op == "relu":
                h = relu(h)
            elif op == "sigmoid":
                h = sigmoid(h)
            elif op == "concat":
                h = concat([h, leaves[arg]])
            elif op == "row_gather":
                h = row_gather(h, arg)
            elif op == "segment_mean":
                h = segment_mean(h, arg[0], arg[1])
        if reducer == "mean":
            return tensor_mean(h)
        if reducer == "sum":
            return tensor_sum(h)
        if reducer == "bce":
            return bce_with_logits(h, aux)
        return cross_entropy(h, aux)

    return leaves, run


def _max_rel_error(analytic, numerical):
    scale = max(1.0, np.abs(analytic).max(initial=0.0), np.abs(numerical).max(initial=0.0))
    return np.abs(analytic - numerical).max(initial=0.0) / scale


@pytest.mark.parametrize("n_graphs", [200])
def test_gradients_match_central_finite_differences(n_graphs):
    """Analytic vs central-difference gradients on random op graphs, run at
    float64 where the comparison is truncation-limited. Error is measured
    relative to max(1, largest gradient magnitude)."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(n_graphs):
        leaves, run = _random_program(rng)
        loss = run()
        for t in leaves:
            t.grad = np.zeros_like(t.data)
        backward(loss)
        numeric = _numerical_grads(run, leaves)
        for t, num in zip(leaves, numeric):
            worst = max(worst, _max_rel_error(t.grad, num))
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"


def test_dropout_gradient_with_fixed_mask():
    x = leaf(_far_from_relu_kink(np.random.default_rng(5), (4, 3)))

    def run():
        return tensor_mean(dropout(x, 0.4, True, rng=np.random.default_rng(77)))

    loss = run()
    x.grad = np.zeros_like(x.data)
    backward(loss)
    num = _numerical_grads(run, [x])[0]
    assert _max_rel_error(x.grad, num) < 1e-6
