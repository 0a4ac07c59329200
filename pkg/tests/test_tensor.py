import math

import numpy as np
import pytest

from vlmdrive import tensor as T
from vlmdrive.errors import ConfigError, DataError, ShapeError, UsageError
from vlmdrive.tensor import Tape, Tensor

from conftest import analytic_grads, numeric_grad, rel_err


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, w))


def test_matmul_identity_and_zero(rng):
    m = rng.standard_normal((2, 2))
    assert np.array_equal(T.matmul(np.eye(2), m).data, m)
    m2 = rng.standard_normal((4, 2))
    assert np.array_equal(T.matmul(np.zeros((3, 4)), m2).data, np.zeros((3, 2)))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    b = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    w = rng.standard_normal((5, 3))
    build = lambda: _weighted_sum(T.matmul(a, b), w)
    ga, gb = analytic_grads(build, [a, b])
    f = lambda: float(build().data)
    assert rel_err(ga, numeric_grad(f, a.data)) < 1e-6
    assert rel_err(gb, numeric_grad(f, b.data)) < 1e-6


def test_batched_matmul_broadcasts_weight_gradient(rng):
    a = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    w = rng.standard_normal((3, 4, 2))
    build = lambda: _weighted_sum(T.matmul(a, b), w)
    ga, gb = analytic_grads(build, [a, b])
    f = lambda: float(build().data)
    assert rel_err(gb, numeric_grad(f, b.data)) < 1e-6
    assert rel_err(ga, numeric_grad(f, a.data)) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_softmax_examples():
    assert np.allclose(T.rowwise_softmax(np.full((1, 4), 3.0)).data, 0.25, atol=0, rtol=0)
    e = math.e
    got = T.rowwise_softmax(np.array([[1.0, 2.0]])).data[0]
    assert abs(got[0] - 1 / (1 + e)) < 1e-15
    assert abs(got[1] - e / (1 + e)) < 1e-15


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((6, 9))
    for c in (-50.0, 3.7, 1e3):
        assert np.max(np.abs(T.rowwise_softmax(x + c).data - T.rowwise_softmax(x).data)) < 1e-12


def test_softmax_mask_gives_exact_zero_and_rows_sum_to_one(rng):
    x = rng.standard_normal((3, 5))
    mask = np.array([[1, 1, 0, 1, 0], [0, 0, 0, 0, 1], [1, 1, 1, 1, 1]], dtype=bool)
    y = T.rowwise_softmax(x, mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert y[1, 4] == 1.0


def test_elementwise_ops_values():
    assert T.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert np.all(T.mean_over_axis(np.full((2, 3, 4), 7.5), 1).data == 7.5)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "relu", "softmax", "softmax_masked", "mean", "transpose",
                                "reshape", "slice", "concat", "take_rows", "scale"])
def test_op_gradients(op, rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    mask = rng.random((2, 3, 4)) < 0.7
    mask[..., 0] = True
    idx = rng.integers(0, 3, size=(2, 5))
    fns = {
        "add": lambda: T.add(x, y),
        "sub": lambda: T.sub(x, y),
        "mul": lambda: T.mul(x, y),
        "relu": lambda: T.relu(x),
        "softmax": lambda: T.rowwise_softmax(x),
        "softmax_masked": lambda: T.rowwise_softmax(x, mask),
        "mean": lambda: T.mean_over_axis(x, 1),
        "transpose": lambda: T.transpose(x),
        "reshape": lambda: T.reshape(x, (6, 4)),
        "slice": lambda: T.slice_last(x, 1, 3),
        "concat": lambda: T.concat_last([x, T.mul(x, 2.0)]),
        "take_rows": lambda: T.take_rows(x, idx),
        "scale": lambda: T.scale(x, -1.3),
    }
    w = rng.standard_normal(fns[op]().shape)
    build = lambda: _weighted_sum(fns[op](), w)
    inputs = [x, y] if op in ("add", "sub", "mul") else [x]
    grads = analytic_grads(build, inputs)
    f = lambda: float(build().data)
    for t, g in zip(inputs, grads):
        assert rel_err(g, numeric_grad(f, t.data)) < 1e-6


def test_layer_norm_examples_and_gradient(rng):
    gain, bias = Tensor(np.ones(5), requires_grad=True), Tensor(np.zeros(5), requires_grad=True)
    assert np.all(T.layer_norm(np.full((1, 5), 2.0), gain, bias).data == 0.0)
    x = Tensor(rng.standard_normal((4, 5)) * 3 + 1, requires_grad=True)
    assert np.max(np.abs(T.layer_norm(x, gain, bias).data.mean(axis=-1))) < 1e-9
    gain.data = rng.standard_normal(5)
    bias.data = rng.standard_normal(5)
    w = rng.standard_normal((4, 5))
    build = lambda: _weighted_sum(T.layer_norm(x, gain, bias), w)
    grads = analytic_grads(build, [x, gain, bias])
    f = lambda: float(build().data)
    for t, g in zip([x, gain, bias], grads):
        assert rel_err(g, numeric_grad(f, t.data)) < 1e-5


def test_dropout_identity_cases_and_rate(rng):
    x = rng.standard_normal((10, 10))
    assert np.array_equal(T.dropout(x, 0.0, True, rng).data, x)
    assert np.array_equal(T.dropout(x, 0.7, False, rng).data, x)
    y = T.dropout(np.ones(100_000), 0.7, True, np.random.default_rng(0)).data
    assert abs(np.mean(y == 0) - 0.7) < 0.01
    assert np.allclose(y[y != 0], 1 / 0.3)
    with pytest.raises(ConfigError):
        T.dropout(x, 1.0, True, rng)


def test_backward_trivial_cases(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    with Tape() as tape:
        tape.backward(T.sum_all(T.scale(x, 0.0)))
    assert np.array_equal(x.grad, np.zeros((3, 4)))


def test_backward_rejects_non_scalar_and_disconnected(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(UsageError):
            tape.backward(y)
    with Tape() as tape:
        with pytest.raises(UsageError):
            tape.backward(T.sum_all(Tensor(np.ones(3))))


def test_no_recording_outside_tape(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.scale(x, 2.0)
    assert y._backward is None


def test_bce_matches_scalar_oracle(rng):
    z = rng.standard_normal((7, 4)) * 4
    y = (rng.random((7, 4)) < 0.5).astype(float)
    total = 0.0
    for zi, yi in zip(z.ravel(), y.ravel()):
        p = 1.0 / (1.0 + math.exp(-zi))
        total += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
    assert abs(float(T.bce_with_logits(z, y).data) - total / z.size) < 1e-12


def test_bce_gradient(rng):
    z = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = (rng.random((3, 4)) < 0.5).astype(float)
    wts = (rng.random((3, 4)) < 0.6).astype(float)
    wts[0, 0] = 1
    build = lambda: T.bce_with_logits(z, y, wts)
    (g,) = analytic_grads(build, [z])
    assert rel_err(g, numeric_grad(lambda: float(build().data), z.data)) < 1e-6


def test_softmax_cross_entropy_oracle_and_gradient(rng):
    z = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    y = np.eye(3)[rng.integers(0, 3, 5)]
    want = 0.0
    for zi, yi in zip(z.data, y):
        want += -math.log(math.exp(zi[yi.argmax()]) / sum(math.exp(v) for v in zi))
    assert abs(float(T.softmax_cross_entropy(z, y).data) - want / 5) < 1e-12
    build = lambda: T.softmax_cross_entropy(z, y)
    (g,) = analytic_grads(build, [z])
    assert rel_err(g, numeric_grad(lambda: float(build().data), z.data)) < 1e-6


def _pool_oracle(col, k):
    top = sorted(col, reverse=True)[:k]
    return sum(top) / len(top)


def test_topk_pool_examples():
    col = np.array([0.1, 0.9, 0.3]).reshape(1, 3, 1)
    valid = np.ones((1, 3), dtype=bool)
    assert T.topk_avg_pool(col, valid, 1).data[0, 0] == 0.9
    assert T.topk_avg_pool(col, valid, 2).data[0, 0] == (0.9 + 0.3) / 2
    assert abs(T.topk_avg_pool(col, valid, 3).data[0, 0] - col.mean()) < 1e-15


def test_topk_pool_matches_sort_oracle_with_masks(rng):
    for _ in range(50):
        m = int(rng.integers(1, 12))
        scores = rng.standard_normal((3, m, 4))
        valid = rng.random((3, m)) < 0.7
        valid[:, 0] = True
        for k in (1, 2, 5, m):
            got = T.topk_avg_pool(scores, valid, k).data
            for b in range(3):
                kk = min(k, int(valid[b].sum()))
                for c in range(4):
                    assert got[b, c] == _pool_oracle(scores[b, valid[b], c].tolist(), kk)


def test_topk_pool_ignores_masked_content_and_ties_prefer_lower_index(rng):
    scores = rng.standard_normal((1, 5, 2))
    valid = np.array([[True, True, False, True, False]])
    a = T.topk_avg_pool(scores, valid, 2).data
    scores2 = scores.copy()
    scores2[0, ~valid[0]] = 100.0
    assert np.array_equal(a, T.topk_avg_pool(scores2, valid, 2).data)
    tied = np.zeros((1, 4, 1))
    order, _ = T.topk_select(tied, np.ones((1, 4), dtype=bool), 2)
    assert order[0, :2, 0].tolist() == [0, 1]


def test_topk_pool_gradient_goes_to_selected_rows(rng):
    x = Tensor(rng.standard_normal((2, 6, 3)), requires_grad=True)
    valid = np.ones((2, 6), dtype=bool)
    valid[1, 4:] = False
    w = rng.standard_normal((2, 3))
    build = lambda: _weighted_sum(T.topk_avg_pool(x, valid, 2), w)
    (g,) = analytic_grads(build, [x])
    assert rel_err(g, numeric_grad(lambda: float(build().data), x.data)) < 1e-6
    assert np.all(g[1, 4:] == 0)
    assert np.count_nonzero(g[0, :, 0]) == 2


def test_topk_errors():
    with pytest.raises(DataError):
        T.topk_avg_pool(np.ones((1, 3, 2)), np.zeros((1, 3), dtype=bool), 1)
    with pytest.raises(ConfigError):
        T.topk_avg_pool(np.ones((1, 3, 2)), np.ones((1, 3), dtype=bool), 0)
