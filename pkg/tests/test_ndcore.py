"""Autodiff engine checks: every op against central finite differences,
plus optimizer and RNG contracts."""

import math

import numpy as np
import pytest

from snaptraj import ndcore as nd
from snaptraj.ndcore import Tensor


def fd_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64)."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def check_op(build, shapes, seed, rel_tol=1e-4):
    """Compare autodiff and finite-difference grads for every input slot.

    ``build`` maps a list of Tensors to a scalar Tensor; inputs are float64
    so the finite-difference oracle itself stays accurate.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape) * 0.7 for shape in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(tensors)
    nd.backward(loss)
    for slot, (arr, tensor) in enumerate(zip(arrays, tensors)):
        def f(x, slot=slot):
            inputs = [Tensor(a, dtype=np.float64) for a in arrays]
            inputs[slot] = Tensor(x, dtype=np.float64)
            return float(build(inputs).data)
        numeric = fd_gradient(f, arr.copy())
        analytic = tensor.grad
        denom = max(1.0, np.abs(numeric).max(), np.abs(analytic).max())
        assert np.abs(analytic - numeric).max() / denom < rel_tol, \
            f"slot {slot}: max abs diff {np.abs(analytic - numeric).max()}"


def _sum_all(t):
    return nd.tsum(t)


OP_CASES = [
    ("add", lambda ts: _sum_all(nd.hadamard(nd.add(ts[0], ts[1]), ts[0])),
     [(3, 4), (3, 4)]),
    ("add_broadcast", lambda ts: _sum_all(nd.hadamard(nd.add(ts[0], ts[1]), ts[0])),
     [(3, 4), (4,)]),
    ("sub", lambda ts: _sum_all(nd.hadamard(nd.sub(ts[0], ts[1]), ts[1])),
     [(2, 5), (2, 5)]),
    ("hadamard", lambda ts: _sum_all(nd.hadamard(ts[0], ts[1])), [(4, 3), (4, 3)]),
    ("hadamard_broadcast", lambda ts: _sum_all(nd.hadamard(ts[0], ts[1])),
     [(2, 3, 4), (4,)]),
    ("scale", lambda ts: _sum_all(nd.scale(nd.hadamard(ts[0], ts[0]), 2.5)), [(3, 3)]),
    ("matmul", lambda ts: _sum_all(nd.matmul(ts[0], ts[1])), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda ts: _sum_all(nd.matmul(ts[0], ts[1])),
     [(2, 3, 4), (2, 4, 5)]),
    ("concat", lambda ts: _sum_all(nd.hadamard(nd.concat(ts, axis=1),
                                               nd.concat(ts, axis=1))),
     [(2, 3), (2, 2)]),
    ("reshape", lambda ts: _sum_all(nd.hadamard(nd.reshape(ts[0], (6,)),
                                                nd.reshape(ts[0], (6,)))), [(2, 3)]),
    ("transpose", lambda ts: _sum_all(nd.matmul(nd.transpose(ts[0], (1, 0)), ts[1])),
     [(4, 3), (4, 2)]),
    ("take", lambda ts: _sum_all(nd.hadamard(nd.take(ts[0], [0, 2, 2, 1]),
                                             nd.take(ts[0], [0, 2, 2, 1]))), [(3, 4)]),
    ("relu", lambda ts: _sum_all(nd.relu(ts[0])), [(5, 5)]),
    ("sigmoid", lambda ts: _sum_all(nd.sigmoid(ts[0])), [(4, 4)]),
    ("tanh", lambda ts: _sum_all(nd.tanh(ts[0])), [(4, 4)]),
    ("reciprocal", lambda ts: _sum_all(nd.reciprocal(nd.add(nd.hadamard(ts[0], ts[0]),
                                                            Tensor(np.full((3, 3), 2.0),
                                                                   dtype=np.float64)))),
     [(3, 3)]),
    ("softmax", lambda ts: _sum_all(nd.hadamard(nd.softmax(ts[0]), ts[1])),
     [(3, 5), (3, 5)]),
    ("layer_norm", lambda ts: _sum_all(nd.hadamard(nd.layer_norm(ts[0], ts[1], ts[2]),
                                                   ts[0])),
     [(4, 6), (6,), (6,)]),
    ("mean", lambda ts: nd.tmean(nd.hadamard(ts[0], ts[0])), [(3, 4)]),
    ("sum_axis", lambda ts: _sum_all(nd.hadamard(nd.tsum(ts[0], axis=1), ts[1])),
     [(3, 4), (3,)]),
]


@pytest.mark.parametrize("name,build,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradients_match_finite_differences(name, build, shapes):
    for seed in (0, 1):
        check_op(build, shapes, seed=seed)


def test_gradient_suite_many_random_shapes():
    # >= 20 random shapes through a smooth mixed op chain (the relu kink is
    # covered separately where inputs stay clear of it)
    rng = np.random.default_rng(7)
    for trial in range(20):
        m = int(rng.integers(1, 8))
        k = int(rng.integers(1, 8))
        n = int(rng.integers(1, 8))

        def build(ts):
            h = nd.tanh(nd.matmul(ts[0], ts[1]))
            s = nd.softmax(nd.add(h, ts[2]))
            return nd.tmean(nd.hadamard(s, s))

        check_op(build, [(m, k), (k, n), (n,)], seed=100 + trial)


def test_mlp_against_finite_differences():
    def build(ts):
        x, w1, b1, w2, b2 = ts
        h = nd.tanh(nd.add(nd.matmul(x, w1), b1))
        out = nd.add(nd.matmul(h, w2), b2)
        return nd.tmean(nd.hadamard(out, out))

    check_op(build, [(4, 3), (3, 6), (6,), (6, 2), (2,)], seed=3)


def test_cross_entropy_uniform_logits_is_log_c():
    for c in (2, 4, 7):
        logits = Tensor(np.zeros((5, c)), dtype=np.float64)
        loss = nd.cross_entropy(logits, np.zeros(5, dtype=np.int64))
        assert abs(float(loss.data) - math.log(c)) < 1e-6


def test_cross_entropy_perfect_logits_approaches_zero():
    logits = np.full((3, 4), -100.0)
    logits[np.arange(3), [1, 2, 0]] = 100.0
    loss = nd.cross_entropy(Tensor(logits, dtype=np.float64), np.array([1, 2, 0]))
    assert float(loss.data) < 1e-6


def test_cross_entropy_ignore_index_excluded_from_mean():
    logits = np.zeros((4, 3))
    targets = np.array([0, 1, -1, -1])
    loss = nd.cross_entropy(Tensor(logits, dtype=np.float64), targets, ignore_index=-1)
    assert abs(float(loss.data) - math.log(3)) < 1e-9
    with pytest.raises(ValueError):
        nd.cross_entropy(Tensor(logits, dtype=np.float64),
                         np.array([-1, -1, -1, -1]), ignore_index=-1)


def test_cross_entropy_gradient():
    def build(ts):
        return nd.cross_entropy(ts[0], np.array([1, 0, 2]))
    check_op(build, [(3, 4)], seed=5)


def test_binary_cross_entropy_values_and_gradient():
    probs = Tensor(np.full(4, 0.5), dtype=np.float64)
    loss = nd.binary_cross_entropy(probs, np.array([1.0, 0.0, 1.0, 0.0]))
    assert abs(float(loss.data) - math.log(2)) < 1e-9

    def build(ts):
        return nd.binary_cross_entropy(nd.sigmoid(ts[0]), np.array([1.0, 0.0, 1.0]))
    check_op(build, [(3,)], seed=11)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    s = nd.softmax(Tensor(rng.normal(size=(6, 9)) * 3))
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(6), atol=1e-6)
    flat = nd.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(flat.data, np.full(3, 1 / 3), atol=1e-7)


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
    out = nd.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(5), atol=1e-4)
    np.testing.assert_allclose(out.data.var(axis=1), np.ones(5), atol=1e-3)


def test_sigmoid_analytic_point():
    x = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    y = nd.tsum(nd.sigmoid(x))
    assert float(y.data) == pytest.approx(0.5)
    nd.backward(y)
    assert x.grad[0] == pytest.approx(0.25)


def test_hadamard_with_ones_is_identity():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    out = nd.hadamard(a, Tensor(np.ones((4, 5), dtype=np.float32)))
    assert np.array_equal(out.data, a.data)


def test_embedding_lookup_grads_only_touch_accessed_rows():
    table = Tensor(np.random.default_rng(0).normal(size=(6, 3)),
                   requires_grad=True, dtype=np.float64)
    out = nd.embedding_lookup(table, np.array([1, 4, 4]))
    nd.backward(nd.tsum(out))
    touched = {1, 4}
    for row in range(6):
        if row in touched:
            assert np.any(table.grad[row] != 0)
        else:
            assert np.all(table.grad[row] == 0)
    assert np.allclose(table.grad[4], 2.0)  # accessed twice


def test_backward_requires_scalar_and_single_call():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = nd.hadamard(x, x)
    with pytest.raises(ValueError):
        nd.backward(y)
    loss = nd.tsum(y)
    nd.backward(loss)
    with pytest.raises(RuntimeError):
        nd.backward(loss)


def test_sum_loss_gives_unit_gradients():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    nd.backward(nd.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_constant_branch_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = nd.constant(np.full(3, 5.0))
    loss = nd.tsum(nd.add(nd.hadamard(x, x), c))
    nd.backward(loss)
    assert c.grad is None
    assert np.allclose(x.grad, 2.0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    opt = nd.Adam([p], lr=0.1)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, np.array([1.0, 2.0], dtype=np.float32))


def test_adam_first_step_magnitude_is_lr():
    # bias correction makes the first update exactly lr * sign(grad) as eps -> 0
    p = Tensor(np.array([5.0], dtype=np.float32), requires_grad=True)
    opt = nd.Adam([p], lr=0.01, eps=1e-12)
    p.grad = np.array([3.7], dtype=np.float32)
    opt.step()
    assert abs((5.0 - float(p.data[0])) - 0.01) < 1e-6


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([0.5], dtype=np.float32), requires_grad=True)
    opt = nd.Adam([p], lr=0.01)
    for _ in range(200):
        opt.zero_grad()
        loss = nd.tsum(nd.hadamard(p, p))
        nd.backward(loss)
        opt.step()
    assert abs(float(p.data[0])) < 1e-2


def test_functional_adam_step_matches_class():
    p1 = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    p2 = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = nd.Adam([p1], lr=0.05)
    state = nd.init_adam_state([p2])
    for step in range(5):
        g = np.array([0.3 * (step + 1), -0.1], dtype=np.float32)
        p1.grad = g.copy()
        opt.step()
        nd.adam_step([p2], [g.copy()], state, lr=0.05)
    np.testing.assert_allclose(p1.data, p2.data, rtol=1e-6)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def test_seeded_rng_reproducible():
    a = nd.seeded_rng(42).uniform(size=100)
    b = nd.seeded_rng(42).uniform(size=100)
    np.testing.assert_array_equal(a, b)


def test_seeded_rng_split_streams_differ_and_are_stable():
    root = nd.seeded_rng(7)
    a = root.split("a").normal(size=50)
    b = root.split("b").normal(size=50)
    assert not np.allclose(a, b)
    again = nd.seeded_rng(7).split("a").normal(size=50)
    np.testing.assert_array_equal(a, again)


def test_seeded_rng_uniform_range():
    draws = nd.seeded_rng(3).uniform(size=1000)
    assert draws.min() >= 0.0 and draws.max() < 1.0


def test_split_independent_of_sibling_consumption():
    r1 = nd.seeded_rng(5)
    r1.uniform(size=10)             # consume from the parent stream
    a = r1.split("child").uniform(size=5)
    b = nd.seeded_rng(5).split("child").uniform(size=5)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
              "b": Tensor(rng.normal(size=4).astype(np.float32))}
    path = tmp_path / "ckpt.json"
    nd.save_checkpoint(path, params, meta={"note": "test"})
    arrays, meta = nd.load_checkpoint(path)
    assert meta["note"] == "test"
    for name in params:
        assert np.array_equal(arrays[name], params[name].data)


def test_checkpoint_shape_validation(tmp_path):
    params = {"w": Tensor(np.zeros((2, 2), dtype=np.float32))}
    path = tmp_path / "ckpt.json"
    nd.save_checkpoint(path, params)
    with pytest.raises(ValueError):
        nd.load_checkpoint(path, expected_shapes={"w": (3, 3)})
    with pytest.raises(ValueError):
        nd.load_checkpoint(path, expected_shapes={"w": (2, 2), "missing": (1,)})
