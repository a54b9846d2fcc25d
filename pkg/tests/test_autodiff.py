import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partreid import autodiff as ad
from partreid.losses import BatchFeatures, combined_loss, memory_softmax_loss, triplet_center_loss
from partreid.memory import MemoryBank


def grad_of(fn, x, seed=None):
    leaf = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        out = fn(leaf)
    return tape.backward(out, seed)[leaf]


# ----------------------------------------------------------------- forward


def test_add_example():
    np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).values, [4.0, 6.0])


def test_l2_normalize_example():
    np.testing.assert_allclose(ad.l2_normalize([3.0, 4.0]).values, [0.6, 0.8], rtol=0, atol=1e-15)


def test_mean_over_region_of_ones():
    assert ad.mean_over_region(np.ones((2, 2))).values == 1.0


def test_l2_normalize_guard_returns_zero_with_zero_grad():
    x = np.array([1e-14, 0.0])
    assert np.all(ad.l2_normalize(x).values == 0.0)
    g = grad_of(lambda t: ad.l2_normalize(t), x, seed=np.ones(2))
    assert np.all(g == 0.0)


@pytest.mark.parametrize(
    "call",
    [
        lambda: ad.add(np.ones(3), np.ones(4)),
        lambda: ad.matmul(np.ones((2, 3)), np.ones((4, 2))),
        lambda: ad.dot(np.ones(3), np.ones(2)),
        lambda: ad.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0),
    ],
)
def test_shape_mismatch_names_op_and_shapes(call):
    with pytest.raises(ad.ShapeError) as err:
        call()
    msg = str(err.value)
    assert any(op in msg for op in ("add", "matmul", "dot", "concat"))
    assert "(" in msg


def test_unknown_op_kind_rejected():
    with pytest.raises(ad.ShapeError, match="unsupported"):
        ad.forward_op("conv2d", np.ones(2))


def test_forward_op_dispatches_spec_kinds():
    for kind in ("matmul", "add", "scale", "relu", "mean_over_region", "l2_normalize", "dot", "concat", "slice"):
        assert kind in ad.OPS
    np.testing.assert_array_equal(ad.forward_op("add", [1.0], [2.0]).values, [3.0])


def test_tensor_values_are_read_only():
    t = ad.Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.values[0] = 1.0


def test_forward_is_deterministic(rng):
    x, w = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    a = ad.l2_normalize(ad.relu(ad.matmul(x, w))).values
    b = ad.l2_normalize(ad.relu(ad.matmul(x, w))).values
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- backward


def test_dot_gradient_example():
    np.testing.assert_array_equal(grad_of(lambda t: ad.dot(t, t), [1.0, 2.0]), [2.0, 4.0])


def test_l2_normalize_gradient_example():
    # frozen from central differences (step 1e-6) of the closed-form map
    g = grad_of(lambda t: ad.l2_normalize(t), [1.0, 0.0], seed=np.array([0.0, 1.0]))
    np.testing.assert_allclose(g, [0.0, 0.9999999999995001], atol=1e-9)


def test_relu_gradient_example():
    g = grad_of(lambda t: ad.relu(t), [-1.0, 2.0], seed=np.ones(2))
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_relu_gradient_is_zero_at_kink():
    assert grad_of(lambda t: ad.relu(t), [0.0], seed=np.ones(1))[0] == 0.0


def test_empty_tape_gives_empty_gradients():
    with ad.Tape() as tape:
        pass
    assert tape.backward() == {}


def test_seed_shape_must_match_output():
    leaf = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.scale(leaf, 2.0)
    with pytest.raises(ad.ShapeError):
        tape.backward(out, np.ones(2))


def test_ops_outside_a_tape_are_not_recorded():
    leaf = ad.Tensor(np.ones(2), requires_grad=True)
    ad.scale(leaf, 3.0)
    with ad.Tape() as tape:
        pass
    assert len(tape) == 0


def test_shared_subexpression_accumulates():
    # y = x*x through two paths of the same node
    g = grad_of(lambda t: ad.sum_all(ad.add(ad.scale(t, 2.0), ad.scale(t, 3.0))), [1.0, -1.0])
    np.testing.assert_array_equal(g, [5.0, 5.0])


def test_tapes_are_thread_local():
    errors = []

    def work(k):
        try:
            g = grad_of(lambda t: ad.dot(ad.scale(t, k), t), [1.0, 2.0])
            np.testing.assert_allclose(g, [2.0 * k, 4.0 * k])
        except AssertionError as e:  # pragma: no cover
            errors.append(e)

    threads = [threading.Thread(target=work, args=(float(k),)) for k in range(1, 9)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 10_000))
def test_backward_is_linear_in_seed(alpha, seed):
    rng = np.random.default_rng(seed)
    x, w, s = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5)), rng.normal(size=(3, 5))

    def fn(t):
        return ad.l2_normalize(ad.relu(ad.matmul(t, w)))

    np.testing.assert_allclose(grad_of(fn, x, alpha * s), alpha * grad_of(fn, x, s), rtol=1e-12, atol=1e-12)


# ------------------------------------------------------ finite differences


def _random_op_cases(rng):
    """(name, scalar function of x, x) for every op, inputs in [-1, 1]."""
    u = lambda *shape: rng.uniform(-1, 1, shape)  # noqa: E731
    w, b, m, wb = u(4, 3), u(3), u(2, 3, 4), u(2, 4, 5)
    mask = rng.uniform(size=(2, 3, 4)) > 0.3
    mask[..., 0] = True
    r = u(2, 3, 4)
    return [
        ("matmul", lambda t: ad.dot(ad.reshape(ad.matmul(t, w), (-1,)), r.reshape(-1)[:6]), u(2, 4)),
        ("matmul_batched", lambda t: ad.sum_all(ad.matmul(t, wb)), u(2, 3, 4)),
        ("add", lambda t: ad.dot(ad.reshape(ad.add(t, b), (-1,)), r.reshape(-1)[:6]), u(2, 3)),
        ("scale", lambda t: ad.dot(ad.reshape(ad.scale(t, -2.5), (-1,)), r.reshape(-1)[:6]), u(2, 3)),
        ("relu", lambda t: ad.dot(ad.reshape(ad.relu(t), (-1,)), r.reshape(-1)), u(2, 3, 4)),
        ("mean_over_region", lambda t: ad.sum_all(ad.dot(ad.mean_over_region(t, axes=(1, 2)), b[:2])), u(2, 3, 4, 2)),
        ("mean_region_slice", lambda t: ad.sum_all(ad.mean_over_region(t, region=(slice(0, 2), slice(1, 3)))), u(3, 4)),
        ("l2_normalize", lambda t: ad.dot(ad.reshape(ad.l2_normalize(t), (-1,)), r.reshape(-1)), m),
        ("dot", lambda t: ad.sum_all(ad.dot(t, ad.scale(t, 0.5))), u(3, 4)),
        ("concat", lambda t: ad.dot(ad.reshape(ad.concat([t, ad.scale(t, 2.0)], axis=1), (-1,)), r.reshape(-1)[:12]), u(2, 3)),
        ("slice", lambda t: ad.sum_all(ad.dot(ad.take(t, (slice(None), slice(1, 3))), b)), u(2, 4, 3)),
        ("reshape", lambda t: ad.dot(ad.reshape(t, (-1,)), r.reshape(-1)), m),
        ("transpose", lambda t: ad.dot(ad.reshape(ad.transpose(t, (2, 0, 1)), (-1,)), r.reshape(-1)), m),
        ("logsumexp", lambda t: ad.sum_all(ad.logsumexp(ad.scale(t, 5.0), mask=mask)), m),
    ]


def test_every_op_passes_finite_difference_check(rng):
    for name, fn, x in _random_op_cases(rng):
        # relu is checked away from its kink
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        assert ad.finite_diff_check(fn, x, 1e-6) < 1e-5, name


def test_fd_half_squared_l2(rng):
    c = rng.uniform(-1, 1, 8)
    fn = lambda t: ad.scale(ad.dot(ad.add(t, -c), ad.add(t, -c)), 0.5)  # noqa: E731
    assert ad.finite_diff_check(fn, rng.uniform(-1, 1, 8), 1e-6) < 1e-6


def test_fd_constant_is_zero():
    assert ad.finite_diff_check(lambda t: ad.Tensor(3.0), np.zeros(4)) == 0.0


def test_fd_combined_loss_two_class_toy(rng):
    bank = MemoryBank(["a", "a", "b", "b"], 2, 4)
    for i in range(4):
        for p in range(2):
            bank.update(i, p, rng.uniform(-1, 1, 4))
    centers = bank.class_centers()
    labels, idx = np.array(["a", "b"]), np.array([0, 2])

    def fn(t):
        batch = BatchFeatures(t, labels, idx)
        return combined_loss(triplet_center_loss(batch, centers, 1.0).value,
                             memory_softmax_loss(batch, bank, 0.3, "instance").value, 1.0)

    assert ad.finite_diff_check(fn, rng.uniform(-1, 1, (2, 2, 4))) < 1e-5


def test_fd_reports_non_finite_coordinate():
    def fn(t):
        v = t.values
        return ad.Tensor(np.inf) if v[1] > 0.5 else ad.sum_all(t)

    with pytest.raises(ad.NonFiniteError) as err:
        ad.finite_diff_check(fn, np.array([0.0, 0.5]), step=1e-3)
    assert err.value.coordinate == (1,)


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda t: ad.sum_all(t), np.zeros(2), step=0.0)
