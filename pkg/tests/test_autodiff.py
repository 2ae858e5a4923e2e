"""Every differentiation rule is checked against central finite differences."""

import numpy as np
import pytest

from kiqa import autodiff as ad
from kiqa.autodiff import SGD, Tensor, concat, cross_entropy, log_softmax, no_grad, softmax

RNG = np.random.default_rng(42)


def numeric_grad(loss_fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        hi = loss_fn()
        flat[i] = original - step
        lo = loss_fn()
        flat[i] = original
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grads(build_loss, *arrays):
    """build_loss(*tensors) -> scalar Tensor; FD-checks every input."""
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    for t, x in zip(tensors, arrays):
        with no_grad():
            numeric = numeric_grad(lambda: build_loss(*[Tensor(a) for a in arrays]).item(), x)
        assert t.grad is not None
        assert rel_err(t.grad, numeric) < 1e-7


# --- elementwise -------------------------------------------------------------

def test_add_broadcast():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    check_grads(lambda x, y: ((x + y) * (x + y)).sum(), a, b)


def test_sub_and_neg():
    a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))
    check_grads(lambda x, y: ((x - y) * 2.0 + (-x)).sum(), a, b)


def test_mul_broadcast():
    a = RNG.normal(size=(2, 3, 4))
    b = RNG.normal(size=(3, 1))
    check_grads(lambda x, y: (x * y).sum(), a, b)


def test_div():
    a = RNG.normal(size=(3, 3))
    b = RNG.uniform(1.0, 2.0, size=(3, 3))
    check_grads(lambda x, y: (x / y).sum(), a, b)


def test_scalar_operands():
    a = RNG.normal(size=(4,))
    check_grads(lambda x: (2.0 * x + 1.0 - x / 3.0).sum(), a)


@pytest.mark.parametrize(
    "fn",
    [ad.tanh, ad.exp, lambda t: ad.log(t + 3.0), lambda t: t**2, lambda t: t**0.5],
    ids=["tanh", "exp", "log", "square", "sqrt"],
)
def test_unary_ops(fn):
    a = RNG.uniform(0.5, 1.5, size=(3, 4))
    check_grads(lambda x: fn(x).sum(), a)


# --- matmul ------------------------------------------------------------------

def test_matmul_2d():
    a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))
    check_grads(lambda x, y: (x @ y).sum(), a, b)


def test_matmul_batched_times_params():
    # (B, L, d) @ (d, d): the parameter gradient must sum over the batch
    x = RNG.normal(size=(2, 5, 3))
    w = RNG.normal(size=(3, 3))
    check_grads(lambda a, b: ((a @ b) ** 2).sum(), x, w)


def test_matmul_batched_both():
    a = RNG.normal(size=(2, 4, 3))
    b = RNG.normal(size=(2, 3, 4))
    check_grads(lambda x, y: (x @ y).sum(), a, b)


def test_attention_shaped_product():
    q = RNG.normal(size=(2, 4, 3))
    k = RNG.normal(size=(2, 4, 3))
    check_grads(lambda a, b: (a @ b.swap_last_axes()).sum(), q, k)


# --- reductions ----------------------------------------------------------------

def test_sum_axis_keepdims():
    a = RNG.normal(size=(3, 4, 2))
    check_grads(lambda x: (x.sum(axis=1, keepdims=True) * x).sum(), a)


def test_mean_axes():
    a = RNG.normal(size=(3, 4))
    check_grads(lambda x: x.mean(), a)
    check_grads(lambda x: (x.mean(axis=-1) ** 2).sum(), a)


def test_max_axis():
    a = RNG.normal(size=(4, 5))
    check_grads(lambda x: x.max(axis=1).sum(), a)
    check_grads(lambda x: x.max() * 2.0, a)


def test_max_ties_route_to_first():
    a = Tensor(np.array([1.0, 3.0, 3.0, 2.0]), requires_grad=True)
    a.max().backward()
    assert np.array_equal(a.grad, [0.0, 1.0, 0.0, 0.0])


# --- shaping and gather ----------------------------------------------------------

def test_reshape():
    a = RNG.normal(size=(2, 6))
    check_grads(lambda x: (x.reshape(3, 4) ** 2).sum(), a)


def test_getitem_slice():
    a = RNG.normal(size=(3, 4, 5))
    check_grads(lambda x: (x[:, 0, :] ** 2).sum(), a)


def test_gather_with_duplicate_rows():
    # embedding-style lookup where the same row appears twice
    table = RNG.normal(size=(6, 3))
    ids = np.array([[1, 4, 1], [0, 0, 5]])
    check_grads(lambda t: (t[ids] ** 2).sum(), table)


def test_concat():
    a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(4, 3))
    check_grads(lambda x, y: (concat([x, y], axis=0) ** 2).sum(), a, b)


# --- composites -------------------------------------------------------------------

def test_softmax_grad_and_normalization():
    a = RNG.normal(size=(3, 5)) * 3
    check_grads(lambda x: (softmax(x, axis=-1) * RNG_WEIGHTS).sum(), a)
    out = softmax(Tensor(a), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


RNG_WEIGHTS = RNG.normal(size=(3, 5))


def test_softmax_is_shift_invariant_and_stable():
    a = RNG.normal(size=(2, 4))
    s1 = softmax(Tensor(a)).data
    s2 = softmax(Tensor(a + 1000.0)).data
    np.testing.assert_allclose(s1, s2, atol=1e-12)
    huge = softmax(Tensor(np.array([1e6, 0.0, -1e6]))).data
    assert np.isfinite(huge).all()


def test_log_softmax_matches_log_of_softmax():
    a = RNG.normal(size=(3, 4))
    np.testing.assert_allclose(
        log_softmax(Tensor(a)).data, np.log(softmax(Tensor(a)).data), atol=1e-12
    )
    check_grads(lambda x: (log_softmax(x) * RNG_WEIGHTS_2).sum(), a)


RNG_WEIGHTS_2 = RNG.normal(size=(3, 4))


def test_cross_entropy():
    logits = RNG.normal(size=(4, 3))
    gold = np.array([0, 2, 1, 2])
    check_grads(lambda x: cross_entropy(x, gold), logits)
    # hand value: mean of -log softmax at gold
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(probs[np.arange(4), gold]).mean()
    assert cross_entropy(Tensor(logits), gold).item() == pytest.approx(want, abs=1e-12)


# --- graph mechanics -----------------------------------------------------------------

def test_shared_node_accumulates_both_paths():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0 + x * x  # dy/dx = 3 + 2x = 7
    y.backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_deep_chain_no_recursion_error():
    x = Tensor(np.array([0.5]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0001
    y.backward()
    assert x.grad is not None and np.isfinite(x.grad).all()


def test_no_grad_blocks_taping():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y._parents == ()
    y2 = (x * 2.0).sum()
    assert y2.requires_grad


def test_constants_are_not_tracked():
    x = Tensor(np.ones(3))
    y = (x * 2.0).sum()
    assert not y.requires_grad
    y.backward()  # harmless no-op seeding
    assert x.grad is None


def test_detach_cuts_the_graph():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = (x.detach() * x).sum()  # only the tracked use contributes
    y.backward()
    assert x.grad[0] == pytest.approx(3.0)


# --- optimizer ----------------------------------------------------------------------

def test_sgd_momentum_hand_computed():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    p.grad = np.array([2.0])
    opt.step()  # v = -0.2, p = 0.8
    assert p.data[0] == pytest.approx(0.8)
    opt.zero_grad()
    assert p.grad is None
    p.grad = np.array([1.0])
    opt.step()  # v = 0.9*(-0.2) - 0.1 = -0.28, p = 0.52
    assert p.data[0] == pytest.approx(0.52)


def test_sgd_zero_lr_keeps_parameters():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.0)
    p.grad = np.array([3.0, 4.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_skips_parameters_without_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    SGD({"p": p}, lr=0.5).step()
    assert p.data[0] == 1.0


def test_sgd_rejects_negative_lr():
    with pytest.raises(ValueError, match="learning rate"):
        SGD({}, lr=-0.1)
