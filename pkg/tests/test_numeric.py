import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from valor import numeric as nm
from valor.errors import ContractError, DimensionError, NumericError

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def randn(*shape, seed=0, grad=True):
    g = np.random.default_rng(seed)
    return nm.tensor(g.standard_normal(shape), requires_grad=grad)


# -- gradient oracles ---------------------------------------------------------

UNARY_OPS = {
    "softmax": lambda x: (nm.softmax(x) * torch.arange(1.0, 5.0, dtype=nm.DTYPE)).sum(),
    "log_softmax": lambda x: (nm.log_softmax(x) ** 2).sum(),
    "layer_norm": lambda x: (nm.layer_norm(x) * torch.linspace(-1, 1, 4, dtype=nm.DTYPE)).sum(),
    "gelu": lambda x: nm.gelu(x).sum(),
    "l2_normalize": lambda x: (nm.l2_normalize(x) * torch.linspace(0.5, 2, 4, dtype=nm.DTYPE)).sum(),
    "masked_softmax": lambda x: (nm.masked_softmax(x, torch.tensor([True, False, True, True]))
                                 * torch.arange(4.0, dtype=nm.DTYPE)).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_gradients_match_finite_differences(name):
    x = randn(3, 4, seed=1)
    assert nm.gradient_check(lambda: UNARY_OPS[name](x), [x]) < 1e-6


def test_matmul_gradient():
    a, b = randn(3, 4, seed=2), randn(4, 2, seed=3)
    assert nm.gradient_check(lambda: (nm.matmul(a, b) ** 2).sum(), [a, b]) < 1e-6


def test_cross_entropy_gradient():
    logits = randn(5, 7, seed=4)
    targets = torch.tensor([0, 3, 6, 2, 2])
    assert nm.gradient_check(lambda: nm.cross_entropy(logits, targets), [logits]) < 1e-6


def test_embedding_gradient_accumulates_repeated_ids():
    table = randn(5, 3, seed=5)
    ids = torch.tensor([1, 1, 4])
    w = torch.tensor([[1.0, 2.0, 3.0]] * 3, dtype=nm.DTYPE)
    nm.backward((nm.embedding_lookup(table, ids) * w).sum())
    expected = np.zeros((5, 3))
    expected[1] = 2 * np.array([1.0, 2.0, 3.0])
    expected[4] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(table.grad.numpy(), expected)


def test_shared_subexpression_gradients_accumulate():
    # y = x*x + x*x uses x four times
    x = nm.tensor([1.5, -2.0], requires_grad=True)
    nm.backward((x * x + x * x).sum())
    np.testing.assert_allclose(x.grad.numpy(), 4 * np.array([1.5, -2.0]), rtol=0, atol=0)


def test_layer_norm_with_affine_gradient():
    x, w, b = randn(2, 4, seed=6), randn(4, seed=7), randn(4, seed=8)
    fn = lambda: (nm.layer_norm(x, w, b) ** 3).sum()
    assert nm.gradient_check(fn, [x, w, b]) < 1e-6


# -- forward properties -------------------------------------------------------

@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = nm.softmax(nm.tensor(x), axis=1)
    np.testing.assert_allclose(p.sum(dim=1).numpy(), 1.0, atol=1e-12)
    assert (p >= 0).all()


@given(arrays(np.float64, (4,), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    a = nm.softmax(nm.tensor(x))
    b = nm.softmax(nm.tensor(x + c))
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)


def test_softmax_large_logits_stable():
    p = nm.softmax(nm.tensor([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p.numpy(), [0.5, 0.5, 0.0])


def test_masked_softmax_zero_weight_on_masked():
    p = nm.masked_softmax(nm.tensor([3.0, 100.0, 1.0]), torch.tensor([True, False, True]))
    assert p[1].item() == 0.0
    np.testing.assert_allclose(p.sum().item(), 1.0)


@given(arrays(np.float64, (2, 6), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    t = nm.tensor(x)
    np.testing.assert_allclose(nm.log_softmax(t).numpy(), np.log(nm.softmax(t).numpy()), atol=1e-9)


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)).filter(lambda a: (np.abs(a).sum(1) > 1e-3).all()))
def test_l2_normalize_unit_norm(x):
    y = nm.l2_normalize(nm.tensor(x))
    np.testing.assert_allclose(np.linalg.norm(y.numpy(), axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, (2, 8), elements=st.floats(-10, 10)).filter(lambda a: (a.std(1) > 1e-2).all()))
def test_layer_norm_zero_mean_unit_variance(x):
    y = nm.layer_norm(nm.tensor(x)).numpy()
    np.testing.assert_allclose(y.mean(1), 0.0, atol=1e-10)
    var = x.var(1)
    np.testing.assert_allclose(y.var(1), var / (var + nm.LAYER_NORM_EPS), atol=1e-10)


def test_gelu_known_values():
    y = nm.gelu(nm.tensor([0.0, 1.0, -1.0])).numpy()
    np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-15)


def test_cross_entropy_uniform_logits():
    loss = nm.cross_entropy(torch.zeros(3, 5, dtype=nm.DTYPE), torch.tensor([0, 1, 4]))
    assert math.isclose(loss.item(), math.log(5), abs_tol=1e-15)


# -- contract errors ----------------------------------------------------------

def test_matmul_dimension_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nm.matmul(torch.zeros(2, 3, dtype=nm.DTYPE), torch.zeros(4, 2, dtype=nm.DTYPE))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nm.embedding_lookup(torch.zeros(5, 2, dtype=nm.DTYPE), torch.tensor([5]))


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        nm.cross_entropy(torch.zeros(1, 3, dtype=nm.DTYPE), torch.tensor([3]))
    with pytest.raises(ContractError):
        nm.cross_entropy(torch.zeros(0, 3, dtype=nm.DTYPE), torch.zeros(0, dtype=torch.long))


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nm.softmax(nm.tensor([0.0, float("nan")]))


def test_backward_requires_scalar_on_tape():
    x = nm.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        nm.backward(x * 2)
    with pytest.raises(ContractError):
        nm.backward(nm.tensor(1.0))


def test_finite_difference_oracle_restores_parameters():
    x = randn(2, 3, seed=9)
    before = x.detach().clone()
    nm.central_differences(lambda: (x ** 2).sum(), [x])
    assert torch.equal(x.detach(), before)


def test_relative_error_floor():
    assert nm.max_relative_error([np.array([1e-9])], [np.array([0.0])]) == pytest.approx(1e-3)
    assert nm.max_relative_error([np.array([2.0])], [np.array([1.0])]) == 0.5
