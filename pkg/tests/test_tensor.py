import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktm import tensor as T
from ktm.errors import ContractError, NumericDomainError, ShapeError
from ktm.tensor import Tensor

from conftest import central_difference, max_relative_error


def test_matmul_identity():
    out = T.tensor([[1, 0], [0, 1]]) @ T.tensor([[3], [4]])
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_mean_last_axis():
    np.testing.assert_array_equal(T.mean(T.tensor([[2, 4]]), axis=-1).data, [3])


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_backward_square():
    x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_constant_loss_writes_no_gradients():
    x = T.tensor([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    assert x.grad is None
    assert loss.node is None


def test_repeated_backward_accumulates():
    x = T.tensor([1.0, -2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4, -8])


def test_backward_needs_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_shape_error_names_both_shapes():
    a, b = T.zeros((2, 3)), T.zeros((4, 5))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        a @ b
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        a + b


def test_broadcast_only_over_leading_dims():
    x = T.zeros((2, 3, 4))
    assert (x + T.zeros(4)).shape == (2, 3, 4)
    assert (x + T.zeros((3, 4))).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        x + T.zeros((2, 1, 4))


def test_dtype_mismatch_rejected():
    with pytest.raises(ContractError):
        T.zeros(3, dtype=np.float32) + T.zeros(3, dtype=np.float64)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        T.softmax(T.tensor([0.0, np.inf]))
    with pytest.raises(NumericDomainError):
        T.log(T.tensor([1.0, np.nan]))


def test_no_grad_records_no_tape():
    x = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_masked_softmax_excludes_entries():
    y = T.softmax(T.tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]]))
    assert y.data[0, 2] == 0.0
    np.testing.assert_allclose(y.data.sum(), 1.0, rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 40))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = np.random.default_rng(seed).normal(0, 30, size=(rows, cols)).astype(np.float32)
    np.testing.assert_allclose(T.softmax(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-6)


def test_deterministic_forward():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 7)).astype(np.float32)
    b = rng.normal(size=(7, 3)).astype(np.float32)

    def run():
        return T.gelu(T.layer_norm(Tensor(a) @ Tensor(b), T.zeros(3) + 1.0, T.zeros(3))).data

    assert run().tobytes() == run().tobytes()


# -- gradient check against central differences (float64) --------------------

def _random_graph(seed):
    """A small composite graph touching every differentiable op family."""
    rng = np.random.default_rng(seed)
    B, n, d = 2, 3, 4
    leaves = {
        "x": rng.normal(size=(B, n, d)),
        "w": rng.normal(size=(d, d)) * 0.5,
        "g": 1.0 + 0.1 * rng.normal(size=d),
        "b": 0.1 * rng.normal(size=d),
        "table": rng.normal(size=(6, d)),
        "u": rng.normal(size=(d, 5)),
    }
    ids = rng.integers(0, 6, size=(B, n))
    targets = rng.integers(0, 5, size=(B, 2 * n))
    mask = np.tril(np.ones((n, n), dtype=bool))
    op_choice = int(rng.integers(0, 3))

    def f(ts):
        x = ts["x"] + T.embedding(ts["table"], ids)
        h = T.layer_norm(x, ts["g"], ts["b"])
        h = T.gelu(h @ ts["w"])
        att = T.softmax(h @ h.T, mask=mask)
        h = att @ h
        if op_choice == 0:
            h = T.concat([h, x], axis=1)
        elif op_choice == 1:
            h = T.concat([h, h.reshape(B, n * d).reshape(B, n, d)], axis=1)
        else:
            h = T.concat([h, T.mean(T.stack([h, x], axis=2), axis=2)], axis=1)
        logits = h @ ts["u"]
        lsm = T.log_softmax(logits)
        nll = T.cross_entropy(logits, targets)
        return T.sum_(nll) + T.sum_(T.take(lsm, (0, 1, 2))) * 0.1 + T.mean(T.mean(h, -1), -1).sum()

    return leaves, f


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    leaves, f = _random_graph(seed)
    ts = {k: Tensor(v, requires_grad=True) for k, v in leaves.items()}
    f(ts).backward()
    order = list(ts)

    def value():
        with T.no_grad():
            return f(ts).item()

    est = central_difference(value, [ts[k].data for k in order], h=1e-4, max_elements=12,
                             rng=np.random.default_rng(seed))
    analytic = [ts[order[ai]].grad.reshape(-1)[i] for ai, i, _ in est]
    numeric = [e for _, _, e in est]
    assert max_relative_error(analytic, numeric) <= 1e-4
