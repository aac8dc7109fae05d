import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vittm import tensor as T
from vittm.errors import ContractError, DimensionError, FormatError
from vittm.tensor import Parameter, Tensor


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def rel(a, b):
    return np.max(np.abs(a - b)) / max(1e-300, np.max(np.abs(b)))


# ------------------------------------------------------------------ matmul

def test_matmul_identity_and_hand_values():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert rel(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_matmul_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert rel(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = Parameter(rng.standard_normal((3, 4))), Parameter(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.backward(T.sum(T.mul(T.matmul(a, b), Tensor(g))))
    assert np.allclose(a.grad, g @ b.data.T) and np.allclose(b.grad, a.data.T @ g)


def test_linear_op_matches_matmul_plus_bias():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3, 4)), Parameter(rng.standard_normal((4, 5))), Parameter(rng.standard_normal(5))
    assert np.allclose(T.linear(Tensor(x), w, b).data, x @ w.data + b.data, rtol=1e-13)
    xt = Parameter(x.copy())
    err = T.grad_check(lambda: T.sum(T.mul(T.linear(xt, w, b), T.linear(xt, w, b))), [xt, w, b])
    assert err < 1e-7


# ------------------------------------------------------------- elementwise

def test_elementwise_trivial_values():
    assert T.elu_plus_one(Tensor([0.0])).data[0] == 1.0
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert np.allclose(T.softmax_lastdim(Tensor([1.0, 1.0, 1.0])).data, 1 / 3)


def test_elu_plus_one_equals_composition():
    x = np.linspace(-4, 4, 41)
    ref = 1.0 + np.where(x > 0, x, np.expm1(x))
    assert np.allclose(T.elu_plus_one(Tensor(x)).data, ref, rtol=1e-14, atol=0)
    assert np.allclose(T.add(T.elu(Tensor(x)), 1.0).data, ref, rtol=1e-14)
    assert np.all(T.elu_plus_one(Tensor(x)).data > 0)


@pytest.mark.parametrize("op", ["sigmoid", "elu", "elu_plus_one", "gelu", "softmax_lastdim", "mean_lastdim",
                                "log_softmax"])
def test_unary_gradients(op):
    rng = np.random.default_rng(3)
    x = Parameter(rng.standard_normal((3, 5)))
    w = rng.standard_normal(getattr(T, op)(x).shape)
    f = lambda: T.sum(T.mul(getattr(T, op)(x), Tensor(w)))  # noqa: E731
    assert T.grad_check(f, [x]) < 1e-7


def test_binary_gradients_with_broadcasting():
    rng = np.random.default_rng(4)
    a, b = Parameter(rng.standard_normal((2, 3, 4))), Parameter(rng.standard_normal((3, 1)))
    c = Parameter(rng.uniform(1, 2, (4,)))
    f = lambda: T.sum(T.div(T.mul(T.sub(T.add(a, b), c), a), c))  # noqa: E731
    assert T.grad_check(f, [a, b, c]) < 1e-7


def test_non_broadcastable_is_dimension_error():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(5).standard_normal((4, 7)) * 30)
    s = T.softmax_lastdim(x).data
    assert np.allclose(s.sum(-1), 1.0, atol=1e-6) and s.min() >= 0 and s.max() <= 1


def test_layer_norm_statistics_and_gradient():
    rng = np.random.default_rng(6)
    x = Parameter(rng.standard_normal((3, 4, 8)) * 5 + 2)
    y = T.layer_norm(x).data
    assert np.abs(y.mean(-1)).max() < 1e-6 and np.abs(y.var(-1) - 1).max() < 1e-4
    w, b = Parameter(rng.standard_normal(8)), Parameter(rng.standard_normal(8))
    r = rng.standard_normal((3, 4, 8))
    assert T.grad_check(lambda: T.sum(T.mul(T.layer_norm(x, w, b), Tensor(r))), [x, w, b]) < 1e-6


def test_layer_norm_bias_only_does_not_corrupt_backward():
    rng = np.random.default_rng(7)
    x, b = Parameter(rng.standard_normal((2, 6))), Parameter(rng.standard_normal(6))
    r = rng.standard_normal((2, 6))
    assert T.grad_check(lambda: T.sum(T.mul(T.layer_norm(x, None, b), Tensor(r))), [x, b]) < 1e-6


def test_cross_entropy_value_and_gradient():
    rng = np.random.default_rng(8)
    logits = Parameter(rng.standard_normal((4, 5)))
    labels = np.array([0, 3, 1, 4])
    z = logits.data
    ref = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(4), labels])
    assert abs(T.cross_entropy(logits, labels).item() - ref) < 1e-12
    assert T.grad_check(lambda: T.cross_entropy(logits, labels), [logits]) < 1e-8


def test_shape_ops_gradients():
    rng = np.random.default_rng(9)
    x = Parameter(rng.standard_normal((2, 3, 4)))
    r = rng.standard_normal((4, 2, 3))
    f = lambda: T.sum(T.mul(T.permute(T.reshape(T.transpose(x), (2, 4, 3)), (1, 0, 2)), Tensor(r)))  # noqa
    assert T.grad_check(f, [x]) < 1e-8
    idx = (np.array([0, 1, 1]), np.array([2, 0, 2]))
    assert T.grad_check(lambda: T.sum(T.mul(T.getitem(x, idx), T.getitem(x, idx))), [x]) < 1e-8
    v = Parameter(rng.standard_normal((1, 4)))
    assert T.grad_check(lambda: T.sum(T.mul(T.broadcast_to(v, (3, 4)), Tensor(r.reshape(-1)[:12].reshape(3, 4)))), [v]) < 1e-8
    assert T.grad_check(lambda: T.sum(T.mean(T.mul(x, x), axis=(0, 2))), [x]) < 1e-8


# -------------------------------------------------------------- backward

def test_backward_trivial_cases():
    w = Parameter(np.zeros(3))
    T.backward(T.sum(T.sigmoid(w)))
    assert np.allclose(w.grad, 0.25)
    W = Parameter(np.ones((2, 3)))
    x = np.array([1.0, 2.0, 3.0])
    T.backward(T.sum(T.matmul(W, Tensor(x[:, None]))))
    assert np.array_equal(W.grad, np.broadcast_to(x, (2, 3)))


def test_backward_accumulates_and_rejects_non_scalar():
    w = Parameter(np.array([1.0, 2.0]))
    T.backward(T.sum(T.mul(w, w)))
    T.backward(T.sum(T.mul(w, w)))
    assert np.array_equal(w.grad, 4 * w.data)
    with pytest.raises(ContractError):
        T.backward(T.mul(w, w))


def test_shared_parameter_accumulates_within_graph():
    w = Parameter(np.array([3.0]))
    T.backward(T.sum(T.add(T.mul(w, 2.0), T.mul(w, w))))
    assert w.grad[0] == 2.0 + 6.0


def test_no_grad_records_nothing():
    w = Parameter(np.ones(2))
    with T.no_grad():
        y = T.mul(w, w)
    assert not y.requires_grad and y._parents == ()


# -------------------------------------------------------------- grad_check

def test_grad_check_quadratic_form():
    rng = np.random.default_rng(10)
    A = rng.standard_normal((4, 4))
    x = Parameter(rng.standard_normal((4, 1)))
    f = lambda: T.sum(T.matmul(T.transpose(x), T.matmul(Tensor(A), x)))  # noqa: E731
    assert T.grad_check(f, [x]) < 1e-8


def test_grad_check_zero_parameters():
    x = Parameter(np.zeros((2, 2)))
    assert T.grad_check(lambda: T.sum(T.mul(x, x)), [x]) < 1e-8


def test_grad_check_detects_wrong_backward():
    x = Parameter(np.array([0.3, -0.2]))

    def bad_square(t):
        return T._record(t.data * t.data, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert T.grad_check(lambda: T.sum(bad_square(x)), [x]) > 0.1


def test_grad_check_rejects_nondeterministic_f():
    x = Parameter(np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.sum(T.mul(x, float(rng.random()))), [x])
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.sum(x), [x], epsilon=0)


def test_replayed_subgraph_equals_fresh_forward():
    from vittm.data import SyntheticDataset, SyntheticTaskSpec
    from vittm.model import build_model
    from vittm.config import build_preset

    data = SyntheticDataset(SyntheticTaskSpec(), 2)
    for head in ("linear", "cross", "summary"):
        model = build_model(build_preset("vittm-micro", head_kind=head, fusion_process="add_erase",
                                         fusion_memory="add_erase"))
        f = lambda: T.cross_entropy(model(data.images), data.labels)  # noqa: E731
        loss = f()
        order = T._topo_order(loss)
        for p in model.parameters()[::7]:
            nodes = T._descendants(order, p)
            assert all(n._replay is not None for n in nodes)
            p.data.reshape(-1)[0] += 1e-3
            with T.no_grad():
                for n in nodes:
                    fn, args, kwargs = n._replay
                    n.data = fn(*args, **kwargs).data
                fresh = f().item()
            assert loss.item() == fresh
            p.data.reshape(-1)[0] -= 1e-3
            with T.no_grad():
                for n in nodes:
                    fn, args, kwargs = n._replay
                    n.data = fn(*args, **kwargs).data


# ---------------------------------------------------------- serialization

@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_tensor_round_trip(dtype):
    t = Tensor(np.random.default_rng(11).standard_normal((3, 1, 4)), dtype=dtype)
    back = T.tensor_from_bytes(T.tensor_to_bytes(t))
    assert back.dtype == t.dtype and np.array_equal(back.data, t.data)


def test_tensor_header_layout():
    raw = T.tensor_to_bytes(Tensor(np.array([[1.0, 2.0, 3.0]]), dtype="f32"))
    assert raw[:4] == b"VTTM" and raw[4] == 0 and raw[5] == 2
    assert np.frombuffer(raw[6:22], "<u8").tolist() == [1, 3]
    assert np.frombuffer(raw[22:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_tensor_read_errors():
    raw = T.tensor_to_bytes(Tensor(np.ones((2, 2))))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(raw[:-1]))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(raw[:4] + b"\x07" + raw[5:]))
