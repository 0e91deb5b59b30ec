"""
张量核心：有限差分梯度校验、广播、收集/回写、磁带与精度
"""
import numpy as np
import pytest

from core import functional as F
from core.errors import ContractError, DimensionError, FormatError, SelectionIndexError
from core.filter_attention import random_select
from core.gradcheck import gradcheck, random_tensor, relative_error
from core.serialization import decode_tensor, encode_tensor, load_tensor, save_tensor
from core.tensor import (
    Tensor, backward, current_tape, default_dtype, elementwise, gather, gather_scatter, gelu,
    get_default_dtype, matmul, no_grad, relu6, scatter, sigmoid, softmax, take_rows,
)


def _weighted_sum(out, weights):
    return (out * Tensor(weights)).sum()


def _shape(rng, rank, low=1, high=4):
    return tuple(int(v) for v in rng.integers(low, high + 1, size=rank))


def _case_binary(rng, op):
    shape = _shape(rng, 3)
    other = tuple(1 if rng.random() < 0.4 else d for d in shape)
    a = random_tensor(rng, shape, name='a')
    b = Tensor(rng.uniform(0.5, 2.0, other) * rng.choice([-1, 1], other), requires_grad=True, name='b')
    w = rng.standard_normal(shape)
    return (lambda: _weighted_sum(op(a, b), w)), [a, b]


def _case_unary(rng, op, positive=False):
    shape = _shape(rng, 2)
    data = rng.uniform(0.3, 2.0, shape) if positive else rng.standard_normal(shape) * 2.0
    x = Tensor(data, requires_grad=True, name='x')
    w = rng.standard_normal(shape)
    return (lambda: _weighted_sum(op(x), w)), [x]


def _case_matmul(rng):
    b, m, k, n = _shape(rng, 4)
    a = random_tensor(rng, (b, m, k))
    w = random_tensor(rng, (k, n))
    g = rng.standard_normal((b, m, n))
    return (lambda: _weighted_sum(matmul(a, w), g)), [a, w]


def _case_softmax(rng):
    shape = _shape(rng, 3, low=2)
    axis = int(rng.integers(-3, 3))
    x = random_tensor(rng, shape)
    w = rng.standard_normal(shape)
    return (lambda: _weighted_sum(softmax(x, axis), w)), [x]


def _case_shape_ops(rng):
    b, c, h = _shape(rng, 3, low=2)
    x = random_tensor(rng, (b, c, h))
    w = rng.standard_normal((h, b * c))

    def fn():
        y = x.permute(2, 0, 1).reshape(h, b * c)
        return _weighted_sum(y, w) + x[:, 1:, :].mean() + x.sum(axis=1).mean()
    return fn, [x]


def _case_gather_scatter(rng):
    b, c = _shape(rng, 2)
    h, w = _shape(rng, 2, low=2)
    k = int(rng.integers(1, h * w + 1))
    sel = random_select((b, h, w), k, rng)
    x = random_tensor(rng, (b, c, h, w), name='x')
    tokens = random_tensor(rng, (b, k, c), name='tokens')
    table = random_tensor(rng, (h * w, c), name='table')
    mode = 'add' if rng.random() < 0.5 else 'replace'
    g_out = rng.standard_normal((b, c, h, w))
    g_tok = rng.standard_normal((b, k, c))

    def fn():
        gathered = gather(x, sel) + take_rows(table, sel)
        return _weighted_sum(scatter(x, tokens * gathered, sel, mode), g_out) + _weighted_sum(gathered, g_tok)
    return fn, [x, tokens, table]


def _case_conv(rng):
    groups = int(rng.choice([1, 2]))
    cin, cout = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x = random_tensor(rng, (int(rng.integers(1, 3)), cin, 5, 5), name='x')
    weight = random_tensor(rng, (cout, cin // groups, k, k), scale=0.5, name='w')
    bias = random_tensor(rng, (cout,), name='bias')
    ho = F.conv_output_size(5, k, stride, k // 2)
    g = rng.standard_normal((x.shape[0], cout, ho, ho))
    return (lambda: _weighted_sum(F.conv2d(x, weight, bias, stride, k // 2, groups), g)), [x, weight, bias]


def _case_depthwise(rng):
    c = int(rng.integers(2, 5))
    x = random_tensor(rng, (1, c, 4, 4))
    weight = random_tensor(rng, (c, 1, 3, 3), scale=0.5)
    g = rng.standard_normal((1, c, 2, 2))
    return (lambda: _weighted_sum(F.conv2d(x, weight, None, 2, 1, c), g)), [x, weight]


def _case_pool_upsample(rng):
    c = int(rng.integers(1, 4))
    x = random_tensor(rng, (2, c, 4, 4))
    g = rng.standard_normal((2, c, 4, 4))
    return (lambda: _weighted_sum(F.upsample_nearest(F.avg_pool2d(x, 2), 2), g)), [x]


def _case_norms(rng):
    c = int(rng.integers(2, 5))
    x = random_tensor(rng, (2, c, 3, 3))
    tokens = random_tensor(rng, (2, 3, c))
    gamma, beta = random_tensor(rng, (c,)), random_tensor(rng, (c,))
    g1, g2 = rng.standard_normal((2, c, 3, 3)), rng.standard_normal((2, 3, c))

    def fn():
        return (_weighted_sum(F.instance_norm(x, gamma, beta), g1)
                + _weighted_sum(F.layer_norm(tokens, gamma, beta), g2))
    return fn, [x, tokens, gamma, beta]


def _case_cross_entropy(rng):
    b, n = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = random_tensor(rng, (b, n))
    labels = rng.integers(0, n, size=b)
    weight, bias = random_tensor(rng, (n, n)), random_tensor(rng, (n,))
    return (lambda: F.cross_entropy(F.linear(logits, weight, bias), labels)), [logits, weight, bias]


CASES = {
    'add': lambda rng: _case_binary(rng, lambda a, b: a + b),
    'sub': lambda rng: _case_binary(rng, lambda a, b: a - b),
    'mul': lambda rng: _case_binary(rng, lambda a, b: a * b),
    'div': lambda rng: _case_binary(rng, lambda a, b: a / b),
    'sigmoid': lambda rng: _case_unary(rng, sigmoid),
    'gelu': lambda rng: _case_unary(rng, gelu),
    'relu6': lambda rng: _case_unary(rng, relu6),
    'exp': lambda rng: _case_unary(rng, lambda x: elementwise('exp', x)),
    'log': lambda rng: _case_unary(rng, lambda x: elementwise('log', x), positive=True),
    'matmul': _case_matmul,
    'softmax': _case_softmax,
    'shape_ops': _case_shape_ops,
    'gather_scatter': _case_gather_scatter,
    'conv2d': _case_conv,
    'depthwise': _case_depthwise,
    'pool_upsample': _case_pool_upsample,
    'norms': _case_norms,
    'cross_entropy': _case_cross_entropy,
}


@pytest.mark.parametrize('seed', range(6))
@pytest.mark.parametrize('op', sorted(CASES))
def test_gradcheck_random_shapes(op, seed):
    rng = np.random.default_rng(seed * 101 + len(op))
    fn, tensors = CASES[op](rng)
    passed, errors = gradcheck(fn, tensors)
    assert passed, f"{op}: {errors}"


def test_relative_error_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.ones(3), np.ones(3)) == 0.0


def test_broadcast_only_expands_singleton_dims():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    out = Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3)))
    assert out.shape == (2, 3)


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_identity_and_hand_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_softmax_known_values():
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_is_stable_for_large_inputs():
    out = softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    y = sigmoid(x)
    assert y.data[0] == 0.5
    backward(y.sum())
    assert x.grad[0] == 0.25


def test_backward_of_sum_of_squares():
    w = Tensor(np.array([[1.5, -2.0], [0.25, 3.0]]), requires_grad=True)
    backward((w * w).sum())
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_softmax_axis_out_of_range():
    with pytest.raises(ContractError):
        softmax(Tensor(np.ones((2, 3))), axis=2)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_leaf_gradients_accumulate_until_cleared():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_clears_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = (x * x).sum()
    assert len(current_tape()) > 0
    backward(loss)
    assert len(current_tape()) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = sigmoid(x * 2.0)
    assert not y.requires_grad
    assert len(current_tape()) == 0


def test_default_dtype_context():
    assert get_default_dtype() == np.float64
    with default_dtype('float32'):
        assert Tensor([1, 2]).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(ContractError):
        with default_dtype('int32'):
            pass


def test_gather_returns_tokens_in_index_order():
    x = Tensor(np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2))
    idx = np.array([[0, 3], [1, 2]])
    tokens = gather(x, idx)
    assert tokens.shape == (2, 2, 3)
    np.testing.assert_array_equal(tokens.data[0, 1], x.data[0, :, 1, 1])
    np.testing.assert_array_equal(tokens.data[1, 0], x.data[1, :, 0, 1])


def test_scatter_gather_round_trip_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    sel = random_select((2, 4, 4), 5, rng)
    np.testing.assert_array_equal(scatter(x, gather(x, sel), sel).data, x.data)
    tokens = Tensor(rng.standard_normal((2, 5, 3)))
    np.testing.assert_array_equal(gather(scatter(x, tokens, sel), sel).data, tokens.data)


def test_scatter_add_mode_accumulates():
    x = Tensor(np.ones((1, 1, 2, 2)))
    out = gather_scatter(x, np.array([[2]]), mode='scatter', tokens=Tensor(np.full((1, 1, 1), 3.0)),
                         scatter_mode='add')
    np.testing.assert_array_equal(out.data[0, 0], [[1.0, 1.0], [4.0, 1.0]])


def test_gather_rejects_out_of_range_index():
    x = Tensor(np.zeros((2, 1, 2, 2)))
    with pytest.raises(SelectionIndexError) as info:
        gather(x, np.array([[0, 1], [2, 4]]))
    assert info.value.sample == 1
    assert info.value.value == 4


def test_gather_rejects_duplicate_index():
    x = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(SelectionIndexError) as info:
        gather(x, np.array([[5, 2, 5]]))
    assert info.value.value == 5


def test_scatter_token_shape_must_match():
    x = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(DimensionError):
        scatter(x, Tensor(np.zeros((1, 2, 3))), np.array([[0, 1]]))


def test_gather_scatter_unknown_mode():
    with pytest.raises(ContractError):
        gather_scatter(Tensor(np.zeros((1, 1, 2, 2))), np.array([[0]]), mode='shuffle')


def test_non_selected_pixel_has_zero_gather_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    idx = np.array([[1, 4, 8]])
    backward((gather(x, idx) * Tensor(rng.standard_normal((1, 3, 2)))).sum())
    grad = x.grad.reshape(1, 2, 9)
    unselected = [p for p in range(9) if p not in idx[0]]
    np.testing.assert_array_equal(grad[:, :, unselected], 0.0)
    assert np.all(grad[:, :, idx[0]] != 0.0)


@pytest.mark.parametrize('dtype', ['float32', 'float64'])
def test_tensor_serialization_bit_identical(dtype, tmp_path):
    array = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    blob = encode_tensor(array)
    assert blob[:4] == b'FTSR'
    decoded, end = decode_tensor(blob)
    assert end == len(blob)
    assert decoded.dtype == array.dtype
    np.testing.assert_array_equal(decoded, array)

    path = tmp_path / 'x.ftsr'
    save_tensor(path, array)
    np.testing.assert_array_equal(load_tensor(path), array)


def test_tensor_serialization_rejects_bad_input():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError):
        decode_tensor(b'XXXX' + blob[4:])
    with pytest.raises(FormatError):
        decode_tensor(blob[:-3])
    with pytest.raises(FormatError):
        decode_tensor(blob[:6])
    with pytest.raises(FormatError):
        encode_tensor(np.ones(3, dtype=np.int32))
