"""
基础层：参数登记、状态加载、注意力与倒残差块
"""
import numpy as np
import pytest

from core import functional as F
from core.errors import ConfigError, ContractError, DimensionError
from core.layers import (
    Conv2d, InvertedResidual, Linear, MultiHeadSelfAttention, TransformerEncoder, param_count,
)
from core.tensor import Tensor


def test_inverted_residual_param_count():
    block = InvertedResidual(16, 16, expand_ratio=6, stride=1, rng=np.random.default_rng(0))
    assert param_count(block) == 4352
    assert block.use_residual


def test_inverted_residual_stride_two_drops_residual():
    block = InvertedResidual(8, 16, expand_ratio=2, stride=2, rng=np.random.default_rng(0))
    assert not block.use_residual
    out = block(Tensor(np.random.default_rng(1).standard_normal((2, 8, 8, 8))))
    assert out.shape == (2, 16, 4, 4)


def test_inverted_residual_channel_mismatch():
    block = InvertedResidual(8, 8, rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        block(Tensor(np.zeros((1, 4, 4, 4))))


def test_conv_groups_must_divide_channels():
    with pytest.raises(ConfigError):
        Conv2d(6, 4, 3, groups=4)


def test_attention_heads_must_divide_dim():
    with pytest.raises(ConfigError) as info:
        MultiHeadSelfAttention(6, 4)
    assert info.value.field == 'heads'


def test_attention_rejects_empty_token_set():
    attn = MultiHeadSelfAttention(4, 2, rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        attn(Tensor(np.zeros((1, 0, 4))))


def test_attention_rows_sum_to_one():
    attn = MultiHeadSelfAttention(8, 2, rng=np.random.default_rng(0))
    attn.record_attention = True
    attn(Tensor(np.random.default_rng(1).standard_normal((3, 5, 8))))
    assert attn.last_attention.shape == (3, 2, 5, 5)
    np.testing.assert_allclose(attn.last_attention.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_is_permutation_equivariant():
    rng = np.random.default_rng(2)
    encoder = TransformerEncoder(8, 2, 2, rng=rng)
    x = rng.standard_normal((1, 6, 8))
    perm = rng.permutation(6)
    out = encoder(Tensor(x)).data
    out_perm = encoder(Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)


def test_zero_depth_encoder_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(TransformerEncoder(4, 0, 2)(x).data, x.data)


def test_parameter_names_are_stable():
    encoder = TransformerEncoder(4, 2, 2, rng=np.random.default_rng(0))
    names = [n for n, _ in encoder.named_parameters()]
    assert names[0] == 'layers.0.norm1.weight'
    assert 'layers.1.attn.qkv.weight' in names
    assert names == [n for n, _ in TransformerEncoder(4, 2, 2).named_parameters()]


def test_norm_parameters_skip_weight_decay():
    encoder = TransformerEncoder(4, 1, 2, rng=np.random.default_rng(0))
    flags = {n: p.no_decay for n, p in encoder.named_parameters()}
    assert flags['layers.0.norm1.weight'] and flags['layers.0.norm2.bias']
    assert not flags['layers.0.fc1.weight']


def test_load_state_dict_round_trip():
    src = Linear(3, 2, rng=np.random.default_rng(0))
    dst = Linear(3, 2, rng=np.random.default_rng(1))
    dst.load_state_dict(src.state_dict())
    x = Tensor(np.ones((1, 3)))
    np.testing.assert_array_equal(dst(x).data, src(x).data)


def test_load_state_dict_rejects_mismatches():
    layer = Linear(3, 2)
    with pytest.raises(ConfigError):
        layer.load_state_dict({'weight': np.zeros((3, 2))})
    with pytest.raises(DimensionError):
        layer.load_state_dict({'weight': np.zeros((2, 3)), 'bias': np.zeros(2)})
    layer.load_state_dict({'bias': np.ones(2)}, strict=False)
    np.testing.assert_array_equal(layer.bias.data, 1.0)


def test_train_eval_propagates_to_children():
    encoder = TransformerEncoder(4, 2, 2)
    encoder.eval()
    assert all(not m.training for _, m in encoder.named_modules())
    encoder.train()
    assert all(m.training for _, m in encoder.named_modules())


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    attn = MultiHeadSelfAttention(4, 1, rng=rng)
    attn.qkv.bias.data = rng.standard_normal(12) * 0.1
    x = rng.standard_normal((1, 3, 4))
    w, b = attn.qkv.weight.data, attn.qkv.bias.data

    expected = np.zeros((3, 4))
    for i in range(3):
        q = x[0, i] @ w[:, 0:4] + b[0:4]
        scores = np.array([q @ (x[0, j] @ w[:, 4:8] + b[4:8]) / 2.0 for j in range(3)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        for j in range(3):
            expected[i] += weights[j] * (x[0, j] @ w[:, 8:12] + b[8:12])
    expected = expected @ attn.proj.weight.data + attn.proj.bias.data

    np.testing.assert_allclose(attn(Tensor(x)).data[0], expected, atol=1e-6)


def test_single_token_attention_weight_is_one():
    rng = np.random.default_rng(4)
    attn = MultiHeadSelfAttention(4, 2, rng=rng)
    attn.record_attention = True
    x = rng.standard_normal((2, 1, 4))
    out = attn(Tensor(x)).data
    np.testing.assert_array_equal(attn.last_attention, 1.0)
    v = (x @ attn.qkv.weight.data + attn.qkv.bias.data)[..., 8:12]
    np.testing.assert_allclose(out, v @ attn.proj.weight.data + attn.proj.bias.data, atol=1e-12)


def test_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(5)
    attn = MultiHeadSelfAttention(8, 2, rng=rng)
    token = rng.standard_normal(8)
    out = attn(Tensor(np.stack([token, token])[None])).data
    np.testing.assert_allclose(out[0, 0], out[0, 1], atol=1e-12)


def test_depth_one_encoder_is_attention_then_mlp():
    rng = np.random.default_rng(6)
    encoder = TransformerEncoder(8, 1, 2, rng=rng)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    layer = encoder.layers[0]
    expected = layer.mlp_block(layer.attention_block(x)).data
    np.testing.assert_array_equal(encoder(x).data, expected)


def test_conv_identity_and_box_kernels():
    x = np.random.default_rng(7).standard_normal((2, 3, 5, 5))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(eye)).data, x)
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=0)
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_avg_pool_known_value():
    out = F.avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    np.testing.assert_array_equal(out.data, [[[[2.5]]]])


def test_layer_norm_of_constant_is_zero():
    out = F.layer_norm(Tensor(np.full((2, 6), 3.7)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_linear_identity():
    layer = Linear(3, 3)
    layer.weight.data = np.eye(3)
    x = np.random.default_rng(8).standard_normal((4, 3))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_inverted_residual_with_zero_projection_is_identity():
    block = InvertedResidual(4, 4, rng=np.random.default_rng(9))
    block.project.conv.weight.data = np.zeros_like(block.project.conv.weight.data)
    x = np.random.default_rng(10).standard_normal((2, 4, 6, 6))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)
