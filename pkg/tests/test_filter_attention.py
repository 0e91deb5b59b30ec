"""
FilterAttention：选择规则、局部性、稠密等价、DropoutViT 与 MAC 计数
"""
import numpy as np
import pytest

from core.errors import ConfigError, DimensionError
from core.filter_attention import (
    FilterAttentionBlock, MaskCollector, PooledGlobalAttention, compute_importance, default_k,
    filter_attention_block, flop_count, pooled_global_attention, random_select, top_k_select,
)
from core.gradcheck import gradcheck, random_tensor
from core.layers import TransformerEncoder
from core.tensor import Tensor, backward


def _reference_top_k(flat, k):
    """逐样本稳定排序：分数降序，分数相同时索引升序"""
    out = []
    for row in flat:
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
        out.append(sorted(order))
    return np.array(out)


def test_top_k_matches_sorting_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        h, w = (int(v) for v in rng.integers(1, 7, size=2))
        k = int(rng.integers(1, h * w + 1))
        imp = rng.random((2, 1, h, w))
        if trial % 3 == 0:
            imp = np.round(imp * 4) / 4
        sel = top_k_select(imp, k)
        np.testing.assert_array_equal(sel.positions, _reference_top_k(imp.reshape(2, -1), k))


def test_top_k_constant_map_breaks_ties_by_index():
    sel = top_k_select(np.full((1, 1, 3, 3), 0.5), 3)
    np.testing.assert_array_equal(sel.positions, [[0, 1, 2]])


def test_top_k_selects_maximum_scores():
    rng = np.random.default_rng(1)
    imp = rng.random((4, 1, 5, 5))
    sel = top_k_select(imp, 6)
    flat = imp.reshape(4, -1)
    mask = sel.to_mask().reshape(4, -1)
    for b in range(4):
        assert flat[b][mask[b]].min() >= flat[b][~mask[b]].max()
        assert len(set(sel.positions[b])) == 6


@pytest.mark.parametrize('k', [0, 10])
def test_k_out_of_range(k):
    with pytest.raises(ConfigError):
        top_k_select(np.zeros((1, 1, 3, 3)), k)


def test_default_k_is_quarter_rounded_up():
    assert default_k(8, 8) == 16
    assert default_k(3, 3) == 3
    assert default_k(1, 1) == 1


@pytest.mark.parametrize('sampling', ['uniform', 'gaussian'])
def test_random_select_is_distinct_and_seeded(sampling):
    a = random_select((3, 4, 4), 5, 7, sampling)
    b = random_select((3, 4, 4), 5, 7, sampling)
    np.testing.assert_array_equal(a.positions, b.positions)
    for row in a.positions:
        assert len(set(row)) == 5
        assert list(row) == sorted(row)
        assert row.min() >= 0 and row.max() < 16


def test_uniform_sampling_inclusion_frequency():
    sel = random_select((10000, 4, 4), 4, 21)
    freq = np.bincount(sel.positions.ravel(), minlength=16) / 10000
    np.testing.assert_allclose(freq, 0.25, atol=0.02)


@pytest.mark.parametrize('sampling', ['uniform', 'gaussian'])
def test_full_budget_selects_every_position(sampling):
    for seed in (0, 99):
        sel = random_select((2, 3, 3), 9, seed, sampling)
        np.testing.assert_array_equal(sel.positions, np.tile(np.arange(9), (2, 1)))


def test_gaussian_sampling_prefers_center():
    sel = random_select((2000, 9, 9), 4, 0, 'gaussian')
    counts = np.bincount(sel.positions.ravel(), minlength=81)
    assert counts[40] > counts[0] * 3


def test_importance_is_in_unit_interval():
    block = FilterAttentionBlock(4, 5, 5, rng=np.random.default_rng(0))
    imp = compute_importance(Tensor(np.random.default_rng(1).standard_normal((2, 4, 5, 5)) * 10), block.scorer)
    assert imp.shape == (2, 1, 5, 5)
    assert np.all((imp.data > 0) & (imp.data < 1))


def test_block_rejects_wrong_feature_map():
    block = FilterAttentionBlock(4, 4, 4, rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        block(Tensor(np.zeros((1, 4, 5, 5))))
    with pytest.raises(DimensionError):
        block(Tensor(np.zeros((1, 2, 4, 4))))


def test_block_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        FilterAttentionBlock(4, 4, 4, variant='shuffle')


def _per_pixel_scorer(block, rng):
    """只保留 3x3 打分卷积的中心抽头，使重要性只依赖本像素"""
    weight = np.zeros_like(block.scorer.weight.data)
    weight[0, :, 1, 1] = rng.standard_normal(block.channels)
    block.scorer.weight.data = weight


def test_non_selected_pixels_are_independent():
    rng = np.random.default_rng(4)
    c, h, w, k = 4, 5, 5, 6
    block = FilterAttentionBlock(c, h, w, k=k, depth=1, heads=2, rng=rng)
    _per_pixel_scorer(block, rng)
    block.eval()
    x = rng.standard_normal((1, c, h, w))

    collector = MaskCollector()
    base = block(Tensor(x), collector=collector).data
    selected = set(collector.records[0].selection.positions[0])

    for p in range(h * w):
        if p in selected:
            continue
        i, j = divmod(p, w)
        perturbed = x.copy()
        perturbed[0, :, i, j] += 1e-4
        probe = MaskCollector()
        out = block(Tensor(perturbed), collector=probe).data
        np.testing.assert_array_equal(probe.records[0].selection.positions, collector.records[0].selection.positions)
        changed = np.any(out != base, axis=1)[0]
        assert changed[i, j]
        changed[i, j] = False
        assert not changed.any()


def test_full_budget_matches_dense_encoder():
    rng = np.random.default_rng(5)
    for _ in range(20):
        c = int(rng.choice([2, 4, 6, 8]))
        heads = int(rng.choice([d for d in (1, 2) if c % d == 0]))
        hw = int(rng.integers(2, 9))
        batch = int(rng.integers(1, 3))
        block = FilterAttentionBlock(c, hw, hw, k=hw * hw, depth=2, heads=heads, rng=rng)
        block.scorer.weight.data = np.zeros_like(block.scorer.weight.data)
        block.scorer.bias.data = np.full(1, 20.0)
        block.pos.data = np.zeros_like(block.pos.data)

        dense = TransformerEncoder(c, 2, heads)
        dense.load_state_dict(block.encoder.state_dict())

        x = rng.standard_normal((batch, c, hw, hw))
        out = block(Tensor(x)).data
        tokens = x.reshape(batch, c, hw * hw).transpose(0, 2, 1)
        expected = dense(Tensor(tokens)).data.transpose(0, 2, 1).reshape(batch, c, hw, hw)
        np.testing.assert_allclose(out, expected, atol=1e-6)


def test_non_selected_output_is_masked_input():
    rng = np.random.default_rng(6)
    block = FilterAttentionBlock(4, 4, 4, k=4, depth=1, heads=2, rng=rng)
    x = rng.standard_normal((2, 4, 4, 4))
    collector = MaskCollector()
    out = block(Tensor(x), collector=collector).data
    record = collector.records[0]
    mask = record.selection.to_mask()[:, None]
    expected = x * record.importance
    np.testing.assert_allclose(np.where(mask, 0.0, out), np.where(mask, 0.0, expected), atol=1e-15)


def test_scorer_receives_gradient_through_mask():
    rng = np.random.default_rng(7)
    block = FilterAttentionBlock(4, 4, 4, k=4, depth=1, heads=2, rng=rng)
    backward(block(Tensor(rng.standard_normal((2, 4, 4, 4)))).sum())
    assert block.scorer.weight.grad is not None
    assert np.abs(block.scorer.weight.grad).sum() > 0
    assert np.abs(block.pos.grad).sum() > 0


def test_dropout_variant_samples_in_train_and_tops_in_eval():
    rng = np.random.default_rng(8)
    block = FilterAttentionBlock(4, 6, 6, k=9, depth=1, heads=2, variant='dropout', rng=rng)
    block.set_selection_rng(np.random.default_rng(0))
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))

    first, second = MaskCollector(), MaskCollector()
    block.train()
    block(x, collector=first)
    block(x, collector=second)
    assert not np.array_equal(first.records[0].selection.positions, second.records[0].selection.positions)

    block.eval()
    evaluated = MaskCollector()
    block(x, collector=evaluated)
    record = evaluated.records[0]
    np.testing.assert_array_equal(record.selection.positions, top_k_select(record.importance, 9).positions)


def test_dropout_random_eval_is_reproducible():
    rng = np.random.default_rng(9)
    block = FilterAttentionBlock(4, 4, 4, k=4, depth=1, heads=2, variant='dropout',
                                 eval_selection='random', eval_seed=3, rng=rng)
    block.eval()
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    np.testing.assert_array_equal(block(x).data, block(x).data)


def test_residual_scatter_adds_to_selected_positions():
    rng = np.random.default_rng(10)
    block = FilterAttentionBlock(4, 4, 4, k=16, depth=0, heads=2, residual_scatter=True, rng=rng)
    block.pos.data = np.zeros_like(block.pos.data)
    x = rng.standard_normal((1, 4, 4, 4))
    collector = MaskCollector()
    out = block(Tensor(x), collector=collector).data
    np.testing.assert_allclose(out, 2 * x * collector.records[0].importance, atol=1e-12)
    np.testing.assert_array_equal(filter_attention_block(Tensor(x), block).data, out)


def test_pooled_attention_token_count_and_shape():
    rng = np.random.default_rng(11)
    block = PooledGlobalAttention(4, window=2, depth=1, heads=2, rng=rng)
    out = block(Tensor(rng.standard_normal((2, 4, 8, 8))))
    assert out.shape == (2, 4, 8, 8)
    assert block.last_token_count == 16
    np.testing.assert_array_equal(pooled_global_attention(Tensor(np.ones((1, 4, 8, 8))), block).data,
                                  block(Tensor(np.ones((1, 4, 8, 8)))).data)
    with pytest.raises(ConfigError):
        block(Tensor(np.zeros((1, 4, 5, 5))))


def test_pooled_attention_without_encoder_adds_upsampled_pool():
    block = PooledGlobalAttention(4, window=2, depth=0, heads=2)
    x = np.random.default_rng(12).standard_normal((2, 4, 8, 8))
    pooled = x.reshape(2, 4, 4, 2, 4, 2).mean(axis=(3, 5))
    expected = x + pooled.repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_allclose(block(Tensor(x)).data, expected, atol=1e-12)
    np.testing.assert_array_equal(block(Tensor(np.full((1, 4, 4, 4), 1.5))).data, 3.0)


def test_flop_count_known_values():
    assert flop_count('attention_scores', k=4, channels=8) == 128
    assert flop_count('conv', in_ch=8, out_ch=16, kernel=1, height=14, width=14) == 25088


def test_flop_ratio_is_quadratic_in_budget():
    c, h, w = 32, 16, 16
    for k in (16, 64, 128):
        ratio = flop_count('attention', k=k, channels=c) / flop_count('attention', tokens=h * w, channels=c)
        assert ratio == pytest.approx((k / (h * w)) ** 2)
    assert flop_count('attention', k=64, channels=c) * 16 == flop_count('attention', tokens=256, channels=c)


def test_filter_attention_cheaper_than_dense():
    dims = dict(channels=32, height=16, width=16, depth=2, mlp_ratio=2)
    assert flop_count('filter_attention', k=64, **dims) < flop_count('dense_attention', **dims)
    assert flop_count('pooled_attention', window=2, **dims) < flop_count('dense_attention', **dims)
    with pytest.raises(ConfigError):
        flop_count('unknown')


def test_saturated_scorer_gives_unit_importance():
    block = FilterAttentionBlock(3, 4, 4, rng=np.random.default_rng(12))
    block.scorer.weight.data = np.zeros_like(block.scorer.weight.data)
    block.scorer.bias.data = np.full(1, 20.0)
    imp = compute_importance(Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4))), block.scorer)
    np.testing.assert_allclose(imp.data, 1.0, atol=1e-8)


def test_importance_bias_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    block = FilterAttentionBlock(3, 5, 5, rng=rng)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    passed, errors = gradcheck(lambda: compute_importance(x, block.scorer).sum(),
                               [block.scorer.bias, block.scorer.weight])
    assert passed, errors


def test_block_gradient_matches_finite_differences():
    rng = np.random.default_rng(14)
    block = FilterAttentionBlock(4, 3, 3, k=4, depth=1, heads=2, rng=rng)
    x = random_tensor(rng, (2, 4, 3, 3), name='x')
    params = [p for _, p in block.named_parameters()]
    passed, errors = gradcheck(lambda: block(x).sum(), [x] + params)
    assert passed, errors
