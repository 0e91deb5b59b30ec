"""
FilterAttention 模块
卷积打分得到重要性图 → 每个样本选 top-K 位置 → 特征图乘以重要性图 →
收集被选像素并加位置编码 → Transformer 编码 → 按原位置写回

同时包含：
- DropoutViT 变体：训练时用均匀随机采样代替 top-K（评估时默认切回 top-K）
- 池化全局自注意力：平均池化缩减 token 数后做全局注意力，再上采样残差相加
- 解析 MAC 计数
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from core import functional as F
from core.errors import ConfigError, DimensionError
from core.layers import Conv2d, Module, Parameter, TransformerEncoder
from core.tensor import Tensor, gather, scatter, sigmoid, take_rows

logger = logging.getLogger(__name__)

VARIANTS = ('filter', 'dropout')
EVAL_SELECTIONS = ('topk', 'random')
SAMPLINGS = ('uniform', 'gaussian')


@dataclass(frozen=True)
class SelectionIndex:
    """
    每个样本 K 个展平空间位置 idx = i*W + j，样本内升序且不重复

    Attributes:
        positions: (B, K) int64
        height, width: 被选择特征图的空间尺寸
    """
    positions: np.ndarray
    height: int
    width: int

    @property
    def k(self):
        return self.positions.shape[1]

    @property
    def batch(self):
        return self.positions.shape[0]

    def to_mask(self):
        """(B, H, W) 布尔掩码，被选位置为 True"""
        mask = np.zeros((self.batch, self.height * self.width), dtype=bool)
        np.put_along_axis(mask, self.positions, True, axis=1)
        return mask.reshape(self.batch, self.height, self.width)


def default_k(height, width):
    """默认选择预算 K = ceil(H*W/4)"""
    return math.ceil(height * width / 4)


def _check_k(k, positions):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= positions:
        raise ConfigError(f"K={k} 超出范围 [1, {positions}]", field='K')


def compute_importance(x, scorer):
    """
    重要性图 imp = sigmoid(Conv(x))

    Args:
        x: 特征图 (B, C, H, W)
        scorer: 输出通道为1的 Conv2d

    Returns:
        Tensor: (B, 1, H, W)，取值在 (0, 1)
    """
    if scorer.out_ch != 1:
        raise ConfigError(f"打分卷积输出通道必须为1，实际: {scorer.out_ch}", field='scorer')
    imp = sigmoid(scorer(x))
    if imp.shape[2:] != x.shape[2:]:
        raise DimensionError(f"重要性图尺寸 {imp.shape[2:]} 与特征图 {x.shape[2:]} 不一致")
    return imp


def top_k_select(imp, k):
    """
    每个样本选重要性最大的 K 个位置；分数相同时展平索引小者优先
    这是离散选择，不传梯度（梯度只经乘法掩码到达打分卷积）

    Args:
        imp: 重要性图 Tensor 或数组 (B, 1, H, W)
        k: 选择预算

    Returns:
        SelectionIndex
    """
    values = imp.data if isinstance(imp, Tensor) else np.asarray(imp)
    batch, height, width = values.shape[0], values.shape[-2], values.shape[-1]
    _check_k(k, height * width)
    flat = values.reshape(batch, -1)
    order = np.argsort(-flat, axis=1, kind='stable')[:, :k]
    return SelectionIndex(np.sort(order, axis=1).astype(np.int64), height, width)


def _gaussian_weights(height, width, sigma_ratio=0.25):
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    ci, cj = (height - 1) / 2, (width - 1) / 2
    sigma = sigma_ratio * max(height, width)
    w = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma ** 2))
    return w.reshape(-1)


def random_select(shape, k, rng=None, sampling='uniform'):
    """
    不放回随机采样 K 个位置，每个样本独立

    Args:
        shape: (B, H, W) 或 (B, 1, H, W)
        k: 选择预算
        rng: 随机种子或 np.random.Generator
        sampling: 'uniform' 均匀采样；'gaussian' 向中心加权的不放回采样

    Returns:
        SelectionIndex
    """
    batch, height, width = shape[0], shape[-2], shape[-1]
    positions = height * width
    _check_k(k, positions)
    if sampling not in SAMPLINGS:
        raise ConfigError(f"未知的采样方式: {sampling}，可选: {SAMPLINGS}", field='sampling')
    rng = np.random.default_rng(rng)
    keys = rng.random((batch, positions))
    if sampling == 'gaussian':
        # 加权不放回采样：按 log(u)/w 取最大的 K 个
        keys = np.log(np.maximum(keys, 1e-300)) / _gaussian_weights(height, width)
        order = np.argsort(-keys, axis=1, kind='stable')[:, :k]
    else:
        order = np.argsort(keys, axis=1, kind='stable')[:, :k]
    return SelectionIndex(np.sort(order, axis=1).astype(np.int64), height, width)


@dataclass
class MaskRecord:
    """一次前向中某个 FilterAttention 块的重要性图与选择结果"""
    stage: int
    name: str
    importance: np.ndarray
    selection: SelectionIndex


@dataclass
class MaskCollector:
    """调用方提供的收集器，前向时按网络顺序记录各块的掩码，不影响数值"""
    records: list = field(default_factory=list)

    def record(self, name, importance, selection):
        self.records.append(MaskRecord(len(self.records), name, np.array(importance, copy=True), selection))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class FilterAttentionBlock(Module):
    """
    FilterAttention 块

    Args:
        channels: 通道数 C（= Transformer model_dim）
        height, width: 服务的特征图尺寸（决定位置编码表行数 H*W）
        k: 选择预算
        depth, heads, mlp_ratio: 编码器结构
        variant: 'filter'（top-K）或 'dropout'（训练时随机采样）
        eval_selection: dropout 变体评估时的选择方式，'topk' 或 'random'（固定种子）
        eval_seed: eval_selection='random' 时使用的种子
        sampling: dropout 变体的采样方式
        residual_scatter: True 时写回改为残差相加（实验选项，默认替换）
    """

    def __init__(self, channels, height, width, k=None, depth=2, heads=2, mlp_ratio=2,
                 variant='filter', eval_selection='topk', eval_seed=0, sampling='uniform',
                 residual_scatter=False, rng=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"未知的选择变体: {variant}，可选: {VARIANTS}", field='variant')
        if eval_selection not in EVAL_SELECTIONS:
            raise ConfigError(f"未知的评估选择方式: {eval_selection}", field='eval_selection')
        if sampling not in SAMPLINGS:
            raise ConfigError(f"未知的采样方式: {sampling}", field='sampling')
        k = default_k(height, width) if k is None else k
        _check_k(k, height * width)
        rng = rng if rng is not None else np.random.default_rng()

        self.channels, self.height, self.width, self.k = channels, height, width, k
        self.variant, self.eval_selection, self.eval_seed = variant, eval_selection, eval_seed
        self.sampling, self.residual_scatter = sampling, residual_scatter
        self.scorer = Conv2d(channels, 1, 3, padding=1, bias=True, rng=rng)
        self.pos = Parameter(rng.uniform(-0.02, 0.02, size=(height * width, channels)), no_decay=True)
        self.encoder = TransformerEncoder(channels, depth, heads, mlp_ratio, rng=rng)
        self.selection_rng = np.random.default_rng()

    def set_selection_rng(self, rng):
        """dropout 变体的随机源，由所属执行上下文（模型）持有"""
        self.selection_rng = rng

    def select(self, imp):
        if self.variant == 'filter':
            return top_k_select(imp, self.k)
        if self.training:
            return random_select(imp.shape, self.k, self.selection_rng, self.sampling)
        if self.eval_selection == 'random':
            return random_select(imp.shape, self.k, np.random.default_rng(self.eval_seed), self.sampling)
        return top_k_select(imp, self.k)

    def forward(self, x, collector=None, name='filter_attention'):
        if x.shape[2:] != (self.height, self.width):
            raise DimensionError(
                f"特征图尺寸 {x.shape[2:]} 与位置编码表 {(self.height, self.width)} 不一致")
        if x.shape[1] != self.channels:
            raise DimensionError(f"特征图通道 {x.shape[1]} 与 model_dim={self.channels} 不一致")
        imp = compute_importance(x, self.scorer)
        indices = self.select(imp)
        masked = x * imp
        tokens = gather(masked, indices) + take_rows(self.pos, indices)
        tokens = self.encoder(tokens)
        out = scatter(masked, tokens, indices, mode='add' if self.residual_scatter else 'replace')
        if collector is not None:
            collector.record(name, imp.data, indices)
        return out


def filter_attention_block(x, block, collector=None):
    """函数式入口，等价于 block(x)"""
    return block(x, collector=collector)


class PooledGlobalAttention(Module):
    """
    池化全局自注意力：平均池化 → 展平为 token → 编码 → 还原网格 →
    最近邻上采样回原分辨率 → 与输入残差相加
    """

    def __init__(self, channels, window=2, depth=2, heads=2, mlp_ratio=2, rng=None):
        super().__init__()
        if window < 1:
            raise ConfigError(f"池化窗口必须为正数，实际: {window}", field='pool_window')
        self.channels, self.window = channels, window
        self.encoder = TransformerEncoder(channels, depth, heads, mlp_ratio, rng=rng)
        self.last_token_count = None

    def forward(self, x):
        batch, channels, height, width = x.shape
        w = self.window
        if height % w or width % w:
            raise ConfigError(f"池化窗口 {w} 不能整除特征图尺寸 {height}x{width}", field='pool_window')
        ph, pw = height // w, width // w
        pooled = F.avg_pool2d(x, w)
        tokens = pooled.reshape(batch, channels, ph * pw).permute(0, 2, 1)
        self.last_token_count = ph * pw
        tokens = self.encoder(tokens)
        grid = tokens.permute(0, 2, 1).reshape(batch, channels, ph, pw)
        return x + F.upsample_nearest(grid, w)


def pooled_global_attention(x, block):
    return block(x)


# ============================================================
# 解析 MAC 计数
# ============================================================
def _encoder_layer_macs(tokens, channels, mlp_ratio):
    return (2 * tokens * tokens * channels
            + 4 * tokens * channels * channels
            + int(2 * tokens * channels * channels * mlp_ratio))


def flop_count(kind, **dims):
    """
    解析乘加（MAC）计数

    Args:
        kind: 计数对象
            attention_scores / attention_values: K²·C
            attention: 打分 + 加权求和，2·K²·C
            projections: 4·K·C²（QKV 与输出投影）
            mlp: 2·K·C²·mlp_ratio
            encoder_layer / encoder: 单层 / depth 层编码器
            conv: C_in/groups · C_out · kh · kw · H_out · W_out
            scorer: 3x3、C→1 的打分卷积
            filter_attention: 打分卷积 + 在 K 个 token 上的编码器
            dense_attention: 在全部 H*W 个 token 上的编码器
            pooled_attention: 在池化后 token 上的编码器
        **dims: tokens / channels / mlp_ratio / depth / height / width / k / window /
                in_ch / out_ch / kernel / groups

    Returns:
        int: MAC 数
    """
    c = dims.get('channels')
    ratio = dims.get('mlp_ratio', 2)
    depth = dims.get('depth', 1)
    tokens = dims.get('tokens', dims.get('k'))

    if kind in ('attention_scores', 'attention_values'):
        return tokens * tokens * c
    if kind == 'attention':
        return 2 * tokens * tokens * c
    if kind == 'projections':
        return 4 * tokens * c * c
    if kind == 'mlp':
        return int(2 * tokens * c * c * ratio)
    if kind == 'encoder_layer':
        return _encoder_layer_macs(tokens, c, ratio)
    if kind == 'encoder':
        return depth * _encoder_layer_macs(tokens, c, ratio)
    if kind == 'conv':
        groups = dims.get('groups', 1)
        kernel = dims.get('kernel', 1)
        return (dims['in_ch'] // groups) * dims['out_ch'] * kernel * kernel * dims['height'] * dims['width']
    if kind == 'scorer':
        return flop_count('conv', in_ch=c, out_ch=1, kernel=3, height=dims['height'], width=dims['width'])
    if kind == 'filter_attention':
        return (flop_count('scorer', channels=c, height=dims['height'], width=dims['width'])
                + depth * _encoder_layer_macs(dims['k'], c, ratio))
    if kind == 'dense_attention':
        return depth * _encoder_layer_macs(dims['height'] * dims['width'], c, ratio)
    if kind == 'pooled_attention':
        w = dims['window']
        pooled = (dims['height'] // w) * (dims['width'] // w)
        return depth * _encoder_layer_macs(pooled, c, ratio)
    raise ConfigError(f"未知的计数对象: {kind}", field='block_kind')
