"""
模型组装模块
stem(stride 2) → 倒残差 → FilterAttention → 倒残差(s2) → FilterAttention →
倒残差(s2) → FilterAttention → 池化全局注意力 → 倒残差 → 全局池化 → 线性分类头

FilterViT 与 DropoutViT 只在选择策略上不同，参数形状完全一致
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from core.errors import ConfigError, DimensionError
from core.filter_attention import (
    EVAL_SELECTIONS, SAMPLINGS, VARIANTS, FilterAttentionBlock, MaskCollector,
    PooledGlobalAttention, default_k, flop_count,
)
from core.functional import conv_output_size
from core.layers import ClassifierHead, ConvNorm, InvertedResidual, Module, ModuleList, param_count
from core.utils import fingerprint

logger = logging.getLogger(__name__)

STAGE_KINDS = ('inverted_residual', 'filter_attention', 'pooled_attention')


@dataclass
class StageConfig:
    """
    单个阶段的描述

    Attributes:
        kind: inverted_residual / filter_attention / pooled_attention
        channels: 输出通道（注意力阶段必须等于输入通道）
        repeats: 重复次数（倒残差块只有第一个使用 stride）
        stride: 倒残差块步长 1 或 2
        expand_ratio: 倒残差块扩张倍数
        k: FilterAttention 选择预算，None 时取 ceil(H*W/4)
        pool_window: 池化全局注意力的窗口
        depth, heads: Transformer 编码器层数与头数
        variant: 覆盖模型级的选择变体（None 表示沿用）
        sampling: dropout 变体的采样方式
    """
    kind: str
    channels: int
    repeats: int = 1
    stride: int = 1
    expand_ratio: int = 2
    k: int = None
    pool_window: int = 2
    depth: int = 2
    heads: int = 2
    variant: str = None
    sampling: str = 'uniform'


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    stages: list = field(default_factory=list)
    num_classes: int = 10
    variant: str = 'filter'
    mlp_ratio: int = 2
    eval_selection: str = 'topk'
    eval_seed: int = 0
    residual_scatter: bool = False

    # ---------------- 序列化 ----------------
    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        known = {f.name for f in dataclasses.fields(cls)}
        for key in payload:
            if key not in known:
                raise ConfigError(f"ModelConfig 未知字段: {key}", field=key)
        stage_fields = {f.name for f in dataclasses.fields(StageConfig)}
        stages = []
        for i, stage in enumerate(payload.pop('stages', [])):
            if isinstance(stage, StageConfig):
                stages.append(stage)
                continue
            for key in stage:
                if key not in stage_fields:
                    raise ConfigError(f"stages[{i}] 未知字段: {key}", field=f"stages[{i}].{key}")
            if 'kind' not in stage or 'channels' not in stage:
                raise ConfigError(f"stages[{i}] 缺少 kind 或 channels", field=f"stages[{i}]")
            stages.append(StageConfig(**stage))
        return cls(stages=stages, **payload)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
        # 允许训练配置文件把模型配置放在 "model" 字段下
        return cls.from_dict(payload.get('model', payload))

    def fingerprint(self):
        return fingerprint(self.to_dict())

    def with_variant(self, variant):
        return dataclasses.replace(self, variant=variant,
                                   stages=[dataclasses.replace(s) for s in self.stages])

    # ---------------- 校验 ----------------
    def validate(self):
        """
        逐阶段推导空间尺寸并校验不变量

        Returns:
            list[dict]: 每个块的 {stage, kind, in_shape(C,H,W), out_shape, k}
        """
        if self.variant not in VARIANTS:
            raise ConfigError(f"未知的选择变体: {self.variant}", field='variant')
        if self.eval_selection not in EVAL_SELECTIONS:
            raise ConfigError(f"未知的评估选择方式: {self.eval_selection}", field='eval_selection')
        if self.num_classes < 1:
            raise ConfigError(f"num_classes 必须为正数，实际: {self.num_classes}", field='num_classes')
        if self.input_size < 2 or self.input_size % 2:
            raise ConfigError(f"input_size 必须为正偶数（stem 步长为2），实际: {self.input_size}",
                              field='input_size')
        if not self.stages:
            raise ConfigError("stages 不能为空", field='stages')

        size = conv_output_size(self.input_size, 3, 2, 1)
        channels = self.stem_channels
        layout = []
        for i, stage in enumerate(self.stages):
            where = f"stages[{i}]"
            if stage.kind not in STAGE_KINDS:
                raise ConfigError(f"{where} 未知的阶段类型: {stage.kind}", field=f"{where}.kind")
            if stage.repeats < 1:
                raise ConfigError(f"{where} repeats 必须 ≥ 1", field=f"{where}.repeats")
            if stage.kind == 'inverted_residual':
                if stage.stride not in (1, 2):
                    raise ConfigError(f"{where} stride 只能为1或2", field=f"{where}.stride")
                for r in range(stage.repeats):
                    stride = stage.stride if r == 0 else 1
                    if stride == 2 and size % 2:
                        raise ConfigError(f"{where} 特征图尺寸 {size} 为奇数，stride 2 无法精确减半",
                                          field=f"{where}.stride")
                    out = size // stride
                    layout.append(dict(stage=i, kind=stage.kind, in_shape=(channels, size, size),
                                       out_shape=(stage.channels, out, out), k=None, stride=stride))
                    channels, size = stage.channels, out
                continue

            if stage.channels != channels:
                raise ConfigError(f"{where} 注意力阶段通道 {stage.channels} 必须等于输入通道 {channels}",
                                  field=f"{where}.channels")
            if stage.heads < 1 or channels % stage.heads:
                raise ConfigError(f"{where} 通道 {channels} 不能被 heads={stage.heads} 整除",
                                  field=f"{where}.heads")
            if stage.kind == 'filter_attention':
                k = default_k(size, size) if stage.k is None else stage.k
                if not 1 <= k <= size * size:
                    raise ConfigError(f"{where} K={k} 超出范围 [1, {size * size}]", field=f"{where}.k")
                variant = stage.variant or self.variant
                if variant not in VARIANTS:
                    raise ConfigError(f"{where} 未知的选择变体: {variant}", field=f"{where}.variant")
                if stage.sampling not in SAMPLINGS:
                    raise ConfigError(f"{where} 未知的采样方式: {stage.sampling}", field=f"{where}.sampling")
            else:
                k = None
                if stage.pool_window < 1 or size % stage.pool_window:
                    raise ConfigError(f"{where} 池化窗口 {stage.pool_window} 不能整除特征图尺寸 {size}",
                                      field=f"{where}.pool_window")
            for _ in range(stage.repeats):
                layout.append(dict(stage=i, kind=stage.kind, in_shape=(channels, size, size),
                                   out_shape=(channels, size, size), k=k, stride=1))
        return layout


def reference_config(variant='filter', num_classes=10, input_size=64):
    """
    桌面规模参考配置：64x64 输入，通道 [16, 24, 48, 64, 96]，
    三个 FilterAttention 阶段位于 32x32 / 16x16 / 8x8，K = 256 / 64 / 16
    """
    ks = (256, 64, 16) if input_size == 64 else (None, None, None)
    return ModelConfig(
        input_size=input_size,
        stem_channels=16,
        num_classes=num_classes,
        variant=variant,
        stages=[
            StageConfig('inverted_residual', 24, stride=1),
            StageConfig('filter_attention', 24, k=ks[0]),
            StageConfig('inverted_residual', 48, stride=2),
            StageConfig('filter_attention', 48, k=ks[1]),
            StageConfig('inverted_residual', 64, stride=2),
            StageConfig('filter_attention', 64, k=ks[2]),
            StageConfig('pooled_attention', 64, pool_window=2),
            StageConfig('inverted_residual', 96, stride=1),
        ],
    )


def micro_config(variant='filter', num_classes=4, input_size=16):
    """冒烟测试用的小模型：两个 FilterAttention 阶段，编码器单层"""
    return ModelConfig(
        input_size=input_size,
        stem_channels=8,
        num_classes=num_classes,
        variant=variant,
        stages=[
            StageConfig('inverted_residual', 8, stride=1),
            StageConfig('filter_attention', 8, depth=1),
            StageConfig('inverted_residual', 16, stride=2),
            StageConfig('filter_attention', 16, depth=1),
            StageConfig('pooled_attention', 16, pool_window=2, depth=1),
        ],
    )


MODEL_REGISTRY = {
    'filtervit_tiny': lambda **kw: reference_config('filter', **kw),
    'dropoutvit_tiny': lambda **kw: reference_config('dropout', **kw),
    'filtervit_micro': lambda **kw: micro_config('filter', **kw),
    'dropoutvit_micro': lambda **kw: micro_config('dropout', **kw),
}


def get_model_config(name, **overrides):
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"未知的模型名: {name}，可选: {sorted(MODEL_REGISTRY)}", field='model')
    return MODEL_REGISTRY[name](**overrides)


class FilterViT(Module):
    """
    混合 CNN-Transformer 分类器

    初始化随机源与 dropout 变体的选择随机源分别派生自同一个种子，
    因此同一种子下 filter / dropout 两种变体的初始参数完全相同
    """

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.layout = cfg.validate()
        self.config = cfg
        self.seed = seed
        init_seq, select_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seq)

        self.stem = ConvNorm(cfg.in_channels, cfg.stem_channels, 3, stride=2, rng=rng)
        self.blocks = ModuleList()
        for entry in self.layout:
            stage = cfg.stages[entry['stage']]
            in_ch, size, _ = entry['in_shape']
            if entry['kind'] == 'inverted_residual':
                block = InvertedResidual(in_ch, entry['out_shape'][0], stage.expand_ratio, entry['stride'], rng=rng)
            elif entry['kind'] == 'filter_attention':
                block = FilterAttentionBlock(
                    in_ch, size, size, k=entry['k'], depth=stage.depth, heads=stage.heads,
                    mlp_ratio=cfg.mlp_ratio, variant=stage.variant or cfg.variant,
                    eval_selection=cfg.eval_selection, eval_seed=cfg.eval_seed,
                    sampling=stage.sampling, residual_scatter=cfg.residual_scatter, rng=rng)
            else:
                block = PooledGlobalAttention(in_ch, stage.pool_window, stage.depth, stage.heads,
                                              cfg.mlp_ratio, rng=rng)
            self.blocks.append(block)
        self.head = ClassifierHead(self.layout[-1]['out_shape'][0], cfg.num_classes, rng=rng)
        self.set_selection_rng(np.random.default_rng(select_seq))

    def set_selection_rng(self, rng):
        """dropout 变体的随机源由模型持有，各块共享"""
        self.selection_rng = rng
        for block in self.filter_blocks():
            block.set_selection_rng(rng)

    def filter_blocks(self):
        return [b for b in self.blocks if isinstance(b, FilterAttentionBlock)]

    def forward(self, x, collector=None):
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"模型输入应为 (B, {expected[0]}, {expected[1]}, {expected[2]})，实际: {x.shape}")
        x = self.stem(x)
        for i, block in enumerate(self.blocks):
            if isinstance(block, FilterAttentionBlock):
                x = block(x, collector=collector, name=f"blocks.{i}")
            else:
                x = block(x)
        return self.head(x)


def build_model(cfg, seed=0):
    """
    按配置构建模型

    Args:
        cfg: ModelConfig 或其字典形式
        seed: 初始化种子

    Returns:
        FilterViT
    """
    if isinstance(cfg, dict):
        cfg = ModelConfig.from_dict(cfg)
    model = FilterViT(cfg, seed=seed)
    logger.debug(f"模型构建完成: {len(model.blocks)} 个块，参数量 {param_count(model)}")
    return model


def create_model(name, seed=0, **overrides):
    return build_model(get_model_config(name, **overrides), seed=seed)


def forward_with_masks(model, x):
    """
    前向并收集每个 FilterAttention 块的重要性图与选择结果（仅观测，不影响数值）

    Returns:
        tuple: (logits, list[MaskRecord])，按网络顺序
    """
    collector = MaskCollector()
    logits = model(x, collector=collector)
    return logits, list(collector.records)


def _block_macs(entry, stage, cfg):
    in_ch, size, _ = entry['in_shape']
    out_ch, out_size, _ = entry['out_shape']
    if entry['kind'] == 'inverted_residual':
        hidden = in_ch * stage.expand_ratio
        return (flop_count('conv', in_ch=in_ch, out_ch=hidden, kernel=1, height=size, width=size)
                + flop_count('conv', in_ch=hidden, out_ch=hidden, kernel=3, groups=hidden,
                             height=out_size, width=out_size)
                + flop_count('conv', in_ch=hidden, out_ch=out_ch, kernel=1, height=out_size, width=out_size))
    if entry['kind'] == 'filter_attention':
        return flop_count('filter_attention', channels=in_ch, height=size, width=size, k=entry['k'],
                          depth=stage.depth, mlp_ratio=cfg.mlp_ratio)
    return flop_count('pooled_attention', channels=in_ch, height=size, width=size,
                      window=stage.pool_window, depth=stage.depth, mlp_ratio=cfg.mlp_ratio)


def model_summary(model):
    """
    逐块汇总表：类型、输入/输出形状、K、参数量、解析 MAC

    Returns:
        pd.DataFrame
    """
    cfg = model.config
    stem_size = model.layout[0]['in_shape'][1]
    rows = [dict(block='stem', kind='conv', in_shape=(cfg.in_channels, cfg.input_size, cfg.input_size),
                 out_shape=(cfg.stem_channels, stem_size, stem_size), k=None,
                 params=param_count(model.stem),
                 macs=flop_count('conv', in_ch=cfg.in_channels, out_ch=cfg.stem_channels, kernel=3,
                                 height=stem_size, width=stem_size))]
    for i, (entry, block) in enumerate(zip(model.layout, model.blocks)):
        rows.append(dict(block=f"blocks.{i}", kind=entry['kind'], in_shape=entry['in_shape'],
                         out_shape=entry['out_shape'], k=entry['k'], params=param_count(block),
                         macs=_block_macs(entry, cfg.stages[entry['stage']], cfg)))
    head_in = model.layout[-1]['out_shape'][0]
    rows.append(dict(block='head', kind='linear', in_shape=(head_in,), out_shape=(cfg.num_classes,), k=None,
                     params=param_count(model.head), macs=head_in * cfg.num_classes))
    return pd.DataFrame(rows)
