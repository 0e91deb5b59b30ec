"""
性能基准模块
对比稠密注意力、FilterAttention（不同 K）、随机选择（dropout 变体）与池化全局注意力：
解析 MAC 数（与机器无关）+ 实测中位延迟（预热后重复计时）

CSV 表头：res,channels,variant,K,macs,median_ms,speedup_vs_dense
"""
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from core.errors import ConfigError
from core.filter_attention import FilterAttentionBlock, PooledGlobalAttention, flop_count
from core.layers import TransformerEncoder
from core.tensor import Tensor, default_dtype, no_grad
from core.utils import ensure_dir

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['res', 'channels', 'variant', 'K', 'macs', 'median_ms', 'speedup_vs_dense']
BENCH_VARIANTS = ('dense', 'filter', 'dropout', 'pooled')
MIN_REPETITIONS = 30
MIN_WARMUP = 5


@dataclass
class BenchGrid:
    """
    Attributes:
        resolutions: 特征图边长列表
        channels: 通道数列表
        k_fractions: K 占 H*W 的比例列表（filter / dropout 变体）
        variants: 参与对比的变体
        pool_window: 池化全局注意力窗口
        depth, heads, mlp_ratio: 编码器结构
        batch: 批大小
        repetitions, warmup: 计时重复与预热次数
        seed: 参数初始化与输入的种子
    """
    resolutions: list = field(default_factory=lambda: [8, 16])
    channels: list = field(default_factory=lambda: [32])
    k_fractions: list = field(default_factory=lambda: [0.125, 0.25, 0.5, 1.0])
    variants: list = field(default_factory=lambda: list(BENCH_VARIANTS))
    pool_window: int = 2
    depth: int = 1
    heads: int = 2
    mlp_ratio: int = 2
    batch: int = 1
    repetitions: int = MIN_REPETITIONS
    warmup: int = MIN_WARMUP
    seed: int = 0

    def __post_init__(self):
        for v in self.variants:
            if v not in BENCH_VARIANTS:
                raise ConfigError(f"未知的基准变体: {v}，可选: {BENCH_VARIANTS}", field='variants')
        if 'dense' not in self.variants:
            raise ConfigError("基准必须包含 dense 基线", field='variants')
        if self.repetitions < MIN_REPETITIONS:
            raise ConfigError(f"repetitions 至少为 {MIN_REPETITIONS}", field='repetitions')
        if self.warmup < MIN_WARMUP:
            raise ConfigError(f"warmup 至少为 {MIN_WARMUP}", field='warmup')
        for f in self.k_fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"K 比例必须在 (0, 1]: {f}", field='k_fractions')
        for c in self.channels:
            if c % self.heads:
                raise ConfigError(f"通道 {c} 不能被 heads={self.heads} 整除", field='channels')

    @classmethod
    def from_dict(cls, payload):
        try:
            return cls(**payload)
        except TypeError as e:
            raise ConfigError(f"基准网格字段错误: {e}", field='grid')

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    def ks(self, res):
        positions = res * res
        return sorted({max(1, int(round(f * positions))) for f in self.k_fractions})


def measure(fn, repetitions, warmup):
    """预热 warmup 次后计时 repetitions 次，返回每次耗时（毫秒）"""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return samples


def aggregate_timings(records):
    """
    由原始计时样本汇总报告（纯函数）

    Args:
        records: [{'res', 'channels', 'variant', 'K', 'macs', 'attention_macs', 'samples_ms'}]

    Returns:
        pd.DataFrame: 含 median_ms、fps、speedup_vs_dense、attention_ratio_vs_dense
    """
    rows = []
    for r in records:
        median = float(np.median(r['samples_ms']))
        rows.append(dict(res=r['res'], channels=r['channels'], variant=r['variant'], K=r['K'],
                         macs=int(r['macs']), attention_macs=int(r.get('attention_macs', 0)),
                         median_ms=median, fps=1000.0 / median if median > 0 else float('inf'),
                         repetitions=len(r['samples_ms'])))
    report = pd.DataFrame(rows)
    if report.empty:
        return report
    dense = report[report['variant'] == 'dense'].set_index(['res', 'channels'])
    keys = list(zip(report['res'], report['channels']))
    dense_ms = [dense.loc[k, 'median_ms'] if k in dense.index else np.nan for k in keys]
    dense_attn = [dense.loc[k, 'attention_macs'] if k in dense.index else np.nan for k in keys]
    report['speedup_vs_dense'] = np.asarray(dense_ms, dtype=float) / report['median_ms']
    report['attention_ratio_vs_dense'] = report['attention_macs'] / np.asarray(dense_attn, dtype=float)
    return report


def latency_trend_ok(report, res, channels, variant='filter', allowed_inversions=1):
    """filter 变体的中位延迟随 K 单调不减，允许 allowed_inversions 次相邻逆序"""
    rows = report[(report['res'] == res) & (report['channels'] == channels) & (report['variant'] == variant)]
    medians = rows.sort_values('K')['median_ms'].to_numpy()
    inversions = int(np.sum(np.diff(medians) < 0))
    return inversions <= allowed_inversions


def _analytic(variant, res, channels, k, grid):
    dims = dict(channels=channels, height=res, width=res, depth=grid.depth, mlp_ratio=grid.mlp_ratio)
    if variant == 'dense':
        return flop_count('dense_attention', **dims), flop_count('attention', tokens=res * res, channels=channels)
    if variant == 'pooled':
        tokens = (res // grid.pool_window) ** 2
        return (flop_count('pooled_attention', window=grid.pool_window, **dims),
                flop_count('attention', tokens=tokens, channels=channels))
    return flop_count('filter_attention', k=k, **dims), flop_count('attention', tokens=k, channels=channels)


def _cases(grid):
    for res in grid.resolutions:
        for channels in grid.channels:
            for variant in grid.variants:
                if variant in ('filter', 'dropout'):
                    for k in grid.ks(res):
                        yield res, channels, variant, k
                elif variant == 'pooled':
                    if res % grid.pool_window == 0:
                        yield res, channels, variant, (res // grid.pool_window) ** 2
                else:
                    yield res, channels, variant, res * res


def _runner(variant, res, channels, k, grid, rng):
    x = Tensor(rng.standard_normal((grid.batch, channels, res, res)))
    if variant == 'dense':
        encoder = TransformerEncoder(channels, grid.depth, grid.heads, grid.mlp_ratio, rng=rng)
        tokens = x.reshape(grid.batch, channels, res * res).permute(0, 2, 1)
        return lambda: encoder(tokens)
    if variant == 'pooled':
        block = PooledGlobalAttention(channels, grid.pool_window, grid.depth, grid.heads, grid.mlp_ratio, rng=rng)
        return lambda: block(x)
    block = FilterAttentionBlock(channels, res, res, k=k, depth=grid.depth, heads=grid.heads,
                                 mlp_ratio=grid.mlp_ratio, variant=variant, rng=rng)
    block.set_selection_rng(np.random.default_rng(grid.seed))
    # dropout 变体测的是训练时的随机选择路径
    block.train(variant == 'dropout')
    return lambda: block(x)


def collect_timings(grid, dtype='float32'):
    """执行计时，返回原始样本记录"""
    records = []
    with default_dtype(dtype), no_grad():
        for res, channels, variant, k in _cases(grid):
            rng = np.random.default_rng(grid.seed)
            fn = _runner(variant, res, channels, k, grid, rng)
            samples = measure(fn, grid.repetitions, grid.warmup)
            macs, attention_macs = _analytic(variant, res, channels, k, grid)
            records.append(dict(res=res, channels=channels, variant=variant, K=k, macs=macs,
                                attention_macs=attention_macs, samples_ms=samples))
            logger.info(f"  {variant:>7} res={res:<3} C={channels:<4} K={k:<5} "
                        f"median={np.median(samples):.3f}ms")
    return records


def environment_metadata(grid, dtype):
    return {
        'dtype': dtype,
        'element_bytes': int(np.dtype(dtype).itemsize),
        'repetitions': grid.repetitions,
        'warmup': grid.warmup,
        'numpy': np.__version__,
        'python': platform.python_version(),
        'platform': platform.platform(),
        'processor': platform.processor(),
        'grid': asdict(grid),
    }


def latency_chart(report, path):
    """每个 (res, channels) 一条 filter 变体的 延迟-K 曲线，稠密基线画为水平线"""
    fig = go.Figure()
    for (res, channels), rows in report.groupby(['res', 'channels']):
        filt = rows[rows['variant'] == 'filter'].sort_values('K')
        if not filt.empty:
            fig.add_trace(go.Scatter(x=filt['K'], y=filt['median_ms'], mode='lines+markers',
                                     name=f"filter res={res} C={channels}"))
        dense = rows[rows['variant'] == 'dense']
        if not dense.empty:
            fig.add_hline(y=float(dense['median_ms'].iloc[0]), line_dash='dash',
                          annotation_text=f"dense res={res} C={channels}")
    fig.update_layout(title='中位延迟 vs K', xaxis_title='K (选中 token 数)', yaxis_title='median latency (ms)',
                      template='plotly_white')
    fig.write_html(path, include_plotlyjs='cdn')
    return path


def run_bench(grid, out_csv=None, dtype='float32'):
    """
    执行基准

    Args:
        grid: BenchGrid 或其字典形式
        out_csv: CSV 输出路径（同目录写 _meta.json 与 .html 图表），None 时不落盘
        dtype: 计时使用的元素类型

    Returns:
        pd.DataFrame: 完整报告
    """
    if isinstance(grid, dict):
        grid = BenchGrid.from_dict(grid)
    logger.info("=" * 60)
    logger.info(f"开始基准测试: {len(list(_cases(grid)))} 个配置，重复 {grid.repetitions} 次，预热 {grid.warmup} 次")
    logger.info("=" * 60)

    report = aggregate_timings(collect_timings(grid, dtype))
    logger.info("\n" + report[CSV_COLUMNS + ['fps']].to_string(index=False))

    for res in grid.resolutions:
        for channels in grid.channels:
            if 'filter' in grid.variants and not latency_trend_ok(report, res, channels):
                logger.warning(f"res={res} C={channels}: filter 延迟随 K 的单调趋势被破坏（逆序超过1次）")

    if out_csv is not None:
        ensure_dir(os.path.dirname(os.path.abspath(out_csv)))
        report[CSV_COLUMNS].to_csv(out_csv, index=False)
        stem = os.path.splitext(out_csv)[0]
        with open(stem + '_meta.json', 'w', encoding='utf-8') as f:
            json.dump(environment_metadata(grid, dtype), f, ensure_ascii=False, indent=2)
        latency_chart(report, stem + '.html')
        logger.info(f"✓ 基准报告已保存: {out_csv}")
    return report
