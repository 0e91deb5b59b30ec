"""
可解释性模块
推理时提取每个 FilterAttention 块的重要性图，最近邻放大到输入分辨率后叠加到原图，
输出二进制 PPM（P6，maxval 255），并统计选择覆盖情况
"""
import json
import logging
import os
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from core.data_pipeline import normalize_pixels, resize_bilinear
from core.errors import ContractError, FormatError
from core.model_zoo import forward_with_masks
from core.tensor import Tensor, get_default_dtype, no_grad
from core.utils import ensure_dir

logger = logging.getLogger(__name__)

# 线性颜色映射的端点 RGB：取值 0 → 起点，1 → 终点
COLORMAPS = {
    'bluered': ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0)),
    'gray': ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
}
DEFAULT_COLORMAP = 'bluered'


# ============================================================
# PPM 读写
# ============================================================
def encode_ppm(image):
    """
    Args:
        image: (3, H, W)，取值 [0, 1]

    Returns:
        bytes: P6 文件内容
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"PPM 编码需要 (3, H, W) 图像，实际: {image.shape}")
    _, h, w = image.shape
    body = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode('ascii') + body.tobytes()


_PPM_TOKEN = re.compile(rb'(?:\s|#[^\n]*\n)*(\S+)')


def decode_ppm(data):
    """
    解析 P6 文件（支持头部注释与 maxval < 256）

    Returns:
        np.ndarray: (3, H, W)，取值 [0, 1]
    """
    pos, tokens = 0, []
    for _ in range(4):
        match = _PPM_TOKEN.match(data, pos)
        if match is None:
            raise FormatError("PPM 头部不完整")
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b'P6':
        raise FormatError(f"只支持二进制 PPM (P6)，实际魔数: {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"PPM 头部字段非法: {tokens[1:]}")
    if not 0 < maxval < 256:
        raise FormatError(f"只支持 maxval < 256，实际: {maxval}")
    pos += 1  # 头部后的单个空白字符
    expected = width * height * 3
    body = np.frombuffer(data, dtype=np.uint8, count=-1, offset=pos)
    if body.size < expected:
        raise FormatError(f"PPM 像素数据不足: 需要 {expected} 字节，实际 {body.size} 字节")
    pixels = body[:expected].reshape(height, width, 3).transpose(2, 0, 1)
    return pixels.astype(get_default_dtype()) / maxval


def write_ppm(path, image):
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'wb') as f:
        f.write(encode_ppm(image))
    return path


def read_ppm(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"图像不存在: {path}")
    with open(path, 'rb') as f:
        return decode_ppm(f.read())


# ============================================================
# 掩码放大与叠加
# ============================================================
def upsample_mask_nearest(mask, height, width):
    """最近邻放大 (h, w) → (height, width)，不引入新的取值"""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return mask[rows[:, None], cols[None, :]]


def apply_colormap(values, colormap=DEFAULT_COLORMAP):
    """(H, W) ∈ [0, 1] → (3, H, W) 的 RGB"""
    if colormap not in COLORMAPS:
        raise ContractError(f"未知的颜色映射: {colormap}，可选: {sorted(COLORMAPS)}")
    start, end = (np.asarray(c, dtype=float) for c in COLORMAPS[colormap])
    values = np.clip(values, 0.0, 1.0)[None, :, :]
    return start[:, None, None] * (1.0 - values) + end[:, None, None] * values


@dataclass
class MaskOverlay:
    """
    Attributes:
        image: (3, H, W) 原图，取值 [0, 1]
        mask: (h, w) 重要性图，取值 [0, 1]
        alpha: 混合系数
        colormap: 颜色映射名
    """
    image: np.ndarray
    mask: np.ndarray
    alpha: float = 0.5
    colormap: str = DEFAULT_COLORMAP

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"混合系数 alpha 必须在 [0, 1]，实际: {self.alpha}")
        self.mask = np.squeeze(np.asarray(self.mask))
        if self.mask.ndim != 2:
            raise ContractError(f"掩码必须是二维，实际形状: {self.mask.shape}")

    def blend(self):
        _, h, w = self.image.shape
        colored = apply_colormap(upsample_mask_nearest(self.mask, h, w), self.colormap)
        out = (1.0 - self.alpha) * self.image + self.alpha * colored
        return np.clip(out, 0.0, 1.0)


def render_overlay(image, mask, alpha=0.5, colormap=DEFAULT_COLORMAP):
    """
    (1−α)·image + α·colormap(放大后的 mask)，截断到 [0, 1] 后编码为 PPM

    Returns:
        bytes
    """
    return encode_ppm(MaskOverlay(np.asarray(image), mask, alpha, colormap).blend())


# ============================================================
# 掩码提取与统计
# ============================================================
def _as_batch(image):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return data[None] if data.ndim == 3 else data


def extract_masks(model, image):
    """
    推理并提取每个 FilterAttention 块的重要性图与选择

    Args:
        model: FilterViT
        image: 归一化后的 (3, H, W) 或 (B, 3, H, W)

    Returns:
        tuple: (logits 数组, list[MaskRecord])，按网络顺序
    """
    if not model.filter_blocks():
        raise ContractError("模型中没有 FilterAttention 块，无法提取掩码")
    x = Tensor(_as_batch(image))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits, records = forward_with_masks(model, x)
    finally:
        model.train(was_training)
    return logits.data, records


def _mean_or_none(values):
    return float(np.mean(values)) if len(values) else None


def selection_coverage(mask_series, indices_series):
    """
    每个阶段的选择统计

    Args:
        mask_series: 每阶段的重要性图 (B, 1, H, W)
        indices_series: 每阶段的 SelectionIndex

    Returns:
        list[dict]: selected_fraction、selected_mean、non_selected_mean（K=H*W 时为 None）、
                    iou_with_previous（与上一阶段的选择集合放大到共同分辨率后的 IoU）
    """
    if len(mask_series) != len(indices_series):
        raise ContractError(f"掩码 {len(mask_series)} 个与选择 {len(indices_series)} 个数量不一致")
    stats, previous = [], None
    for stage, (imp, sel) in enumerate(zip(mask_series, indices_series)):
        imp = np.asarray(imp)
        batch, height, width = imp.shape[0], imp.shape[-2], imp.shape[-1]
        if (sel.batch, sel.height, sel.width) != (batch, height, width):
            raise ContractError(f"阶段 {stage} 的掩码形状 {imp.shape} 与选择 "
                                f"({sel.batch}, {sel.height}, {sel.width}) 不一致")
        selected = sel.to_mask()
        values = imp.reshape(batch, height, width)
        k = sel.k
        entry = dict(stage=stage, height=height, width=width, k=k,
                     selected_fraction=k / (height * width),
                     selected_mean=_mean_or_none(values[selected]),
                     non_selected_mean=_mean_or_none(values[~selected]),
                     iou_with_previous=None)
        if previous is not None:
            size = max(height, previous.shape[1])
            ious = []
            for b in range(batch):
                a = upsample_mask_nearest(previous[b], size, size)
                c = upsample_mask_nearest(selected[b], size, size)
                union = np.logical_or(a, c).sum()
                ious.append(np.logical_and(a, c).sum() / union if union else 1.0)
            entry['iou_with_previous'] = float(np.mean(ious))
        stats.append(entry)
        previous = selected
    return stats


def selection_region_iou(selection, regions, image_size):
    """
    选择集合（放大到输入分辨率）与已知类别区域的 IoU，对比 K/(H*W) 的随机基线

    Args:
        selection: SelectionIndex
        regions: (B, 4) 的 (top, left, bottom, right)，输入图像坐标
        image_size: 输入图像边长

    Returns:
        dict: {'iou', 'chance'}
    """
    regions = np.asarray(regions)
    if len(regions) != selection.batch:
        raise ContractError(f"区域数 {len(regions)} 与批大小 {selection.batch} 不一致")
    masks = selection.to_mask()
    ious = []
    for b, (top, left, bottom, right) in enumerate(regions):
        chosen = upsample_mask_nearest(masks[b], image_size, image_size)
        region = np.zeros((image_size, image_size), dtype=bool)
        region[top:bottom, left:right] = True
        union = np.logical_or(chosen, region).sum()
        ious.append(np.logical_and(chosen, region).sum() / union if union else 0.0)
    return {'iou': float(np.mean(ious)), 'chance': selection.k / (selection.height * selection.width)}


def coverage_table(stats):
    return pd.DataFrame(stats)


def export_explanations(model, image, out_dir, alpha=0.5, layer='all', colormap=DEFAULT_COLORMAP,
                        mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """
    对一张 [0, 1] 图像生成每个阶段的叠加图与覆盖统计

    Args:
        model: FilterViT（评估模式）
        image: (3, H, W) 原图
        out_dir: 输出目录
        alpha: 混合系数
        layer: 'all' 或阶段序号
        colormap: 颜色映射名

    Returns:
        dict: {'overlays': [路径], 'coverage': 路径, 'stats': list[dict], 'prediction': int}
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"混合系数 alpha 必须在 [0, 1]，实际: {alpha}")
    ensure_dir(out_dir)
    size = model.config.input_size
    model_input = image if image.shape[1:] == (size, size) else resize_bilinear(image, size, size)
    logits, records = extract_masks(model, normalize_pixels(model_input, mean, std))

    if layer == 'all':
        chosen = list(range(len(records)))
    else:
        stage = int(layer)
        if not 0 <= stage < len(records):
            raise ContractError(f"阶段序号 {stage} 超出范围 [0, {len(records)})")
        chosen = [stage]

    overlays = []
    for stage in chosen:
        record = records[stage]
        path = os.path.join(out_dir, f"overlay_stage{stage}.ppm")
        with open(path, 'wb') as f:
            f.write(render_overlay(image, record.importance[0, 0], alpha, colormap))
        overlays.append(path)
        logger.info(f"  ✓ 阶段 {stage} ({record.importance.shape[-2]}x{record.importance.shape[-1]}) → {path}")

    stats = selection_coverage([r.importance for r in records], [r.selection for r in records])
    coverage_path = os.path.join(out_dir, 'selection_coverage.json')
    with open(coverage_path, 'w', encoding='utf-8') as f:
        json.dump({'prediction': int(np.argmax(logits[0])), 'stages': stats}, f, ensure_ascii=False, indent=2)
    coverage_table(stats).to_csv(os.path.join(out_dir, 'selection_coverage.csv'), index=False)
    return {'overlays': overlays, 'coverage': coverage_path, 'stats': stats,
            'prediction': int(np.argmax(logits[0]))}

