"""
数据管道
CIFAR-10 二进制读取、合成局部性数据集、数据增强、验证变换与批迭代

CIFAR-10 二进制格式：每条记录 1 字节标签 + 3072 字节像素（行优先，R/G/B 通道平面）
"""
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from core.errors import ConfigError, ContractError, FormatError
from core.tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = ('airplane', 'automobile', 'bird', 'cat', 'deer',
                 'dog', 'frog', 'horse', 'ship', 'truck')
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ('test_batch.bin',)


# ============================================================
# 数据集容器
# ============================================================
@dataclass
class LabeledImage:
    """pixels: (3, H, W)，归一化前取值在 [0, 1]"""
    pixels: np.ndarray
    label: int
    region: tuple = None


@dataclass
class ImageDataset:
    """
    只读图像数据集

    Attributes:
        images: (N, 3, H, W)
        labels: (N,) int64
        num_classes: 类别数
        regions: (N, 4) 的 (top, left, bottom, right)，合成数据集记录决定类别的区域
        class_names: 类别名
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    regions: np.ndarray = None
    class_names: tuple = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(f"图像数 {len(self.images)} 与标签数 {len(self.labels)} 不一致")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"标签超出范围 [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        region = None if self.regions is None else tuple(int(v) for v in self.regions[index])
        return LabeledImage(self.images[index], int(self.labels[index]), region)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        regions = None if self.regions is None else self.regions[indices]
        return ImageDataset(self.images[indices], self.labels[indices], self.num_classes, regions,
                            self.class_names)

    def select_classes(self, classes):
        """
        只保留给定类别，并按给定顺序重新编号为 0..len(classes)-1
        """
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise ConfigError(f"类别列表有重复: {classes}", field='classes')
        for c in classes:
            if not 0 <= c < self.num_classes:
                raise ConfigError(f"类别 {c} 超出范围 [0, {self.num_classes})", field='classes')
        keep = np.flatnonzero(np.isin(self.labels, classes))
        mapping = np.full(self.num_classes, -1, dtype=np.int64)
        mapping[classes] = np.arange(len(classes))
        names = tuple(self.class_names[c] for c in classes) if self.class_names else ()
        regions = None if self.regions is None else self.regions[keep]
        return ImageDataset(self.images[keep], mapping[self.labels[keep]], len(classes), regions, names)

    def split(self, val_count, seed=0):
        """按种子随机划分为 (训练集, 验证集)"""
        if not 0 <= val_count <= len(self):
            raise ConfigError(f"验证集大小 {val_count} 超出范围 [0, {len(self)}]", field='val_count')
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(np.sort(order[val_count:])), self.subset(np.sort(order[:val_count]))


def random_class_subset(dataset, count, seed=0):
    """随机挑选 count 个类别组成子集（可复现）"""
    if not 1 <= count <= dataset.num_classes:
        raise ConfigError(f"类别子集大小 {count} 超出范围 [1, {dataset.num_classes}]", field='class_subset')
    classes = np.sort(np.random.default_rng(seed).choice(dataset.num_classes, size=count, replace=False))
    logger.info(f"类别子集 (seed={seed}): {classes.tolist()}")
    return dataset.select_classes(classes)


# ============================================================
# CIFAR-10 二进制
# ============================================================
def load_cifar10_binary(path):
    """
    读取一个 CIFAR-10 二进制文件

    Args:
        path: 文件路径

    Returns:
        ImageDataset: 像素缩放到 [0, 1]
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"CIFAR-10 文件不存在: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"文件大小 {raw.size} 字节不是记录大小 {CIFAR_RECORD_BYTES} 字节的整数倍: {path}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise FormatError(f"第 {bad} 条记录的标签字节 {labels[bad]} > 9: {path}")
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(get_default_dtype()) / 255.0
    logger.info(f"已读取 CIFAR-10 文件 {os.path.basename(path)}: {len(labels)} 条记录")
    return ImageDataset(images, labels, 10, None, CIFAR_CLASSES)


def concat_datasets(parts):
    parts = list(parts)
    if not parts:
        raise ContractError("没有可合并的数据集")
    return ImageDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                        parts[0].num_classes, None, parts[0].class_names)


def load_cifar10_dir(directory, train=True):
    """读取 cifar-10-batches-bin 目录下的训练或测试文件"""
    names = CIFAR_TRAIN_FILES if train else CIFAR_TEST_FILES
    paths = [os.path.join(directory, n) for n in names if os.path.exists(os.path.join(directory, n))]
    if not paths:
        raise FileNotFoundError(f"目录中没有 CIFAR-10 二进制文件: {directory}")
    return concat_datasets(load_cifar10_binary(p) for p in paths)


# ============================================================
# 合成局部性数据集
# ============================================================
def _disk(size, cy, cx, radius, inner=0.0):
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return ((r <= radius) & (r >= inner)).astype(float)


def synth_dataset(num_classes=4, n=2000, seed=0, size=64, noise=0.05):
    """
    合成局部性数据集

    图像划分为 g×g 个格子（g = ceil(sqrt(num_classes))），每个格子中心附近都有一个随机极性的实心圆作为干扰；
    类别 c 对应的格子换成随机极性的圆环。由于极性随机，各类别的均值图像相同，
    只看像素线性组合无法区分类别，模型必须关注圆环所在的局部区域

    Args:
        num_classes: 类别数
        n: 样本数（≥ num_classes）
        seed: 随机种子
        size: 图像边长
        noise: 背景高斯噪声标准差

    Returns:
        ImageDataset: regions 记录每张图决定类别的格子
    """
    if n < num_classes:
        raise ContractError(f"样本数 {n} 少于类别数 {num_classes}")
    rng = np.random.default_rng(seed)
    grid = math.ceil(math.sqrt(num_classes))
    cell = size // grid
    radius = cell / 4.0
    jitter = max(1, int(cell / 8))

    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=get_default_dtype())
    regions = np.zeros((n, 4), dtype=np.int64)

    for idx in range(n):
        label = int(labels[idx])
        canvas = 0.5 + noise * rng.standard_normal((size, size))
        for c in range(grid * grid):
            row, col = divmod(c, grid)
            cy = row * cell + cell / 2 + rng.integers(-jitter, jitter + 1)
            cx = col * cell + cell / 2 + rng.integers(-jitter, jitter + 1)
            inner = radius * 0.5 if c == label else 0.0
            polarity = 1.0 if rng.random() < 0.5 else -1.0
            canvas += polarity * 0.35 * _disk(size, cy, cx, radius, inner)
        tint = rng.uniform(0.85, 1.0, size=3)
        images[idx] = np.clip(canvas[None, :, :] * tint[:, None, None], 0.0, 1.0)
        row, col = divmod(label, grid)
        regions[idx] = (row * cell, col * cell, (row + 1) * cell, (col + 1) * cell)

    names = tuple(f"cell_{c}" for c in range(num_classes))
    return ImageDataset(images, labels, num_classes, regions, names)


# ============================================================
# 增强与变换
# ============================================================
@dataclass(frozen=True)
class AugmentationPolicy:
    """
    Attributes:
        crop_enabled: 是否做随机缩放裁剪
        scale: 裁剪面积占比范围
        ratio: 裁剪宽高比范围
        output_size: 输出边长
        flip_prob: 水平翻转概率
        mean, std: 每通道归一化参数
    """
    crop_enabled: bool = True
    scale: tuple = (0.25, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    output_size: int = 64
    flip_prob: float = 0.5
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ConfigError(f"std 必须为正数: {self.std}", field='std')
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ConfigError(f"裁剪面积范围非法: {self.scale}", field='scale')
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ConfigError(f"裁剪宽高比范围非法: {self.ratio}", field='ratio')
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"翻转概率必须在 [0, 1]: {self.flip_prob}", field='flip_prob')
        if self.output_size < 1:
            raise ConfigError(f"输出尺寸必须为正数: {self.output_size}", field='output_size')

    @classmethod
    def from_dict(cls, payload):
        payload = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
        try:
            return cls(**payload)
        except TypeError as e:
            raise ConfigError(f"增强配置字段错误: {e}", field='augmentation')

    @classmethod
    def normalize_only(cls, output_size=64, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        return cls(crop_enabled=False, flip_prob=0.0, output_size=output_size, mean=mean, std=std)


def resize_bilinear(pixels, out_h, out_w):
    """
    双线性缩放（半像素中心对齐），同尺寸时为恒等

    Args:
        pixels: (C, H, W)
    """
    _, h, w = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels.copy()

    def axis_weights(in_size, out_size):
        src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0, in_size - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_size - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    top = pixels[:, y0, :] * (1 - wy)[None, :, None] + pixels[:, y1, :] * wy[None, :, None]
    return top[:, :, x0] * (1 - wx)[None, None, :] + top[:, :, x1] * wx[None, None, :]


def _crop_box(h, w, scale, ratio, rng):
    area = h * w
    if scale == (1.0, 1.0) or tuple(scale) == (1, 1):
        return 0, 0, h, w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # 多次尝试失败时退化为中心裁剪
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def normalize_pixels(pixels, mean, std):
    mean = np.asarray(mean, dtype=pixels.dtype)[:, None, None]
    std = np.asarray(std, dtype=pixels.dtype)[:, None, None]
    return (pixels - mean) / std


def denormalize(pixels, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """normalize_pixels 的逆变换"""
    mean = np.asarray(mean, dtype=pixels.dtype)[:, None, None]
    std = np.asarray(std, dtype=pixels.dtype)[:, None, None]
    return pixels * std + mean


def augment(img, policy, rng):
    """
    训练增强：随机缩放裁剪（双线性）→ 水平翻转 → 每通道归一化

    Args:
        img: LabeledImage
        policy: AugmentationPolicy
        rng: np.random.Generator

    Returns:
        LabeledImage: 归一化后的像素，标签不变
    """
    pixels = img.pixels
    _, h, w = pixels.shape
    if policy.crop_enabled:
        top, left, ch, cw = _crop_box(h, w, policy.scale, policy.ratio, rng)
        pixels = resize_bilinear(pixels[:, top:top + ch, left:left + cw], policy.output_size, policy.output_size)
    elif (h, w) != (policy.output_size, policy.output_size):
        pixels = resize_bilinear(pixels, policy.output_size, policy.output_size)
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        pixels = pixels[:, :, ::-1]
    pixels = normalize_pixels(np.ascontiguousarray(pixels), policy.mean, policy.std)
    return LabeledImage(pixels, img.label, img.region)


def center_crop(pixels, size):
    _, h, w = pixels.shape
    if size > h or size > w:
        raise ConfigError(f"中心裁剪尺寸 {size} 大于图像 {h}x{w}", field='crop')
    top, left = (h - size) // 2, (w - size) // 2
    return pixels[:, top:top + size, left:left + size]


def eval_transform(img, resize=72, crop=64, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """
    验证变换：缩放到 resize → 中心裁剪 crop → 归一化；resize=None 时直接缩放到 crop
    """
    pixels = img.pixels
    if resize is None:
        pixels = resize_bilinear(pixels, crop, crop)
    else:
        pixels = center_crop(resize_bilinear(pixels, resize, resize), crop)
    pixels = normalize_pixels(np.ascontiguousarray(pixels), mean, std)
    return LabeledImage(pixels, img.label, img.region)


def make_train_transform(policy):
    def transform(img, rng):
        return augment(img, policy, rng)
    return transform


def make_eval_transform(resize=72, crop=64, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    def transform(img, rng=None):
        return eval_transform(img, resize, crop, mean, std)
    return transform


# ============================================================
# 批迭代
# ============================================================
def batch_indices(size, batch_size, shuffle_seed=None, epoch=0):
    """
    每个 epoch 由 (seed, epoch) 确定的洗牌顺序切分批次，保留最后不足一批的部分

    Returns:
        list[np.ndarray]
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size 必须 ≥ 1，实际: {batch_size}", field='batch_size')
    if shuffle_seed is None:
        order = np.arange(size)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(size)
    return [order[i:i + batch_size] for i in range(0, size, batch_size)]


def _assemble(dataset, indices, transform, rng):
    pixels, labels = [], []
    for i in indices:
        item = dataset[int(i)]
        if transform is not None:
            item = transform(item, rng)
        pixels.append(item.pixels)
        labels.append(item.label)
    images = np.stack(pixels).astype(get_default_dtype(), copy=False)
    return Tensor(images), np.asarray(labels, dtype=np.int64)


@dataclass
class _PrefetchError:
    error: BaseException


@dataclass
class BatchStream:
    """
    批迭代器；prefetch > 0 时由后台线程组装批次，经有界队列传给训练线程
    """
    dataset: ImageDataset
    batch_size: int
    shuffle_seed: int = None
    epoch: int = 0
    transform: object = None
    prefetch: int = 0
    batches: list = field(init=False)

    def __post_init__(self):
        self.batches = batch_indices(len(self.dataset), self.batch_size, self.shuffle_seed, self.epoch)

    def __len__(self):
        return len(self.batches)

    def _rng(self):
        seed = 0 if self.shuffle_seed is None else self.shuffle_seed
        return np.random.default_rng([seed, self.epoch, 1])

    def __iter__(self):
        if self.prefetch <= 0:
            rng = self._rng()
            for idx in self.batches:
                yield _assemble(self.dataset, idx, self.transform, rng)
            return
        yield from self._prefetched()

    def _prefetched(self):
        buffer = queue.Queue(maxsize=self.prefetch)
        done = object()
        stop = threading.Event()

        def worker():
            rng = self._rng()
            try:
                for idx in self.batches:
                    if stop.is_set():
                        return
                    buffer.put(_assemble(self.dataset, idx, self.transform, rng))
            except Exception as e:
                buffer.put(_PrefetchError(e))
            buffer.put(done)

        thread = threading.Thread(target=worker, name='batch-prefetch', daemon=True)
        thread.start()
        try:
            while True:
                item = buffer.get()
                if item is done:
                    break
                if isinstance(item, _PrefetchError):
                    raise item.error
                yield item
        finally:
            stop.set()
            # 让阻塞在 put 上的后台线程退出
            while thread.is_alive():
                try:
                    buffer.get_nowait()
                except queue.Empty:
                    thread.join(timeout=0.05)


def batch_iter(dataset, batch_size, shuffle_seed=None, epoch=0, transform=None, prefetch=0):
    """
    Args:
        dataset: ImageDataset
        batch_size: 批大小
        shuffle_seed: 洗牌种子，None 表示保持原顺序
        epoch: 当前 epoch（参与洗牌种子）
        transform: (LabeledImage, rng) → LabeledImage
        prefetch: 预取队列长度，0 表示同步

    Returns:
        BatchStream: 逐批产出 (Tensor[B, 3, H, W], labels[B])
    """
    return BatchStream(dataset, batch_size, shuffle_seed, epoch, transform, prefetch)
