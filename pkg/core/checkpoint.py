"""
检查点读写
文件格式（小端）：
    魔数 "FVCK" | 版本 u32 | 清单长度 u64 | JSON 清单 | 拼接的张量二进制块

清单记录模型配置、配置指纹、张量名 → (偏移, 长度) 表、优化器元数据、epoch 与随机源状态，
偏移相对于张量区起点；每个张量块使用 core.serialization 的格式
"""
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

from core.errors import ConfigError, FormatError
from core.model_zoo import ModelConfig, build_model
from core.serialization import decode_tensor, encode_tensor
from core.utils import ensure_dir

logger = logging.getLogger(__name__)

MAGIC = b'FVCK'
VERSION = 1
PARAM_PREFIX = 'param.'
OPTIM_PREFIX = 'optim.'


@dataclass
class Checkpoint:
    """
    Attributes:
        config: ModelConfig
        fingerprint: 配置指纹
        params: {参数名: 数组}
        optimizer: 优化器 state_dict（可选）
        epoch: 已完成的 epoch 数
        rng_state: 选择随机源的 bit_generator 状态（可选）
        extra: 训练过程的附加信息（最佳精度、指标路径等）
    """
    config: ModelConfig
    fingerprint: str
    params: OrderedDict
    optimizer: dict = None
    epoch: int = 0
    rng_state: dict = None
    extra: dict = field(default_factory=dict)


def capture(model, optimizer=None, epoch=0, extra=None):
    """从模型（与优化器）构造检查点"""
    return Checkpoint(
        config=model.config,
        fingerprint=model.config.fingerprint(),
        params=model.state_dict(),
        optimizer=optimizer.state_dict() if optimizer is not None else None,
        epoch=epoch,
        rng_state=model.selection_rng.bit_generator.state,
        extra=dict(extra or {}),
    )


def encode_checkpoint(ckpt):
    blobs, table, offset = [], [], 0
    tensors = [(PARAM_PREFIX + name, value) for name, value in ckpt.params.items()]
    optim_meta = None
    if ckpt.optimizer is not None:
        optim_meta = ckpt.optimizer['meta']
        tensors += [(OPTIM_PREFIX + name, value) for name, value in ckpt.optimizer['tensors'].items()]
    for name, value in tensors:
        blob = encode_tensor(value)
        table.append({'name': name, 'offset': offset, 'length': len(blob)})
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        'config': ckpt.config.to_dict(),
        'fingerprint': ckpt.fingerprint,
        'epoch': ckpt.epoch,
        'rng_state': ckpt.rng_state,
        'optimizer': optim_meta,
        'extra': ckpt.extra,
        'tensors': table,
    }
    text = json.dumps(manifest, ensure_ascii=False).encode('utf-8')
    return struct.pack('<4sIQ', MAGIC, VERSION, len(text)) + text + b''.join(blobs)


def decode_checkpoint(buffer):
    try:
        magic, version, length = struct.unpack_from('<4sIQ', buffer, 0)
    except struct.error:
        raise FormatError("检查点文件头不完整")
    if magic != MAGIC:
        raise FormatError(f"检查点魔数错误: {magic!r}，应为 {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"不支持的检查点版本: {version}")
    start = 16
    if start + length > len(buffer):
        raise FormatError("检查点清单被截断")
    try:
        manifest = json.loads(bytes(buffer[start:start + length]).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"检查点清单无法解析: {e}")
    base = start + length

    params, optim_tensors = OrderedDict(), {}
    for entry in manifest['tensors']:
        array, end = decode_tensor(buffer, base + entry['offset'])
        if end - (base + entry['offset']) != entry['length']:
            raise FormatError(f"张量 {entry['name']} 长度与清单不符")
        name = entry['name']
        if name.startswith(PARAM_PREFIX):
            params[name[len(PARAM_PREFIX):]] = array
        elif name.startswith(OPTIM_PREFIX):
            optim_tensors[name[len(OPTIM_PREFIX):]] = array

    config = ModelConfig.from_dict(manifest['config'])
    if config.fingerprint() != manifest['fingerprint']:
        raise FormatError("检查点配置指纹不匹配，文件可能已损坏或被修改")
    optimizer = None
    if manifest.get('optimizer') is not None:
        optimizer = {'meta': manifest['optimizer'], 'tensors': optim_tensors}
    return Checkpoint(config=config, fingerprint=manifest['fingerprint'], params=params,
                      optimizer=optimizer, epoch=manifest.get('epoch', 0),
                      rng_state=manifest.get('rng_state'), extra=manifest.get('extra') or {})


def save_checkpoint(path, model, optimizer=None, epoch=0, extra=None):
    """
    保存检查点

    Args:
        path: 输出文件
        model: FilterViT
        optimizer: AdamW（可选）
        epoch: 已完成的 epoch 数
        extra: 附加信息

    Returns:
        str: 文件路径
    """
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    data = encode_checkpoint(capture(model, optimizer, epoch, extra))
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)
    logger.debug(f"检查点已保存: {path} (epoch={epoch})")
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"检查点不存在: {path}")
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def restore_model(ckpt, seed=0):
    """
    按检查点中的配置重建模型并加载参数与随机源状态

    Returns:
        FilterViT
    """
    if isinstance(ckpt, (str, os.PathLike)):
        ckpt = load_checkpoint(ckpt)
    model = build_model(ckpt.config, seed=seed)
    if model.config.fingerprint() != ckpt.fingerprint:
        raise ConfigError("模型配置与检查点指纹不一致", field='config')
    model.load_state_dict(ckpt.params, strict=True)
    if ckpt.rng_state is not None:
        model.selection_rng.bit_generator.state = ckpt.rng_state
    return model
