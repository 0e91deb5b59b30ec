"""
张量二进制序列化
格式（小端）：魔数 "FTSR" | 版本 u32 | 秩 u32 | 各维 u32×秩 | 类型标记 u32 | 原始数值
"""
import struct

import numpy as np

from core.errors import FormatError

MAGIC = b'FTSR'
VERSION = 1

DTYPE_TAGS = {
    'float32': 1,
    'float64': 2,
}
TAG_DTYPES = {tag: np.dtype(name).newbyteorder('<') for name, tag in DTYPE_TAGS.items()}


def encode_tensor(array):
    """
    编码单个数组

    Args:
        array: numpy 数组（float32 或 float64）

    Returns:
        bytes
    """
    array = np.asarray(array)
    name = array.dtype.name
    if name not in DTYPE_TAGS:
        raise FormatError(f"不支持序列化的元素类型: {name}")
    header = struct.pack('<4sII', MAGIC, VERSION, array.ndim)
    header += struct.pack(f'<{array.ndim}I', *array.shape)
    header += struct.pack('<I', DTYPE_TAGS[name])
    body = np.ascontiguousarray(array, dtype=TAG_DTYPES[DTYPE_TAGS[name]]).tobytes()
    return header + body


def decode_tensor(buffer, offset=0):
    """
    从字节缓冲解码一个数组

    Args:
        buffer: bytes / memoryview
        offset: 起始偏移

    Returns:
        tuple: (array, next_offset)
    """
    try:
        magic, version, rank = struct.unpack_from('<4sII', buffer, offset)
    except struct.error:
        raise FormatError(f"张量头不完整（偏移 {offset}）")
    if magic != MAGIC:
        raise FormatError(f"张量魔数错误: {magic!r}，应为 {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"不支持的张量格式版本: {version}")
    offset += 12
    try:
        dims = struct.unpack_from(f'<{rank}I', buffer, offset)
        (tag,) = struct.unpack_from('<I', buffer, offset + 4 * rank)
    except struct.error:
        raise FormatError(f"张量头不完整（偏移 {offset}）")
    offset += 4 * rank + 4
    if tag not in TAG_DTYPES:
        raise FormatError(f"未知的类型标记: {tag}")
    dtype = TAG_DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buffer):
        raise FormatError(f"张量数据被截断: 需要 {nbytes} 字节，剩余 {len(buffer) - offset} 字节")
    array = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset).reshape(dims)
    return array.astype(dtype.newbyteorder('='), copy=True), offset + nbytes


def save_tensor(path, array):
    with open(path, 'wb') as f:
        f.write(encode_tensor(array))


def load_tensor(path):
    with open(path, 'rb') as f:
        data = f.read()
    array, _ = decode_tensor(data)
    return array
