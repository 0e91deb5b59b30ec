"""
张量核心模块
提供稠密张量存储、逐元素/矩阵运算，以及基于计算磁带（tape）的反向模式自动微分

设计要点：
1. 每个可微运算是一个 Function 子类，forward/backward 直接操作 numpy 数组
2. 前向执行时把节点按执行顺序记录到当前执行上下文的磁带上，执行顺序即拓扑序
3. backward() 逆序回放磁带，每个节点恰好访问一次，回放结束后清空磁带释放中间结果
4. 广播只允许单例维度扩展（以及左侧补1），其余形状组合一律报维度错误
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

from core.errors import ContractError, DimensionError, SelectionIndexError

logger = logging.getLogger(__name__)

DTYPES = {
    'float32': np.float32,
    'float64': np.float64,
}

_default_dtype = np.float64


def set_default_dtype(name):
    """
    设置进程级默认元素类型

    Args:
        name: 'float32' 或 'float64'（也接受 numpy dtype）
    """
    global _default_dtype
    key = np.dtype(name).name
    if key not in DTYPES:
        raise ContractError(f"不支持的元素类型: {name}，可选: {list(DTYPES)}")
    _default_dtype = DTYPES[key]
    logger.debug(f"默认元素类型切换为 {key}")


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(name):
    """临时切换默认元素类型"""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


class ComputationTape:
    """
    计算磁带：按执行顺序记录可微运算节点
    同一条磁带只属于一个执行上下文（线程），不得跨并发上下文共享
    """

    def __init__(self):
        self._nodes = []

    def record(self, node):
        self._nodes.append(node)

    @property
    def nodes(self):
        return tuple(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        """清空磁带并释放节点持有的中间结果"""
        for node in self._nodes:
            node.release()
        self._nodes = []


class _ExecutionContext(threading.local):
    """线程局部的执行上下文：磁带 + 是否记录梯度"""

    def __init__(self):
        self.tape = ComputationTape()
        self.grad_enabled = True


_context = _ExecutionContext()


def current_tape():
    return _context.tape


def is_grad_enabled():
    return _context.grad_enabled


@contextmanager
def no_grad():
    """在该上下文内执行的运算不记录到磁带"""
    previous = _context.grad_enabled
    _context.grad_enabled = False
    try:
        yield
    finally:
        _context.grad_enabled = previous


class Tensor:
    """
    稠密 n 维实数张量

    Attributes:
        data: 连续存储的 numpy 数组
        requires_grad: 是否参与梯度计算
        grad: 与 data 同形状的梯度缓冲，backward 之后填充
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        array = np.asarray(data)
        target = DTYPES[np.dtype(dtype).name] if dtype is not None else _default_dtype
        if array.dtype != target:
            array = array.astype(target)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._creator = None

    @classmethod
    def _wrap(cls, array, requires_grad=False, creator=None):
        """包装运算结果，不做类型转换"""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._creator = creator
        return out

    # ---------- 基本属性 ----------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._creator is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # ---------- 运算符 ----------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    # ---------- 便捷方法 ----------
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def transpose(self, axis1=-2, axis2=-1):
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return Permute.apply(self, axes=tuple(axes))

    def sigmoid(self):
        return Sigmoid.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def as_tensor(value, like=None):
    """把标量/数组转换为不需要梯度的张量，元素类型跟随 like"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad=False, dtype=None):
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


def ones_like(x):
    return Tensor(np.ones_like(x.data), dtype=x.dtype)


class Function:
    """
    可微运算基类

    子类实现 forward(*arrays, **kwargs) 与 backward(grad)，
    backward 返回与输入一一对应的梯度数组（不需要梯度的位置可返回 None）
    """

    def __init__(self, *inputs):
        self.inputs = inputs
        self.output = None

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def release(self):
        self.__dict__.clear()

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(t, like=_first_tensor(inputs)) for t in inputs)
        fn = cls(*inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if not requires_grad:
            return Tensor._wrap(out_data)
        out = Tensor._wrap(out_data, requires_grad=True, creator=fn)
        fn.output = out
        _context.tape.record(fn)
        return out


def _first_tensor(values):
    for value in values:
        if isinstance(value, Tensor):
            return value
    return None


def backward(loss):
    """
    反向传播：逆序回放当前磁带，填充所有可达 requires_grad 张量的 grad

    叶子张量的 grad 会累加（多次 backward 之间需手动清零），
    中间张量的 grad 为本次回放的结果。回放结束后清空磁带。

    Args:
        loss: 标量张量
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward 需要 Tensor 类型的损失")
    if loss.data.size != 1:
        raise ContractError(f"backward 需要标量损失，实际形状: {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("损失不依赖任何 requires_grad 张量")

    tape = _context.tape
    if len(tape) == 0:
        raise ContractError("计算磁带为空，无法反向传播")

    grads = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        loss.grad = grads[id(loss)]

    for node in reversed(tape.nodes):
        out = node.output
        grad = grads.pop(id(out), None)
        if grad is None:
            continue
        out.grad = grad
        input_grads = node.backward(grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g

    tape.clear()


# ============================================================
# 广播
# ============================================================
def broadcast_shapes(a_shape, b_shape):
    """
    只允许单例维度扩展（秩不同则左侧补1）

    Raises:
        DimensionError: 形状无法广播
    """
    if a_shape == b_shape:
        return tuple(a_shape)
    rank = max(len(a_shape), len(b_shape))
    a_full = (1,) * (rank - len(a_shape)) + tuple(a_shape)
    b_full = (1,) * (rank - len(b_shape)) + tuple(b_shape)
    out = []
    for da, db in zip(a_full, b_full):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"形状无法广播: {tuple(a_shape)} 与 {tuple(b_shape)}")
    return tuple(out)


def unbroadcast(grad, shape):
    """把广播后的梯度求和还原到原始形状"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ============================================================
# 逐元素运算
# ============================================================
class _Binary(Function):

    def _check(self, a, b):
        broadcast_shapes(a.shape, b.shape)
        self.a_shape, self.b_shape = a.shape, b.shape


class Add(_Binary):

    def forward(self, a, b):
        self._check(a, b)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.a_shape), unbroadcast(grad, self.b_shape)


class Sub(_Binary):

    def forward(self, a, b):
        self._check(a, b)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.a_shape), unbroadcast(-grad, self.b_shape)


class Mul(_Binary):

    def forward(self, a, b):
        self._check(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a_shape), unbroadcast(grad * self.a, self.b_shape)


class Div(_Binary):

    def forward(self, a, b):
        self._check(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a_shape), unbroadcast(gb, self.b_shape)


class Neg(Function):

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Sigmoid(Function):

    def forward(self, x):
        # 按符号分段，避免 exp 溢出
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """tanh 近似的 GELU"""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Relu6(Function):

    def forward(self, x):
        self.mask = (x > 0) & (x < 6)
        return np.clip(x, 0, 6)

    def backward(self, grad):
        return (grad * self.mask,)


class Exp(Function):

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def sigmoid(x):
    return Sigmoid.apply(x)


def gelu(x):
    return Gelu.apply(x)


def relu6(x):
    return Relu6.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


ELEMENTWISE_OPS = {
    'add': add,
    'mul': mul,
    'sigmoid': sigmoid,
    'gelu': gelu,
    'relu6': relu6,
    'exp': exp,
    'log': log,
}


def elementwise(op, *args):
    """
    按名称分派逐元素运算

    Args:
        op: add / mul / sigmoid / gelu / relu6 / exp / log
        *args: 运算对象
    """
    if op not in ELEMENTWISE_OPS:
        raise ContractError(f"未知的逐元素运算: {op}")
    return ELEMENTWISE_OPS[op](*args)


# ============================================================
# 矩阵乘法与 softmax
# ============================================================
class MatMul(Function):
    """
    矩阵乘法，支持：二维 × 二维、批量 × 二维、同批量维度的批量 × 批量
    """

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"矩阵乘法内维不匹配: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"矩阵乘法批量维不匹配: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return ga, gb


def matmul(a, b):
    return MatMul.apply(a, b)


class Softmax(Function):

    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax 轴 {axis} 超出范围，张量秩为 {x.ndim}")
    return Softmax.apply(x, axis=axis)


# ============================================================
# 形状与归约
# ============================================================
class Sum(Function):

    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, _normalize_axes(self.axis, len(self.shape)))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):

    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        kept = np.asarray(x.mean(axis=axis, keepdims=True))
        self.count = x.size // kept.size
        return kept if keepdims else np.asarray(x.mean(axis=axis))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, _normalize_axes(self.axis, len(self.shape)))
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


def _normalize_axes(axis, ndim):
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


class Reshape(Function):

    def forward(self, x, shape=None):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"无法把形状 {x.shape} 变换为 {shape}")

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):

    def forward(self, x, axes=None):
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
            raise DimensionError(f"非法的轴排列 {axes}，张量秩为 {x.ndim}")
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort([a % grad.ndim for a in self.axes])),)


class GetItem(Function):

    def forward(self, x, key=None):
        self.shape, self.key, self.dtype = x.shape, key, x.dtype
        return np.array(x[key])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.key, grad)
        return (out,)


# ============================================================
# 收集 / 回写（FilterAttention 的 token 提取与写回）
# ============================================================
def check_selection(indices, batch, positions):
    """
    校验每个样本的索引：长度一致、范围 [0, positions)、样本内不重复

    Args:
        indices: SelectionIndex 或形状 (B, K) 的整数数组
        batch: 批大小
        positions: 空间位置总数 H*W

    Returns:
        np.ndarray: (B, K) int64
    """
    idx = np.asarray(getattr(indices, 'positions', indices))
    if idx.ndim != 2 or idx.shape[0] != batch:
        raise SelectionIndexError(f"选择索引形状应为 ({batch}, K)，实际: {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise SelectionIndexError(f"选择索引必须为整数，实际类型: {idx.dtype}")
    idx = idx.astype(np.int64)
    bad = (idx < 0) | (idx >= positions)
    if bad.any():
        sample, col = np.argwhere(bad)[0]
        value = int(idx[sample, col])
        raise SelectionIndexError(
            f"样本 {sample} 的索引 {value} 越界，合法范围 [0, {positions})",
            sample=int(sample), value=value)
    ordered = np.sort(idx, axis=1)
    dup = ordered[:, 1:] == ordered[:, :-1]
    if dup.any():
        sample, col = np.argwhere(dup)[0]
        value = int(ordered[sample, col])
        raise SelectionIndexError(
            f"样本 {sample} 的索引 {value} 重复",
            sample=int(sample), value=value)
    return idx


class Gather(Function):
    """(B, C, H, W) → (B, K, C)"""

    def forward(self, x, indices=None):
        b, c = x.shape[:2]
        flat = x.reshape(b, c, -1)
        idx = check_selection(indices, b, flat.shape[2])
        self.shape, self.dtype = x.shape, x.dtype
        self.idx = np.broadcast_to(idx[:, None, :], (b, c, idx.shape[1]))
        return np.take_along_axis(flat, self.idx, axis=2).transpose(0, 2, 1)

    def backward(self, grad):
        b, c = self.shape[:2]
        out = np.zeros((b, c, int(np.prod(self.shape[2:]))), dtype=self.dtype)
        np.put_along_axis(out, self.idx, grad.transpose(0, 2, 1), axis=2)
        return (out.reshape(self.shape),)


class Scatter(Function):
    """把 (B, K, C) 的 token 写回 (B, C, H, W) 的对应位置"""

    def forward(self, x, tokens, indices=None, mode='replace'):
        b, c = x.shape[:2]
        flat = x.reshape(b, c, -1).copy()
        idx = check_selection(indices, b, flat.shape[2])
        if tokens.shape != (b, idx.shape[1], c):
            raise DimensionError(f"token 形状应为 {(b, idx.shape[1], c)}，实际: {tokens.shape}")
        if mode not in ('replace', 'add'):
            raise ContractError(f"未知的回写模式: {mode}")
        self.shape, self.mode = x.shape, mode
        self.idx = np.broadcast_to(idx[:, None, :], (b, c, idx.shape[1]))
        values = tokens.transpose(0, 2, 1)
        if mode == 'add':
            values = np.take_along_axis(flat, self.idx, axis=2) + values
        np.put_along_axis(flat, self.idx, values, axis=2)
        return flat.reshape(x.shape)

    def backward(self, grad):
        b, c = self.shape[:2]
        flat = grad.reshape(b, c, -1)
        g_tokens = np.take_along_axis(flat, self.idx, axis=2).transpose(0, 2, 1)
        g_x = flat.copy()
        if self.mode == 'replace':
            np.put_along_axis(g_x, self.idx, 0.0, axis=2)
        return g_x.reshape(self.shape), g_tokens


def gather(x, indices):
    return Gather.apply(x, indices=indices)


def scatter(x, tokens, indices, mode='replace'):
    return Scatter.apply(x, tokens, indices=indices, mode=mode)


def gather_scatter(x, indices, mode='gather', tokens=None, scatter_mode='replace'):
    """
    收集/回写统一入口

    Args:
        x: 特征图 (B, C, H, W)
        indices: SelectionIndex 或 (B, K) 整数数组
        mode: 'gather' 或 'scatter'
        tokens: scatter 模式下写回的 (B, K, C) token
        scatter_mode: 'replace'（默认，逐位置替换）或 'add'
    """
    if mode == 'gather':
        return gather(x, indices)
    if mode == 'scatter':
        if tokens is None:
            raise ContractError("scatter 模式需要提供 tokens")
        return scatter(x, tokens, indices, mode=scatter_mode)
    raise ContractError(f"未知的 gather_scatter 模式: {mode}")


class TakeRows(Function):
    """按 (B, K) 索引取表的行：(N, C) → (B, K, C)，用于位置编码查表"""

    def forward(self, table, indices=None):
        self.idx = np.asarray(getattr(indices, 'positions', indices), dtype=np.int64)
        self.shape, self.dtype = table.shape, table.dtype
        return table[self.idx]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.idx, grad)
        return (out,)


def take_rows(table, indices):
    return TakeRows.apply(table, indices=indices)
