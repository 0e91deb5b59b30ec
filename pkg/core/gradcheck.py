"""
有限差分梯度校验
中心差分（默认步长 1e-5）对比自动微分结果，误差按范数相对误差计算
"""
import logging

import numpy as np

from core.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def relative_error(analytic, numeric, floor=1e-10):
    """
    ||a - n|| / max(||a||, ||n||)，两者都接近0时退化为绝对误差
    """
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(diff)
    return float(diff / scale)


def numerical_gradient(fn, tensor, eps=1e-5):
    """
    对 tensor 的每个元素做中心差分

    Args:
        fn: 无参可调用对象，返回标量张量
        tensor: 被扰动的张量（原地修改 data，结束后恢复）
        eps: 差分步长

    Returns:
        np.ndarray: 与 tensor 同形状的数值梯度
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(fn().data)
            flat[i] = original - eps
            minus = float(fn().data)
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def analytic_gradients(fn, tensors):
    """执行一次前向+反向，返回各张量的梯度副本"""
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def gradcheck(fn, tensors, eps=1e-5, tol=1e-4):
    """
    校验 fn 对 tensors 的梯度

    Args:
        fn: 无参可调用对象，返回标量张量
        tensors: 需要校验的 requires_grad 张量列表
        eps: 差分步长
        tol: 允许的相对误差

    Returns:
        tuple: (是否通过, 每个张量的相对误差列表)
    """
    tensors = list(tensors)
    analytic = analytic_gradients(fn, tensors)
    errors = []
    for t, a in zip(tensors, analytic):
        n = numerical_gradient(fn, t, eps)
        errors.append(relative_error(a, n))
    passed = all(e < tol for e in errors)
    if not passed:
        names = [t.name or f"#{i}" for i, t in enumerate(tensors)]
        logger.warning(f"梯度校验未通过: {dict(zip(names, errors))}")
    return passed, errors


def random_tensor(rng, shape, scale=1.0, requires_grad=True, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, name=name)
