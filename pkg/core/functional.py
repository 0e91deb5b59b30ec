"""
神经网络函数式算子
卷积、池化、最近邻上采样、归一化、交叉熵等带解析梯度的运算
卷积按卷积核偏移量逐项累加（kh*kw 次向量化运算），不展开 im2col 矩阵，
这样反向传播只需保存填充后的输入
"""
import numpy as np

from core.errors import ContractError, DimensionError
from core.tensor import Function, matmul


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class Conv2dFn(Function):
    """
    二维互相关（分组卷积）
    输入 x: (B, C, H, W)，权重 w: (O, C/groups, kh, kw)，可选偏置 b: (O,)
    """

    def forward(self, x, w, *bias, stride=1, padding=0, groups=1):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d 需要4维输入与权重，实际: {x.shape}, {w.shape}")
        batch, channels, height, width = x.shape
        out_ch, group_ch, kh, kw = w.shape
        if groups < 1 or channels % groups or out_ch % groups:
            raise DimensionError(f"groups={groups} 必须同时整除输入通道 {channels} 与输出通道 {out_ch}")
        if channels != group_ch * groups:
            raise DimensionError(
                f"conv2d 通道不匹配: 输入 {x.shape} 与权重 {w.shape} (groups={groups})")
        ho = conv_output_size(height, kh, stride, padding)
        wo = conv_output_size(width, kw, stride, padding)
        if ho <= 0 or wo <= 0:
            raise DimensionError(
                f"空间尺寸 {height}x{width} 小于卷积核 {kh}x{kw}（padding={padding}）")

        self.stride, self.padding, self.groups = stride, padding, groups
        self.x_shape, self.out_hw, self.has_bias = x.shape, (ho, wo), bool(bias)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp, self.w = xp, w

        out = np.zeros((batch, out_ch, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = self._patch(xp, i, j)
                out += self._mix(patch, w[:, :, i, j])
        if bias:
            out += bias[0][None, :, None, None]
        return out

    def _patch(self, xp, i, j):
        ho, wo = self.out_hw
        s = self.stride
        return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    def _depthwise(self, w):
        return self.groups == self.x_shape[1] and w.shape[0] == self.groups and w.shape[1] == 1

    def _mix(self, patch, w_ij):
        """patch: (B, C, ho, wo)，w_ij: (O, C/g) → (B, O, ho, wo)"""
        if self._depthwise(w_ij[:, :, None, None]):
            return patch * w_ij[:, 0][None, :, None, None]
        b, c, ho, wo = patch.shape
        g = self.groups
        pg = patch.reshape(b, g, c // g, ho, wo)
        wg = w_ij.reshape(g, -1, c // g)
        return np.einsum('bgchw,goc->bgohw', pg, wg, optimize=True).reshape(b, -1, ho, wo)

    def backward(self, grad):
        xp, w, g = self.xp, self.w, self.groups
        batch, channels = self.x_shape[:2]
        out_ch, group_ch, kh, kw = w.shape
        ho, wo = self.out_hw
        s, p = self.stride, self.padding
        depthwise = self._depthwise(w)

        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        gg = grad.reshape(batch, g, out_ch // g, ho, wo)
        for i in range(kh):
            for j in range(kw):
                patch = self._patch(xp, i, j)
                if depthwise:
                    gw[:, 0, i, j] = (patch * grad).sum(axis=(0, 2, 3))
                    contrib = grad * w[:, 0, i, j][None, :, None, None]
                else:
                    pg = patch.reshape(batch, g, group_ch, ho, wo)
                    gw[:, :, i, j] = np.einsum(
                        'bgchw,bgohw->goc', pg, gg, optimize=True).reshape(out_ch, group_ch)
                    wg = w[:, :, i, j].reshape(g, out_ch // g, group_ch)
                    contrib = np.einsum(
                        'bgohw,goc->bgchw', gg, wg, optimize=True).reshape(batch, channels, ho, wo)
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib

        gx = gxp[:, :, p:p + self.x_shape[2], p:p + self.x_shape[3]] if p else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2dFn.apply(*inputs, stride=stride, padding=padding, groups=groups)


class AvgPool2dFn(Function):

    def forward(self, x, window=2, stride=None):
        stride = stride or window
        height, width = x.shape[2:]
        if window > height or window > width:
            raise DimensionError(f"池化窗口 {window} 大于空间尺寸 {height}x{width}")
        ho = (height - window) // stride + 1
        wo = (width - window) // stride + 1
        self.shape, self.window, self.stride, self.out_hw = x.shape, window, stride, (ho, wo)
        out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
        for i in range(window):
            for j in range(window):
                out += x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
        return out / (window * window)

    def backward(self, grad):
        k, s = self.window, self.stride
        ho, wo = self.out_hw
        gx = np.zeros(self.shape, dtype=grad.dtype)
        share = grad / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += share
        return (gx,)


def avg_pool2d(x, window, stride=None):
    return AvgPool2dFn.apply(x, window=window, stride=stride)


class UpsampleNearestFn(Function):

    def forward(self, x, factor=2):
        self.factor = factor
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, grad):
        b, c, h, w = grad.shape
        f = self.factor
        return (grad.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


def upsample_nearest(x, factor):
    return UpsampleNearestFn.apply(x, factor=factor)


class NormalizeFn(Function):
    """沿给定轴标准化为均值0、方差1（不含仿射）"""

    def forward(self, x, axes=(-1,), eps=1e-5):
        self.axes = axes
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv
        return self.xhat

    def backward(self, grad):
        xhat, axes = self.xhat, self.axes
        g_mean = grad.mean(axis=axes, keepdims=True)
        gx_mean = (grad * xhat).mean(axis=axes, keepdims=True)
        return (self.inv * (grad - g_mean - xhat * gx_mean),)


def normalize(x, axes=(-1,), eps=1e-5):
    return NormalizeFn.apply(x, axes=tuple(axes), eps=eps)


def layer_norm(x, weight, bias, eps=1e-5):
    """最后一维标准化后做仿射"""
    return normalize(x, (-1,), eps) * weight + bias


def instance_norm(x, weight, bias, eps=1e-5):
    """每通道独立的组归一化（组大小为1），与批统计无关"""
    channels = x.shape[1]
    return (normalize(x, (2, 3), eps) * weight.reshape(1, channels, 1, 1)
            + bias.reshape(1, channels, 1, 1))


def linear(x, weight, bias=None):
    """weight 形状 (in_features, out_features)"""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear 输入维度 {x.shape} 与权重 {weight.shape} 不匹配")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


class CrossEntropyFn(Function):
    """均值归约的交叉熵，无标签平滑"""

    def forward(self, logits, labels=None):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise DimensionError(f"交叉熵需要 (B, N) logits 与 (B,) 标签，实际: {logits.shape}, {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ContractError(f"标签超出类别范围 [0, {logits.shape[1]})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - logsum
        self.probs = np.exp(log_probs)
        self.labels = labels
        return np.asarray(-log_probs[np.arange(len(labels)), labels].mean())

    def backward(self, grad):
        g = self.probs.copy()
        g[np.arange(len(self.labels)), self.labels] -= 1.0
        return (g * (grad / len(self.labels)),)


def cross_entropy(logits, labels):
    return CrossEntropyFn.apply(logits, labels=labels)
