"""
神经网络基础层
卷积、通道归一化、线性层、层归一化、多头自注意力、Transformer编码器、倒残差块、分类头

约定：
1. 后接归一化的卷积不带偏置
2. CNN 内的归一化是每通道独立的组归一化（组大小为1），不依赖批统计
3. Transformer 采用 pre-norm 结构，MLP 使用 GELU；倒残差块使用 ReLU6
"""
import logging
from collections import OrderedDict

import numpy as np

from core import functional as F
from core.errors import ConfigError, ContractError, DimensionError
from core.tensor import Tensor, gelu, relu6, softmax

logger = logging.getLogger(__name__)


# ============================================================
# 参数与模块容器
# ============================================================
class Parameter(Tensor):
    """可训练参数；no_decay=True 时优化器不对其做权重衰减"""

    def __init__(self, data, no_decay=False, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.no_decay = no_decay


class Module:
    """
    模块基类：按属性赋值顺序登记参数与子模块，参数名稳定可复现
    """

    def __init__(self):
        object.__setattr__(self, '_parameters', OrderedDict())
        object.__setattr__(self, '_modules', OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=''):
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=''):
        yield prefix.rstrip('.'), self
        for name, module in self._modules.items():
            yield from module.named_modules(prefix=f"{prefix}{name}.")

    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, 'training', mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        """
        加载参数

        Args:
            state: {参数名: 数组}
            strict: 为 True 时参数名必须完全一致
        """
        own = OrderedDict(self.named_parameters())
        if strict:
            missing = [k for k in own if k not in state]
            unexpected = [k for k in state if k not in own]
            if missing or unexpected:
                raise ConfigError(f"参数名不一致: 缺少 {missing[:5]}，多余 {unexpected[:5]}", field='state_dict')
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"参数 {name} 形状不匹配: 期望 {param.shape}，实际 {value.shape}")
            param.data = np.ascontiguousarray(value.astype(param.dtype))
        return self


class ModuleList(Module):

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module):
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, index):
        return list(self._modules.values())[index]


def param_count(module):
    """参数标量总数"""
    return int(sum(p.size for p in module.parameters()))


# ============================================================
# 初始化
# ============================================================
def trunc_normal(rng, shape, std=0.02):
    """截断正态（超过2倍标准差的样本重采）"""
    values = rng.standard_normal(shape)
    bad = np.abs(values) > 2.0
    while bad.any():
        values[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(values) > 2.0
    return values * std


def fan_out_normal(rng, shape):
    """卷积权重：按 fan_out 缩放的正态分布"""
    out_ch, _, kh, kw = shape
    return rng.standard_normal(shape) * np.sqrt(2.0 / (out_ch * kh * kw))


def _rng(rng):
    return rng if rng is not None else np.random.default_rng()


# ============================================================
# 卷积与归一化
# ============================================================
class Conv2d(Module):
    """
    二维卷积
    weight: (out_ch, in_ch/groups, kh, kw)，bias 可选
    """

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=None, groups=1,
                 bias=False, rng=None):
        super().__init__()
        if groups < 1 or in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} 必须整除 in_ch={in_ch} 与 out_ch={out_ch}", field='groups')
        rng = _rng(rng)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.groups = kernel_size, stride, groups
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(fan_out_normal(rng, (out_ch, in_ch // groups, kernel_size, kernel_size)))
        if bias:
            self.bias = Parameter(np.zeros(out_ch))
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ChannelNorm(Module):
    """每通道组归一化（组大小1），带缩放与平移"""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels), no_decay=True)
        self.bias = Parameter(np.zeros(channels), no_decay=True)

    def forward(self, x):
        return F.instance_norm(x, self.weight, self.bias, self.eps)


class ConvNorm(Module):
    """卷积（无偏置）→ 通道归一化 → 可选 ReLU6"""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, groups=1, act=True, rng=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel_size, stride=stride, groups=groups, rng=rng)
        self.norm = ChannelNorm(out_ch)
        self.act = act

    def forward(self, x):
        x = self.norm(self.conv(x))
        return relu6(x) if self.act else x


# ============================================================
# 线性层与 Transformer
# ============================================================
class Linear(Module):
    """weight: (in_features, out_features)"""

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim), no_decay=True)
        self.bias = Parameter(np.zeros(dim), no_decay=True)

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadSelfAttention(Module):
    """
    多头自注意力
    每个头: softmax(Q_h K_h^T / sqrt(C/heads)) V_h，拼接后做输出投影

    record_attention=True 时把最近一次的注意力权重保存在 last_attention，供检查
    """

    def __init__(self, dim, heads, rng=None):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model_dim={dim} 不能被 heads={heads} 整除", field='heads')
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.record_attention = False
        self.last_attention = None

    def forward(self, x):
        batch, tokens, channels = x.shape
        if tokens == 0:
            raise ContractError("注意力输入为空选择（K=0）")
        if channels != self.dim:
            raise DimensionError(f"token 维度 {channels} 与 model_dim={self.dim} 不一致")
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = softmax((q @ k.transpose(-1, -2)) * self.scale, axis=-1)
        if self.record_attention:
            self.last_attention = attn.data.copy()
        out = (attn @ v).permute(0, 2, 1, 3).reshape(batch, tokens, channels)
        return self.proj(out)


class TransformerEncoderLayer(Module):
    """pre-norm: x + MHSA(LN(x))，再 x + MLP(LN(x))"""

    def __init__(self, dim, heads, mlp_ratio=2, rng=None):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def attention_block(self, x):
        return x + self.attn(self.norm1(x))

    def mlp_block(self, x):
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))

    def forward(self, x):
        return self.mlp_block(self.attention_block(x))


class TransformerEncoder(Module):
    """depth 层 pre-norm 编码器；depth=0 时为恒等映射"""

    def __init__(self, dim, depth, heads, mlp_ratio=2, rng=None):
        super().__init__()
        self.dim, self.depth, self.heads, self.mlp_ratio = dim, depth, heads, mlp_ratio
        if dim % heads:
            raise ConfigError(f"model_dim={dim} 不能被 heads={heads} 整除", field='heads')
        self.layers = ModuleList(TransformerEncoderLayer(dim, heads, mlp_ratio, rng=rng) for _ in range(depth))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# ============================================================
# 倒残差块与分类头
# ============================================================
class InvertedResidual(Module):
    """
    扩张(1x1) → 深度卷积(3x3) → 投影(1x1)
    stride==1 且 in_ch==out_ch 时加残差连接
    """

    def __init__(self, in_ch, out_ch, expand_ratio=2, stride=1, rng=None):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"倒残差块 stride 只能为1或2，实际: {stride}", field='stride')
        hidden = in_ch * expand_ratio
        self.in_ch, self.out_ch, self.stride, self.hidden = in_ch, out_ch, stride, hidden
        self.use_residual = stride == 1 and in_ch == out_ch
        self.expand = ConvNorm(in_ch, hidden, 1, rng=rng)
        self.depthwise = ConvNorm(hidden, hidden, 3, stride=stride, groups=hidden, rng=rng)
        self.project = ConvNorm(hidden, out_ch, 1, act=False, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise DimensionError(f"倒残差块输入通道 {x.shape[1]} 与 in_ch={self.in_ch} 不一致")
        out = self.project(self.depthwise(self.expand(x)))
        return x + out if self.use_residual else out


class ClassifierHead(Module):
    """全局平均池化 + 线性分类"""

    def __init__(self, in_ch, num_classes, rng=None):
        super().__init__()
        self.fc = Linear(in_ch, num_classes, rng=rng)

    def forward(self, x):
        return self.fc(x.mean(axis=(2, 3)))
