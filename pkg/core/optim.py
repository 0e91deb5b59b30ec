"""
优化器与学习率调度
AdamW（解耦权重衰减）+ 按 epoch 步进的余弦退火

默认超参数：β1=0.9, β2=0.999, ε=1e-8, weight_decay=0.01,
初始学习率 5e-4，退火到 1e-5
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from core.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """
    AdamW 状态

    Attributes:
        m, v: 一阶 / 二阶矩，与参数一一对应
        step: 已执行的步数 t
    """
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adamw_step(params, grads, state, lr, decay_mask=None):
    """
    函数式 AdamW 单步

    w ← (w − lr·m̂/(√v̂+ε)) − lr·wd·w，自适应项与权重衰减互相独立

    Args:
        params: 参数数组列表
        grads: 梯度数组列表（None 视为全零）
        state: AdamWState，原地更新矩与步数
        lr: 学习率
        decay_mask: 每个参数是否做权重衰减，默认全部衰减

    Returns:
        tuple: (新参数列表, state)
    """
    if lr < 0:
        raise ContractError(f"学习率不能为负: {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(f"参数、梯度与优化器状态数量不一致: {len(params)}, {len(grads)}, {len(state.m)}")
    decay_mask = [True] * len(params) if decay_mask is None else list(decay_mask)

    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    decay = lr * state.weight_decay

    updated = []
    for i, (w, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(w) if g is None else g
        if g.shape != w.shape or state.m[i].shape != w.shape:
            raise ContractError(f"第 {i} 个参数形状 {w.shape} 与梯度 {g.shape} / 状态 {state.m[i].shape} 不一致")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        new_w = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if decay_mask[i] and decay:
            new_w = new_w - decay * w
        updated.append(new_w.astype(w.dtype, copy=False))
    state.step = t
    return updated, state


class AdamW:
    """
    面向模块参数的 AdamW

    Args:
        params: Module（取 named_parameters）或 (名称, 参数) / 参数 的可迭代对象
        lr: 默认学习率
        betas, eps, weight_decay: 超参数

    no_decay=True 的参数（归一化缩放/平移、位置编码表）不做权重衰减
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if hasattr(params, 'named_parameters'):
            named = list(params.named_parameters())
        else:
            named = [item if isinstance(item, tuple) else (item.name or f"param_{i}", item)
                     for i, item in enumerate(params)]
        if lr < 0 or weight_decay < 0 or eps <= 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ConfigError(f"非法的 AdamW 超参数: lr={lr}, betas={betas}, eps={eps}, wd={weight_decay}",
                              field='optimizer')
        self.names = [name for name, _ in named]
        self.params = [p for _, p in named]
        self.lr = lr
        self.decay_mask = [not getattr(p, 'no_decay', False) for p in self.params]
        self.state = AdamWState.zeros_like([p.data for p in self.params], beta1=betas[0], beta2=betas[1],
                                           eps=eps, weight_decay=weight_decay)

    @property
    def step_count(self):
        return self.state.step

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        new_values, _ = adamw_step([p.data for p in self.params], [p.grad for p in self.params],
                                   self.state, lr, self.decay_mask)
        for p, value in zip(self.params, new_values):
            p.data = value

    def state_dict(self):
        """
        Returns:
            dict: {'meta': 可JSON化的超参数与步数, 'tensors': {名称: 数组}}
        """
        s = self.state
        tensors = {}
        for name, m, v in zip(self.names, s.m, s.v):
            tensors[f"m.{name}"] = m.copy()
            tensors[f"v.{name}"] = v.copy()
        meta = dict(step=s.step, lr=self.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps,
                    weight_decay=s.weight_decay, names=list(self.names))
        return {'meta': meta, 'tensors': tensors}

    def load_state_dict(self, payload):
        meta, tensors = payload['meta'], payload['tensors']
        if list(meta['names']) != self.names:
            raise ConfigError("优化器状态的参数名与当前模型不一致", field='optimizer')
        s = self.state
        s.step, s.beta1, s.beta2 = int(meta['step']), meta['beta1'], meta['beta2']
        s.eps, s.weight_decay = meta['eps'], meta['weight_decay']
        self.lr = meta['lr']
        for i, (name, p) in enumerate(zip(self.names, self.params)):
            m, v = np.asarray(tensors[f"m.{name}"]), np.asarray(tensors[f"v.{name}"])
            if m.shape != p.shape or v.shape != p.shape:
                raise ContractError(f"优化器状态 {name} 形状 {m.shape} 与参数 {p.shape} 不一致")
            s.m[i], s.v[i] = m.astype(p.dtype), v.astype(p.dtype)
        return self


@dataclass(frozen=True)
class CosineSchedule:
    eta_max: float = 5e-4
    eta_min: float = 1e-5
    t_max: int = 120

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ConfigError(f"eta_min={self.eta_min} 大于 eta_max={self.eta_max}", field='eta_min')
        if self.t_max < 1:
            raise ConfigError(f"t_max 必须 ≥ 1，实际: {self.t_max}", field='t_max')

    def __call__(self, epoch):
        return cosine_lr(self, epoch)


def cosine_lr(schedule, epoch):
    """
    余弦退火学习率，按 epoch 步进

    写成 η_min·(1−w) + η_max·w（w = ½(1+cos(π·epoch/T_max))），
    端点 epoch=0 与 epoch=T_max 处精确等于 η_max 与 η_min
    """
    if not 0 <= epoch <= schedule.t_max:
        raise ContractError(f"epoch={epoch} 超出范围 [0, {schedule.t_max}]")
    w = 0.5 * (1.0 + math.cos(math.pi * epoch / schedule.t_max))
    return schedule.eta_min * (1.0 - w) + schedule.eta_max * w
