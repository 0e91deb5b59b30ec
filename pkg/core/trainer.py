"""
训练与评估
前向 → 交叉熵 → 反向 → AdamW（按 epoch 余弦退火），每个 epoch 验证一次，
写指标 CSV / JSON 摘要，保存最佳与最后检查点；以及 FilterViT vs DropoutViT 消融对比
"""
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.checkpoint import load_checkpoint, save_checkpoint
from core.data_pipeline import (
    AugmentationPolicy, batch_iter, load_cifar10_binary, load_cifar10_dir, make_eval_transform,
    make_train_transform, random_class_subset, synth_dataset,
)
from core.errors import ConfigError, ContractError, TrainingDivergedError
from core.functional import cross_entropy
from core.model_zoo import ModelConfig, build_model, reference_config
from core.optim import AdamW, CosineSchedule, cosine_lr
from core.reporting import ablation_chart, training_curves_chart
from core.tensor import backward, current_tape, no_grad
from core.utils import ensure_dir, format_duration

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'train_loss', 'train_acc', 'val_loss', 'val_acc', 'lr', 'seconds']
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'


# ============================================================
# 配置
# ============================================================
@dataclass
class DatasetSpec:
    """
    Attributes:
        kind: 'synthetic' 或 'cifar10'
        path: CIFAR-10 二进制文件或 cifar-10-batches-bin 目录
        val_path: 单独的验证文件（可选，否则从训练集划分）
        num_classes: 合成数据集的类别数
        train_size, val_size: 合成数据集（或划分）的样本数
        seed: 数据生成与划分的种子
        class_subset: 只使用随机挑选的若干类别
        limit: 训练集截断（调试用）
    """
    kind: str = 'synthetic'
    path: str = None
    val_path: str = None
    num_classes: int = 4
    train_size: int = 2000
    val_size: int = 400
    seed: int = 0
    class_subset: int = None
    limit: int = None

    def __post_init__(self):
        if self.kind not in ('synthetic', 'cifar10'):
            raise ConfigError(f"未知的数据集类型: {self.kind}", field='data.kind')
        if self.kind == 'cifar10' and not self.path:
            raise ConfigError("cifar10 数据集需要 path", field='data.path')


@dataclass
class TrainRunConfig:
    model: ModelConfig = field(default_factory=lambda: reference_config('filter', num_classes=4))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t_max: int = None
    seed: int = 0
    augmentation: dict = None
    eval_resize: int = None
    prefetch: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.data, dict):
            try:
                self.data = DatasetSpec(**self.data)
            except TypeError as e:
                raise ConfigError(f"数据集配置字段错误: {e}", field='data')
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ConfigError(f"epochs 必须 ≥ 1，实际: {self.epochs}", field='epochs')
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 ≥ 1，实际: {self.batch_size}", field='batch_size')
        if self.schedule_length < self.epochs - 1:
            raise ConfigError(f"t_max={self.t_max} 小于训练 epoch 数", field='t_max')

    @property
    def schedule_length(self):
        return self.t_max if self.t_max is not None else self.epochs

    @property
    def schedule(self):
        return CosineSchedule(eta_max=self.lr, eta_min=self.min_lr, t_max=self.schedule_length)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in payload:
            if key not in known:
                raise ConfigError(f"TrainRunConfig 未知字段: {key}", field=key)
        return cls(**payload)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed)


# ============================================================
# 数据
# ============================================================
def load_datasets(spec, image_size=64):
    """
    按数据集配置加载 (训练集, 验证集)

    Args:
        spec: DatasetSpec
        image_size: 合成数据集的图像边长
    """
    if spec.kind == 'synthetic':
        data = synth_dataset(spec.num_classes, spec.train_size + spec.val_size, spec.seed, size=image_size)
        if spec.class_subset:
            data = random_class_subset(data, spec.class_subset, spec.seed)
        return data.split(spec.val_size, seed=spec.seed)
    if os.path.isdir(spec.path):
        train = load_cifar10_dir(spec.path, train=True)
        try:
            val = load_cifar10_dir(spec.path, train=False)
        except FileNotFoundError:
            val = None
    else:
        train = load_cifar10_binary(spec.path)
        val = None
    if spec.val_path:
        val = load_cifar10_binary(spec.val_path)
    if val is None:
        train, val = train.split(min(spec.val_size, len(train) // 5), seed=spec.seed)
    if spec.class_subset:
        classes = np.sort(np.random.default_rng(spec.seed).choice(train.num_classes, spec.class_subset,
                                                                  replace=False))
        train, val = train.select_classes(classes), val.select_classes(classes)
    return train, val


def prepare_data(cfg):
    """
    准备训练/验证集与对应变换

    Returns:
        tuple: (train, val, train_transform, eval_transform)
    """
    spec, size = cfg.data, cfg.model.input_size
    train, val = load_datasets(spec, size)
    if spec.kind == 'synthetic':
        # 类别由空间位置决定，翻转与裁剪会改变标签语义，只做归一化
        policy = AugmentationPolicy.normalize_only(size)
        eval_tf = make_eval_transform(resize=None, crop=size)
    else:
        policy = AugmentationPolicy(output_size=size)
        eval_tf = make_eval_transform(resize=cfg.eval_resize or int(round(size * 72 / 64)), crop=size)
    if cfg.augmentation:
        policy = AugmentationPolicy.from_dict({**dataclasses.asdict(policy), **cfg.augmentation})
    if spec.limit:
        train = train.subset(np.arange(min(spec.limit, len(train))))
    if train.num_classes != cfg.model.num_classes:
        raise ConfigError(f"模型类别数 {cfg.model.num_classes} 与数据集类别数 {train.num_classes} 不一致",
                          field='model.num_classes')
    return train, val, make_train_transform(policy), eval_tf


# ============================================================
# 评估
# ============================================================
def classification_metrics(logits, labels):
    """
    Args:
        logits: (N, C) 数组
        labels: (N,)

    Returns:
        tuple: (平均交叉熵, top-1 精度)
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ContractError("空数据集无法评估")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc


def evaluate(model, dataset, batch_size=64, transform=None):
    """
    评估平均交叉熵与 top-1 精度；评估期间切换到 eval 模式（dropout 变体改用确定性选择），
    不修改参数，结束后恢复原模式

    Returns:
        tuple: (loss, accuracy)
    """
    if len(dataset) == 0:
        raise ContractError("空数据集无法评估")
    was_training = getattr(model, 'training', False)
    model.eval()
    total_loss, correct = 0.0, 0
    try:
        with no_grad():
            for x, y in batch_iter(dataset, batch_size, transform=transform):
                logits = model(x).data
                loss, _ = classification_metrics(logits, y)
                total_loss += loss * len(y)
                correct += int((logits.argmax(axis=1) == y).sum())
    finally:
        model.train(was_training)
    return total_loss / len(dataset), correct / len(dataset)


# ============================================================
# 训练
# ============================================================
def _first_non_finite(named_arrays):
    for name, value in named_arrays:
        if value is not None and not np.all(np.isfinite(value)):
            return name
    return None


@dataclass
class TrainResult:
    metrics: pd.DataFrame
    summary: dict
    best_checkpoint: str
    last_checkpoint: str
    model: object = None
    steps: int = 0
    chart: str = None


class Trainer:
    """
    训练任务

    Args:
        cfg: TrainRunConfig
        out_dir: 输出目录（metrics.csv / summary.json / best.ckpt / last.ckpt / training_curves.html）
        data: 可选的 (train, val, train_transform, eval_transform)，默认由 prepare_data 生成
        progress: 是否显示 tqdm 进度条
    """

    def __init__(self, cfg, out_dir, data=None, progress=True):
        self.cfg = cfg
        self.out_dir = ensure_dir(out_dir)
        self.train_set, self.val_set, self.train_tf, self.eval_tf = data if data is not None else prepare_data(cfg)
        if len(self.train_set) == 0:
            raise ContractError("训练集为空")
        self.progress = progress
        self.model = build_model(cfg.model, seed=cfg.seed)
        self.optimizer = AdamW(self.model, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                               weight_decay=cfg.weight_decay)
        self.history = []
        self.start_epoch = 0
        self.best_val_acc = -1.0
        self.best_epoch = None
        self.steps = 0

        logger.info(f"训练任务初始化: 输出目录 {self.out_dir}")
        logger.info(f"  训练集 {len(self.train_set)} / 验证集 {len(self.val_set)}，类别数 {self.train_set.num_classes}")
        logger.info(f"  变体 {cfg.model.variant}，epochs {cfg.epochs}，batch {cfg.batch_size}，seed {cfg.seed}")

    @property
    def metrics_path(self):
        return os.path.join(self.out_dir, 'metrics.csv')

    def resume(self, path):
        """从检查点恢复参数、优化器状态、选择随机源与历史指标"""
        ckpt = load_checkpoint(path)
        if ckpt.fingerprint != self.cfg.model.fingerprint():
            raise ConfigError("检查点的模型配置与当前训练配置不一致", field='model')
        self.model.load_state_dict(ckpt.params)
        if ckpt.optimizer is not None:
            self.optimizer.load_state_dict(ckpt.optimizer)
        if ckpt.rng_state is not None:
            self.model.selection_rng.bit_generator.state = ckpt.rng_state
        self.start_epoch = ckpt.epoch
        self.history = list(ckpt.extra.get('history', []))
        self.best_val_acc = ckpt.extra.get('best_val_acc', -1.0)
        self.best_epoch = ckpt.extra.get('best_epoch')
        self.steps = self.optimizer.step_count
        logger.info(f"✓ 已从 {path} 恢复，继续第 {self.start_epoch + 1} 个 epoch")
        return self

    def _train_epoch(self, epoch, lr):
        model, cfg = self.model, self.cfg
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        stream = batch_iter(self.train_set, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch,
                            transform=self.train_tf, prefetch=cfg.prefetch)
        bar = tqdm(stream, total=len(stream), desc=f"epoch {epoch + 1}/{cfg.epochs}",
                   disable=not self.progress, leave=False)
        for x, y in bar:
            logits = model(x)
            loss = cross_entropy(logits, y)
            bad = _first_non_finite([('logits', logits.data), ('loss', loss.data)])
            if bad is None:
                backward(loss)
                bad = _first_non_finite(('grad:' + n, p.grad) for n, p in model.named_parameters())
            if bad is not None:
                current_tape().clear()
                raise TrainingDivergedError(f"epoch {epoch + 1} 第 {self.steps + 1} 步出现非有限值: {bad}",
                                            tensor_name=bad)
            self.optimizer.step(lr)
            self.optimizer.zero_grad()
            self.steps += 1

            total_loss += float(loss.data) * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            bar.set_postfix(loss=f"{float(loss.data):.4f}")
        return total_loss / seen, correct / seen

    def train(self, until_epoch=None):
        """
        执行训练

        Args:
            until_epoch: 只训练到该 epoch（用于分段训练后恢复），默认 cfg.epochs

        Returns:
            TrainResult
        """
        cfg = self.cfg
        stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
        best_path = os.path.join(self.out_dir, BEST_CHECKPOINT)
        last_path = os.path.join(self.out_dir, LAST_CHECKPOINT)
        run_start = time.time()

        logger.info("=" * 60)
        logger.info(f"开始训练: epoch {self.start_epoch + 1} → {stop}")
        logger.info("=" * 60)

        for epoch in range(self.start_epoch, stop):
            start = time.time()
            lr = cosine_lr(cfg.schedule, epoch)
            train_loss, train_acc = self._train_epoch(epoch, lr)
            val_loss, val_acc = evaluate(self.model, self.val_set, cfg.batch_size, self.eval_tf)
            row = dict(epoch=epoch + 1, train_loss=train_loss, train_acc=train_acc, val_loss=val_loss,
                       val_acc=val_acc, lr=lr, seconds=time.time() - start)
            self.history.append(row)

            if val_acc > self.best_val_acc:
                self.best_val_acc, self.best_epoch = val_acc, epoch + 1
                save_checkpoint(best_path, self.model, self.optimizer, epoch + 1, self._extra())
            save_checkpoint(last_path, self.model, self.optimizer, epoch + 1, self._extra())
            pd.DataFrame(self.history, columns=METRIC_COLUMNS).to_csv(self.metrics_path, index=False)

            logger.info(f"epoch {epoch + 1}/{cfg.epochs}: train_loss={train_loss:.4f} train_acc={train_acc:.4f} "
                        f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} lr={lr:.2e} ({row['seconds']:.1f}s)")

        metrics = pd.DataFrame(self.history, columns=METRIC_COLUMNS)
        summary = self._write_summary(metrics, time.time() - run_start)
        chart = None
        if len(metrics):
            chart = training_curves_chart(metrics, self.out_dir, title=f"训练曲线 ({cfg.model.variant})")
        logger.info(f"✓ 训练完成，最佳验证精度 {self.best_val_acc:.4f} (epoch {self.best_epoch})，"
                    f"耗时 {format_duration(time.time() - run_start)}")
        return TrainResult(metrics, summary, best_path, last_path, self.model, self.steps, chart)

    def _extra(self):
        return {'history': list(self.history), 'best_val_acc': self.best_val_acc, 'best_epoch': self.best_epoch,
                'train_config': json.loads(json.dumps(self.cfg.to_dict(), default=str))}

    def _write_summary(self, metrics, elapsed):
        summary = {
            'variant': self.cfg.model.variant,
            'seed': self.cfg.seed,
            'epochs_completed': int(len(metrics)),
            'steps': self.steps,
            'best_epoch': self.best_epoch,
            'best_val_acc': None if self.best_epoch is None else self.best_val_acc,
            'final_val_acc': float(metrics['val_acc'].iloc[-1]) if len(metrics) else None,
            'final_train_acc': float(metrics['train_acc'].iloc[-1]) if len(metrics) else None,
            'config_fingerprint': self.cfg.model.fingerprint(),
            'elapsed_seconds': round(elapsed, 2),
        }
        with open(os.path.join(self.out_dir, 'summary.json'), 'w', encoding='utf-8') as f:
            json.dump(summary, f, ensure_ascii=False, indent=2)
        return summary


def train(cfg, out_dir, resume=None, progress=True, data=None):
    """函数式入口"""
    trainer = Trainer(cfg, out_dir, data=data, progress=progress)
    if resume:
        trainer.resume(resume)
    return trainer.train()


# ============================================================
# 消融对比
# ============================================================
@dataclass
class AblationResult:
    curves: pd.DataFrame
    summary: pd.DataFrame
    filter_wins: int
    seeds: list
    paths: dict = field(default_factory=dict)


def ablation_compare(base_cfg, seeds, out_dir, progress=False):
    """
    每个种子下用相同初始参数与相同数据顺序分别训练 filter 与 dropout 变体

    Returns:
        AblationResult: 对齐的逐 epoch 曲线（含 epoch 0 训练前评估）与摘要表
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("seeds 不能为空", field='seeds')
    ensure_dir(out_dir)
    logger.info("=" * 60)
    logger.info(f"开始消融对比: seeds={seeds}")
    logger.info("=" * 60)

    curves, summary = [], []
    for seed in seeds:
        cfg = base_cfg.with_seed(seed)
        data = prepare_data(cfg)
        shared_state = None
        for variant in ('filter', 'dropout'):
            run_cfg = dataclasses.replace(cfg, model=cfg.model.with_variant(variant))
            trainer = Trainer(run_cfg, os.path.join(out_dir, f"seed{seed}", variant), data=data, progress=progress)
            if shared_state is None:
                shared_state = trainer.model.state_dict()
            else:
                trainer.model.load_state_dict(shared_state)
            val_loss, val_acc = evaluate(trainer.model, data[1], cfg.batch_size, data[3])
            curves.append(dict(seed=seed, variant=variant, epoch=0, train_loss=math.nan, train_acc=math.nan,
                               val_loss=val_loss, val_acc=val_acc, lr=math.nan, seconds=0.0))
            result = trainer.train()
            for row in result.metrics.to_dict('records'):
                curves.append(dict(seed=seed, variant=variant, **row))
            summary.append(dict(seed=seed, variant=variant, epoch0_val_acc=val_acc,
                                final_val_acc=result.summary['final_val_acc'],
                                best_val_acc=result.summary['best_val_acc'],
                                best_epoch=result.summary['best_epoch']))
            logger.info(f"  ✓ seed {seed} {variant}: final_val_acc={result.summary['final_val_acc']:.4f}")

    curves = pd.DataFrame(curves)
    summary = pd.DataFrame(summary)
    final = summary.pivot(index='seed', columns='variant', values='final_val_acc')
    filter_wins = int((final['filter'] >= final['dropout']).sum())
    logger.info(f"方向性结果: filter 最终精度 ≥ dropout 的种子数 {filter_wins}/{len(seeds)}")

    paths = {
        'curves': os.path.join(out_dir, 'ablation_curves.csv'),
        'summary_csv': os.path.join(out_dir, 'ablation_summary.csv'),
        'summary_json': os.path.join(out_dir, 'ablation_summary.json'),
    }
    curves.to_csv(paths['curves'], index=False)
    summary.to_csv(paths['summary_csv'], index=False)
    with open(paths['summary_json'], 'w', encoding='utf-8') as f:
        json.dump({'seeds': seeds, 'filter_wins': filter_wins, 'runs': summary.to_dict('records')},
                  f, ensure_ascii=False, indent=2)
    paths['chart'] = ablation_chart(curves, out_dir)
    return AblationResult(curves, summary, filter_wins, seeds, paths)
