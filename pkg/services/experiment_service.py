"""
实验服务
串联核心库的各个流程：训练 → 评估 → 消融 → 掩码解释 → 基准
命令行与 HTTP 接口共用同一个服务
"""
import json
import os
import time
import logging

import numpy as np

from core.bench import BenchGrid, CSV_COLUMNS, run_bench
from core.checkpoint import load_checkpoint, restore_model
from core.data_pipeline import load_cifar10_binary, load_cifar10_dir, make_eval_transform
from core.errors import ConfigError
from core.interpretability import export_explanations, read_ppm
from core.tensor import default_dtype
from core.trainer import DatasetSpec, TrainRunConfig, ablation_compare, evaluate, load_datasets, train
from core.utils import cleanup_old_tasks, ensure_dir, format_duration, new_task_id, read_json, write_json

logger = logging.getLogger(__name__)


class ExperimentService:
    """
    实验服务
    每个服务实例对应一个任务ID与一个工作目录
    """

    def __init__(self, config, task_prefix='task', work_root=None):
        """
        初始化服务

        Args:
            config: 配置类（config.get_config() 的返回值）
            task_prefix: 任务ID前缀
            work_root: 工作目录根路径，默认 config.RUNS_DIR
        """
        self.config = config
        self.task_id = new_task_id(task_prefix)
        self.work_dir = os.path.join(work_root or config.RUNS_DIR, self.task_id)
        self.dtype = config.FILTERVIT_DTYPE

        if getattr(config, 'AUTO_CLEANUP', False):
            cleanup_old_tasks(work_root or config.RUNS_DIR, config.CLEANUP_KEEP_DAYS)

        logger.info(f"[{self.task_id}] 服务初始化完成")
        logger.info(f"[{self.task_id}] 工作目录: {self.work_dir}")
        logger.info(f"[{self.task_id}] 元素类型: {self.dtype}")

    def _out_dir(self, out_dir, name):
        return ensure_dir(out_dir or os.path.join(self.work_dir, name))

    def _banner(self, title):
        logger.info(f"[{self.task_id}] " + "=" * 60)
        logger.info(f"[{self.task_id}] {title}")
        logger.info(f"[{self.task_id}] " + "=" * 60)

    # ============================================================
    # 训练
    # ============================================================
    def _train_config(self, config):
        """JSON 文件路径或字典 → TrainRunConfig；未给出的超参数取环境配置默认值"""
        if isinstance(config, TrainRunConfig):
            return config
        payload = read_json(config) if isinstance(config, (str, os.PathLike)) else dict(config)
        defaults = {
            'batch_size': self.config.DEFAULT_BATCH_SIZE,
            'lr': self.config.DEFAULT_LR,
            'min_lr': self.config.DEFAULT_MIN_LR,
            'weight_decay': self.config.DEFAULT_WEIGHT_DECAY,
            'epochs': self.config.DEFAULT_EPOCHS,
            'prefetch': self.config.PREFETCH_BATCHES,
        }
        return TrainRunConfig.from_dict({**defaults, **payload})

    def train(self, config, out_dir=None, resume=None, progress=True):
        """
        训练一个模型

        Args:
            config: TrainRunConfig / JSON 路径 / 字典
            out_dir: 输出目录，默认 <work_dir>/train
            resume: 从该检查点继续训练

        Returns:
            dict: 训练摘要与产物路径
        """
        start = time.time()
        cfg = self._train_config(config)
        out_dir = self._out_dir(out_dir, 'train')
        self._banner(f"训练 {cfg.model.variant} 变体，{cfg.epochs} 个 epoch")

        with default_dtype(self.dtype):
            result = train(cfg, out_dir, resume=resume, progress=progress)
        write_json(os.path.join(out_dir, 'train_config.json'), cfg.to_dict())

        logger.info(f"[{self.task_id}] ✓ 训练完成，耗时 {format_duration(time.time() - start)}")
        return {
            'task_id': self.task_id,
            'out_dir': out_dir,
            'summary': result.summary,
            'best_checkpoint': result.best_checkpoint,
            'last_checkpoint': result.last_checkpoint,
            'metrics': os.path.join(out_dir, 'metrics.csv'),
            'chart': result.chart,
        }

    # ============================================================
    # 评估
    # ============================================================
    def _eval_data(self, ckpt, model, data):
        """
        评估数据：'synthetic'（按训练配置重新生成验证集）、CIFAR-10 二进制文件或目录

        Returns:
            tuple: (dataset, transform)
        """
        size = model.config.input_size
        stored = ckpt.extra.get('train_config')
        if data in (None, 'synthetic'):
            spec = DatasetSpec(**stored['data']) if stored else DatasetSpec(num_classes=model.config.num_classes)
            if spec.kind != 'synthetic':
                raise ConfigError("检查点不是在合成数据集上训练的，请指定评估数据路径", field='data')
            _, val = load_datasets(spec, size)
            return val, make_eval_transform(resize=None, crop=size)

        if os.path.isdir(data):
            dataset = load_cifar10_dir(data, train=False)
        else:
            dataset = load_cifar10_binary(data)
        resize = (stored or {}).get('eval_resize') or int(round(size * 72 / 64))
        return dataset, make_eval_transform(resize=resize, crop=size)

    def evaluate(self, checkpoint, data=None, batch_size=None):
        """
        在评估集上计算平均交叉熵与 top-1 精度

        Args:
            checkpoint: 检查点路径
            data: 'synthetic' / CIFAR-10 文件或目录

        Returns:
            dict
        """
        self._banner(f"评估检查点 {checkpoint}")
        ckpt = load_checkpoint(checkpoint)
        with default_dtype(self.dtype):
            model = restore_model(ckpt)
            dataset, transform = self._eval_data(ckpt, model, data)
            if len(dataset) and int(np.max(dataset.labels)) >= model.config.num_classes:
                raise ConfigError(f"评估数据的类别超出模型类别数 {model.config.num_classes}",
                                  field='num_classes')
            loss, acc = evaluate(model, dataset, batch_size or self.config.DEFAULT_BATCH_SIZE, transform)

        result = {
            'task_id': self.task_id,
            'checkpoint': str(checkpoint),
            'variant': model.config.variant,
            'epoch': ckpt.epoch,
            'samples': len(dataset),
            'loss': loss,
            'accuracy': acc,
        }
        logger.info(f"[{self.task_id}] ✓ 评估完成: loss={loss:.4f} accuracy={acc:.4f} ({len(dataset)} 样本)")
        return result

    # ============================================================
    # 消融
    # ============================================================
    def ablate(self, config, seeds=(0, 1, 2), out_dir=None, progress=False):
        """
        FilterViT vs DropoutViT 消融对比

        Returns:
            dict: 方向性结果与产物路径
        """
        cfg = self._train_config(config)
        out_dir = self._out_dir(out_dir, 'ablation')
        self._banner(f"消融对比，seeds={list(seeds)}")
        with default_dtype(self.dtype):
            result = ablation_compare(cfg, seeds, out_dir, progress=progress)
        return {
            'task_id': self.task_id,
            'out_dir': out_dir,
            'seeds': result.seeds,
            'filter_wins': result.filter_wins,
            'runs': json.loads(result.summary.to_json(orient='records')),
            'paths': result.paths,
        }

    # ============================================================
    # 掩码解释
    # ============================================================
    def explain(self, checkpoint, image, out_dir=None, alpha=None, layer='all', colormap=None):
        """
        生成每个 FilterAttention 阶段的叠加图

        Args:
            checkpoint: 检查点路径
            image: PPM 路径或 (3, H, W) 的 [0, 1] 数组
            alpha: 混合系数，默认 config.DEFAULT_ALPHA
            layer: 'all' 或阶段序号

        Returns:
            dict
        """
        alpha = self.config.DEFAULT_ALPHA if alpha is None else float(alpha)
        colormap = colormap or self.config.DEFAULT_COLORMAP
        out_dir = self._out_dir(out_dir, 'explain')
        self._banner(f"掩码解释 {checkpoint}")

        with default_dtype(self.dtype):
            model = restore_model(checkpoint)
            model.eval()
            pixels = read_ppm(image) if isinstance(image, (str, os.PathLike)) else np.asarray(image)
            result = export_explanations(model, pixels, out_dir, alpha=alpha, layer=layer, colormap=colormap)

        logger.info(f"[{self.task_id}] ✓ 已生成 {len(result['overlays'])} 张叠加图，预测类别 {result['prediction']}")
        return {'task_id': self.task_id, 'out_dir': out_dir, **result}

    # ============================================================
    # 基准
    # ============================================================
    def bench(self, grid, out_csv=None, dtype=None):
        """
        稠密 vs 稀疏注意力基准

        Args:
            grid: BenchGrid / JSON 路径 / 字典
            out_csv: CSV 路径，默认 <work_dir>/bench/bench.csv

        Returns:
            dict
        """
        if isinstance(grid, (str, os.PathLike)):
            grid = BenchGrid.load(grid)
        elif isinstance(grid, dict):
            payload = {'repetitions': self.config.BENCH_REPETITIONS, 'warmup': self.config.BENCH_WARMUP, **grid}
            grid = BenchGrid.from_dict(payload)
        out_csv = out_csv or os.path.join(self._out_dir(None, 'bench'), 'bench.csv')
        self._banner("注意力基准")

        report = run_bench(grid, out_csv, dtype=dtype or self.config.BENCH_DTYPE)
        stem = os.path.splitext(out_csv)[0]
        return {
            'task_id': self.task_id,
            'csv': out_csv,
            'meta': stem + '_meta.json',
            'chart': stem + '.html',
            'rows': json.loads(report[CSV_COLUMNS].to_json(orient='records')),
        }
