#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
命令行入口

    python cli.py train   --config configs/train_synthetic.json --out runs/filter
    python cli.py eval    --checkpoint runs/filter/best.ckpt --data synthetic
    python cli.py ablate  --config configs/train_synthetic.json --seeds 0,1,2 --out runs/ablation
    python cli.py explain --checkpoint runs/filter/best.ckpt --image sample.ppm --out runs/explain [--alpha 0.5] [--layer all]
    python cli.py bench   --grid configs/bench_grid.json --out runs/bench.csv
    python cli.py serve
"""
import argparse
import json
import logging
import sys

from config import get_config
from core.errors import FilterViTError
from core.utils import setup_logging

logger = logging.getLogger('filtervit.cli')


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds 必须是逗号分隔的整数: {text}")
    if not seeds:
        raise argparse.ArgumentTypeError("seeds 不能为空")
    return seeds


def _parse_layer(text):
    if text == 'all':
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer 必须是阶段序号或 all: {text}")


def build_parser():
    parser = argparse.ArgumentParser(prog='filtervit', description='FilterViT / DropoutViT 实验命令行')
    parser.add_argument('--env', default=None, help="配置环境 (development / production / testing)")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='训练模型')
    p.add_argument('--config', required=True, help='TrainRunConfig JSON')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--resume', default=None, help='从检查点继续训练')
    p.add_argument('--no-progress', action='store_true', help='关闭进度条')

    p = sub.add_parser('eval', help='评估检查点')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', default='synthetic', help="'synthetic' 或 CIFAR-10 二进制文件/目录")
    p.add_argument('--batch-size', type=int, default=None)

    p = sub.add_parser('ablate', help='FilterViT vs DropoutViT 消融对比')
    p.add_argument('--config', required=True)
    p.add_argument('--seeds', type=_parse_seeds, default=[0, 1, 2])
    p.add_argument('--out', required=True)

    p = sub.add_parser('explain', help='导出掩码叠加图')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--image', required=True, help='输入图像 (二进制 PPM)')
    p.add_argument('--out', required=True)
    p.add_argument('--alpha', type=float, default=None)
    p.add_argument('--layer', type=_parse_layer, default='all')

    p = sub.add_parser('bench', help='注意力基准')
    p.add_argument('--grid', required=True, help='BenchGrid JSON')
    p.add_argument('--out', required=True, help='CSV 输出路径')
    p.add_argument('--dtype', default=None, choices=['float32', 'float64'])

    sub.add_parser('serve', help='启动 HTTP 服务')
    return parser


def run(args, config):
    """执行子命令，返回结果字典"""
    if args.command == 'serve':
        from app import create_app
        app = create_app(args.env)
        app.run(host=app.config['HOST'], port=app.config['PORT'], debug=app.config['DEBUG'])
        return {}

    from services.experiment_service import ExperimentService
    service = ExperimentService(config, task_prefix=args.command)
    if args.command == 'train':
        return service.train(args.config, args.out, resume=args.resume, progress=not args.no_progress)
    if args.command == 'eval':
        return service.evaluate(args.checkpoint, args.data, args.batch_size)
    if args.command == 'ablate':
        return service.ablate(args.config, args.seeds, args.out)
    if args.command == 'explain':
        return service.explain(args.checkpoint, args.image, args.out, alpha=args.alpha, layer=args.layer)
    if args.command == 'bench':
        return service.bench(args.grid, args.out, dtype=args.dtype)
    raise ValueError(f"未知命令: {args.command}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = get_config(args.env)
    setup_logging(config)

    try:
        config.validate()
        result = run(args, config)
    except (FilterViTError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} 失败: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} 执行异常: {e}", exc_info=True)
        return 2

    if result:
        print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return 0


if __name__ == '__main__':
    sys.exit(main())
