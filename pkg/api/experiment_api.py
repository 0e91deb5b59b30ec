"""
实验API - 推理侧接口（掩码解释 + 评估 + 基准）
POST /api/explanations
POST /api/evaluations
POST /api/benchmarks
GET  /api/experiments/test
"""
import os
import logging

from flask import Blueprint, request, jsonify, current_app

from core.model_zoo import MODEL_REGISTRY
from services.experiment_service import ExperimentService

# 创建蓝图
experiment_bp = Blueprint('experiment', __name__)
logger = logging.getLogger(__name__)


def _envelope(code, message, data=None):
    return jsonify({'code': code, 'message': message, 'data': data}), code


def _read_params(required):
    """
    读取并校验 JSON 请求体

    Returns:
        tuple: (params, 错误响应或None)
    """
    if not request.is_json:
        return None, _envelope(400, '请求Content-Type必须为application/json')
    params = request.get_json(silent=True)
    if not isinstance(params, dict):
        return None, _envelope(400, '请求体必须为JSON对象')
    missing = [name for name in required if name not in params]
    if missing:
        return None, _envelope(400, f'缺少必需参数: {", ".join(missing)}')
    return params, None


def _resolve_path(path):
    """
    相对路径按运行目录解析；解析结果必须位于运行目录、静态目录或数据目录之内
    """
    if not isinstance(path, str) or not path:
        raise ValueError(f'路径必须为非空字符串: {path!r}')
    config = current_app.config
    resolved = os.path.realpath(os.path.join(config['RUNS_DIR'], path))
    for root in (config['RUNS_DIR'], config['STATIC_FILES_DIR'], config['DATA_DIR']):
        root = os.path.realpath(root)
        if os.path.commonpath([resolved, root]) == root:
            return resolved
    raise ValueError(f'路径不在允许的目录内: {path}')


def _static_url(path):
    """静态目录中的文件 → 访问URL"""
    relative = os.path.relpath(path, current_app.config['STATIC_FILES_DIR']).replace(os.sep, '/')
    return f"{current_app.config['SERVER_URL']}{current_app.config['STATIC_URL_PREFIX']}/{relative}"


def _service():
    return ExperimentService(current_app.extensions['filtervit_config'], task_prefix='api',
                             work_root=current_app.config['STATIC_FILES_DIR'])


def _handle(action, success_message):
    """执行服务调用，按异常类型映射HTTP状态码"""
    try:
        result = action()
        return _envelope(200, success_message, result)
    except FileNotFoundError as e:
        logger.error(f"文件未找到: {str(e)}")
        return _envelope(404, f'文件不存在: {str(e)}')
    except ValueError as e:
        logger.error(f"参数验证错误: {str(e)}")
        return _envelope(400, str(e))
    except Exception as e:
        logger.error(f"执行失败: {str(e)}", exc_info=True)
        return _envelope(500, f'执行失败: {str(e)}')


@experiment_bp.route('/explanations', methods=['POST'])
def run_explanation():
    """
    对一张 PPM 图像导出每个 FilterAttention 阶段的掩码叠加图

    请求示例:
    {
        "checkpoint": "task_xxx/train/best.ckpt",
        "image": "samples/cat.ppm",
        "alpha": 0.5,
        "layer": "all"
    }

    返回示例:
    {
        "code": 200,
        "message": "掩码解释完成",
        "data": {
            "task_id": "api_20261018_101500_1a2b3c4d",
            "prediction": 2,
            "overlay_urls": ["http://.../static/api_xxx/explain/overlay_stage0.ppm", ...],
            "coverage_url": "http://.../static/api_xxx/explain/selection_coverage.json",
            "stats": [...]
        }
    }
    """
    params, error = _read_params(['checkpoint', 'image'])
    if error:
        return error
    alpha = params.get('alpha')
    if alpha is not None and not isinstance(alpha, (int, float)):
        return _envelope(400, 'alpha必须为数字')
    logger.info(f"接收到解释请求: checkpoint={params['checkpoint']}, image={params['image']}, "
                f"alpha={alpha}, layer={params.get('layer', 'all')}")

    def action():
        service = _service()
        result = service.explain(_resolve_path(params['checkpoint']), _resolve_path(params['image']),
                                 alpha=alpha, layer=params.get('layer', 'all'))
        return {
            'task_id': result['task_id'],
            'prediction': result['prediction'],
            'overlay_urls': [_static_url(p) for p in result['overlays']],
            'coverage_url': _static_url(result['coverage']),
            'stats': result['stats'],
        }

    return _handle(action, '掩码解释完成')


@experiment_bp.route('/evaluations', methods=['POST'])
def run_evaluation():
    """
    在评估集上评估检查点

    请求示例:
    {
        "checkpoint": "task_xxx/train/best.ckpt",
        "data": "synthetic",
        "batch_size": 64
    }
    """
    params, error = _read_params(['checkpoint'])
    if error:
        return error
    batch_size = params.get('batch_size')
    if batch_size is not None and (not isinstance(batch_size, int) or batch_size <= 0):
        return _envelope(400, 'batch_size必须为正整数')
    data = params.get('data', 'synthetic')
    logger.info(f"接收到评估请求: checkpoint={params['checkpoint']}, data={data}")

    def action():
        path = data if data == 'synthetic' else _resolve_path(data)
        return _service().evaluate(_resolve_path(params['checkpoint']), path, batch_size)

    return _handle(action, '评估完成')


@experiment_bp.route('/benchmarks', methods=['POST'])
def run_benchmark():
    """
    稠密 vs 稀疏注意力基准

    请求示例:
    {
        "grid": {"resolutions": [8], "channels": [16], "k_fractions": [0.25, 1.0]}
    }
    """
    params, error = _read_params(['grid'])
    if error:
        return error
    if not isinstance(params['grid'], dict):
        return _envelope(400, 'grid必须为对象')
    logger.info(f"接收到基准请求: grid={params['grid']}")

    def action():
        result = _service().bench(params['grid'])
        return {
            'task_id': result['task_id'],
            'csv_url': _static_url(result['csv']),
            'meta_url': _static_url(result['meta']),
            'chart_url': _static_url(result['chart']),
            'rows': result['rows'],
        }

    return _handle(action, '基准测试完成')


@experiment_bp.route('/experiments/test', methods=['GET'])
def test_endpoint():
    """
    测试接口
    用于验证API是否正常工作
    """
    return jsonify({
        'code': 200,
        'message': '实验API工作正常',
        'data': {
            'endpoints': ['/api/explanations', '/api/evaluations', '/api/benchmarks'],
            'method': 'POST',
            'status': 'available',
            'models': sorted(MODEL_REGISTRY),
            'dtype': current_app.config['FILTERVIT_DTYPE'],
            'bench_dtype': current_app.config['BENCH_DTYPE'],
            'server_url': current_app.config['SERVER_URL'],
            'static_url_prefix': current_app.config['STATIC_URL_PREFIX'],
        }
    }), 200
