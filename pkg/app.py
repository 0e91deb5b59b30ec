"""
Flask应用主入口（推理侧HTTP接口 + 静态产物服务）
"""
from flask import Flask, jsonify, send_from_directory
from flask_cors import CORS

from config import get_config
from api.experiment_api import experiment_bp
from core.tensor import set_default_dtype
from core.utils import setup_logging


def create_app(env=None):
    """
    应用工厂函数

    Args:
        env: 环境名称 ('development', 'production', 'testing')

    Returns:
        Flask应用实例
    """
    app = Flask(__name__, static_folder=None)

    # 加载配置
    config = get_config(env)
    config.validate()
    app.config.from_object(config)
    app.extensions['filtervit_config'] = config

    # 确保目录存在
    config.ensure_directories()
    set_default_dtype(config.FILTERVIT_DTYPE)

    # 配置CORS
    CORS(app, origins=config.CORS_ORIGINS)

    # 配置日志
    setup_logging(config, log_name='app.log')

    # 注册蓝图
    app.register_blueprint(experiment_bp, url_prefix='/api')

    # 注册静态文件路由
    register_static_routes(app, config)

    # 注册错误处理器
    register_error_handlers(app)

    # 注册健康检查路由
    @app.route('/')
    def index():
        return jsonify({
            'service': 'FilterViT Experiment Backend',
            'version': '1.0.0',
            'status': 'running',
            'features': ['Mask_Explanations', 'Evaluation', 'Attention_Benchmark']
        })

    @app.route('/health')
    def health_check():
        return jsonify({
            'status': 'healthy',
            'message': '服务运行正常'
        })

    app.logger.info('Flask应用初始化完成')

    return app


def register_static_routes(app, config):
    """
    注册静态文件路由（叠加图、覆盖统计、基准报告）

    Args:
        app: Flask应用实例
        config: 配置对象
    """
    static_dir = config.STATIC_FILES_DIR
    static_prefix = config.STATIC_URL_PREFIX

    @app.route(f'{static_prefix}/<path:filename>')
    def serve_static_file(filename):
        return send_from_directory(static_dir, filename)

    app.logger.info(f'静态文件路由已注册: {static_prefix}/<filename>')
    app.logger.info(f'静态文件目录: {static_dir}')


def _error_envelope(code, message):
    return jsonify({'code': code, 'message': message, 'data': None}), code


def register_error_handlers(app):
    """
    注册全局错误处理器，统一返回 {code, message, data}

    ValueError（含 DimensionError / ConfigError / FormatError 等）→ 400，
    FileNotFoundError → 404，其余异常 → 500

    Args:
        app: Flask应用实例
    """

    @app.errorhandler(400)
    def bad_request(e):
        app.logger.warning(f'Bad Request: {e}')
        return _error_envelope(400, '请求参数错误')

    @app.errorhandler(404)
    def not_found(e):
        app.logger.warning(f'Not Found: {e}')
        return _error_envelope(404, '请求的资源不存在')

    @app.errorhandler(405)
    def method_not_allowed(e):
        return _error_envelope(405, '请求方法不被允许')

    @app.errorhandler(ValueError)
    def invalid_value(e):
        app.logger.warning(f'Invalid Value: {e}')
        return _error_envelope(400, str(e))

    @app.errorhandler(FileNotFoundError)
    def missing_file(e):
        app.logger.warning(f'File Not Found: {e}')
        return _error_envelope(404, f'文件不存在: {e}')

    @app.errorhandler(Exception)
    def unhandled(e):
        app.logger.error(f'Unhandled Exception: {e}', exc_info=True)
        return _error_envelope(500, f'服务器错误: {e}')


if __name__ == '__main__':
    # 创建应用
    app = create_app()

    # 运行应用
    app.run(
        host=app.config['HOST'],
        port=app.config['PORT'],
        debug=app.config['DEBUG']
    )
