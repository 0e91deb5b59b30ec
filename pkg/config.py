"""
全局配置文件
从环境变量中读取配置，提供默认值
"""
import os
import tempfile
from pathlib import Path
from dotenv import load_dotenv

# 加载.env文件
load_dotenv()

# 项目根目录
BASE_DIR = Path(__file__).resolve().parent


class Config:
    """基础配置类"""

    # 环境标识
    ENV = os.getenv('FLASK_ENV', 'development')

    # Flask配置
    SECRET_KEY = os.getenv('SECRET_KEY', 'dev-secret-key-change-in-production')
    DEBUG = os.getenv('FLASK_DEBUG', 'True').lower() == 'true'

    # 服务器配置
    HOST = os.getenv('HOST', '0.0.0.0')
    PORT = int(os.getenv('PORT', 5000))
    # 用于生成静态文件的访问URL
    SERVER_URL = os.getenv('SERVER_URL', f'http://127.0.0.1:{PORT}')

    # 目录配置
    DATA_DIR = os.path.join(BASE_DIR, os.getenv('DATA_DIR', 'data/raw'))
    RUNS_DIR = os.path.join(BASE_DIR, os.getenv('RUNS_DIR', 'data/runs'))
    LOG_DIR = os.path.join(BASE_DIR, os.getenv('LOG_DIR', 'logs'))

    # 静态文件目录（叠加图、图表、报告），URL前缀相对于SERVER_URL
    STATIC_FILES_DIR = os.path.join(BASE_DIR, os.getenv('STATIC_FILES_DIR', 'data/static'))
    STATIC_URL_PREFIX = '/static'

    # ========== 数值配置 ==========
    # 训练/评估使用的元素类型；基准计时单独使用 BENCH_DTYPE
    FILTERVIT_DTYPE = os.getenv('FILTERVIT_DTYPE', 'float64')
    BENCH_DTYPE = os.getenv('BENCH_DTYPE', 'float32')

    # 训练默认参数
    DEFAULT_BATCH_SIZE = int(os.getenv('DEFAULT_BATCH_SIZE', 64))
    DEFAULT_LR = float(os.getenv('DEFAULT_LR', 5e-4))
    DEFAULT_MIN_LR = float(os.getenv('DEFAULT_MIN_LR', 1e-5))
    DEFAULT_WEIGHT_DECAY = float(os.getenv('DEFAULT_WEIGHT_DECAY', 0.01))
    DEFAULT_EPOCHS = int(os.getenv('DEFAULT_EPOCHS', 30))
    PREFETCH_BATCHES = int(os.getenv('PREFETCH_BATCHES', 2))

    # 可解释性默认参数
    DEFAULT_ALPHA = float(os.getenv('DEFAULT_ALPHA', 0.5))
    DEFAULT_COLORMAP = os.getenv('DEFAULT_COLORMAP', 'bluered')

    # 基准默认参数
    BENCH_REPETITIONS = int(os.getenv('BENCH_REPETITIONS', 30))
    BENCH_WARMUP = int(os.getenv('BENCH_WARMUP', 5))

    # 运行目录清理策略
    AUTO_CLEANUP = os.getenv('AUTO_CLEANUP', 'False').lower() == 'true'
    CLEANUP_KEEP_DAYS = int(os.getenv('CLEANUP_KEEP_DAYS', 7))

    # 日志配置
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_MAX_BYTES = int(os.getenv('LOG_MAX_BYTES', 10485760))  # 10MB
    LOG_BACKUP_COUNT = int(os.getenv('LOG_BACKUP_COUNT', 5))

    # CORS配置
    CORS_ORIGINS = os.getenv('CORS_ORIGINS', '*')

    @classmethod
    def ensure_directories(cls):
        """确保必要的目录存在"""
        os.makedirs(cls.DATA_DIR, exist_ok=True)
        os.makedirs(cls.RUNS_DIR, exist_ok=True)
        os.makedirs(cls.LOG_DIR, exist_ok=True)
        os.makedirs(cls.STATIC_FILES_DIR, exist_ok=True)

    @classmethod
    def validate(cls):
        """验证配置"""
        from core.tensor import DTYPES
        from core.errors import ConfigError

        for name in ('FILTERVIT_DTYPE', 'BENCH_DTYPE'):
            if getattr(cls, name) not in DTYPES:
                raise ConfigError(f"{name} 只能为 {list(DTYPES)}，实际: {getattr(cls, name)}", field=name)
        if not 0.0 <= cls.DEFAULT_ALPHA <= 1.0:
            raise ConfigError(f"DEFAULT_ALPHA 必须在 [0, 1]，实际: {cls.DEFAULT_ALPHA}", field='DEFAULT_ALPHA')
        return True


class DevelopmentConfig(Config):
    """开发环境配置"""
    ENV = 'development'
    DEBUG = True
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    """生产环境配置"""
    ENV = 'production'
    DEBUG = False
    LOG_LEVEL = 'INFO'
    AUTO_CLEANUP = True


class TestingConfig(Config):
    """测试环境配置：64位精度，运行与静态目录放在临时目录"""
    ENV = 'testing'
    TESTING = True
    DEBUG = True
    FILTERVIT_DTYPE = 'float64'
    PREFETCH_BATCHES = 0
    _TMP = os.path.join(tempfile.gettempdir(), 'filtervit_testing')
    RUNS_DIR = os.path.join(_TMP, 'runs')
    STATIC_FILES_DIR = os.path.join(_TMP, 'static')
    LOG_DIR = os.path.join(_TMP, 'logs')
    DATA_DIR = os.path.join(_TMP, 'raw')


# 配置字典
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


def get_config(env=None):
    """
    获取配置对象

    Args:
        env: 环境名称 ('development', 'production', 'testing')

    Returns:
        Config对象
    """
    if env is None:
        env = os.getenv('FLASK_ENV', 'development')

    return config.get(env, config['default'])
