"""
工具函数模块
包含目录管理、日志配置、任务ID、指纹与时长格式化等通用辅助函数
"""
import hashlib
import json
import logging
import os
import shutil
import uuid
from datetime import datetime, timedelta
from logging.handlers import RotatingFileHandler

logger = logging.getLogger(__name__)

LOG_FORMAT = '[%(asctime)s] %(levelname)s in %(module)s: %(message)s'


def ensure_dir(directory):
    """
    确保目录存在

    Args:
        directory: 目录路径

    Returns:
        str: 目录路径
    """
    os.makedirs(directory, exist_ok=True)
    return directory


def setup_logging(config, target=None, log_name='filtervit.log'):
    """
    配置日志系统：滚动文件日志 + 控制台输出

    Args:
        config: 配置类（LOG_DIR / LOG_LEVEL / LOG_MAX_BYTES / LOG_BACKUP_COUNT）
        target: 要挂载处理器的 logger，默认根 logger
        log_name: 日志文件名

    Returns:
        logging.Logger
    """
    target = target if target is not None else logging.getLogger()
    log_level = getattr(logging, str(config.LOG_LEVEL).upper(), logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT)

    ensure_dir(config.LOG_DIR)
    file_handler = RotatingFileHandler(
        os.path.join(config.LOG_DIR, log_name),
        maxBytes=config.LOG_MAX_BYTES,
        backupCount=config.LOG_BACKUP_COUNT,
        encoding='utf-8'
    )
    file_handler.setFormatter(formatter)
    file_handler.setLevel(log_level)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(log_level)

    # 重复调用时不叠加处理器
    for handler in list(target.handlers):
        if getattr(handler, '_filtervit', False):
            target.removeHandler(handler)
            handler.close()
    for handler in (file_handler, console_handler):
        handler._filtervit = True
        target.addHandler(handler)
    target.setLevel(log_level)

    logging.getLogger('werkzeug').setLevel(logging.WARNING)
    return target


def new_task_id(prefix='run'):
    """生成任务ID：前缀_时间戳_随机串"""
    return f"{prefix}_{datetime.now().strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:8]}"


def fingerprint(payload):
    """
    对可JSON序列化的对象求 sha256 指纹（键排序，结果与字段顺序无关）
    """
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def write_json(path, payload):
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def cleanup_old_tasks(runs_dir, keep_days=7):
    """
    清理过期的运行目录

    Args:
        runs_dir: 运行目录根路径
        keep_days: 保留天数

    Returns:
        int: 删除的目录数
    """
    if not os.path.exists(runs_dir):
        return 0

    cutoff_time = datetime.now() - timedelta(days=keep_days)
    cleaned_count = 0

    for task_dir in os.listdir(runs_dir):
        task_path = os.path.join(runs_dir, task_dir)
        if not os.path.isdir(task_path):
            continue

        mtime = datetime.fromtimestamp(os.path.getmtime(task_path))
        if mtime < cutoff_time:
            try:
                shutil.rmtree(task_path)
                cleaned_count += 1
                logger.info(f"已清理过期运行目录: {task_dir}")
            except OSError as e:
                logger.warning(f"清理失败: {task_dir} - {str(e)}")

    if cleaned_count > 0:
        logger.info(f"清理完成，共删除 {cleaned_count} 个过期运行目录")
    return cleaned_count


def format_duration(seconds):
    """
    格式化时长

    Args:
        seconds: 秒数

    Returns:
        str: 格式化后的时长字符串
    """
    if seconds < 60:
        return f"{seconds:.1f}秒"
    elif seconds < 3600:
        return f"{seconds / 60:.1f}分钟"
    return f"{seconds / 3600:.1f}小时"

