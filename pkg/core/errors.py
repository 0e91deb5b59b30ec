"""
异常定义模块
所有自定义异常都继承 FilterViTError，同时继承最接近的内置异常，
这样 API 层按 ValueError / IndexError 统一映射 HTTP 状态码即可
"""


class FilterViTError(Exception):
    """项目异常基类"""


class DimensionError(FilterViTError, ValueError):
    """形状/维度不匹配"""


class SelectionIndexError(FilterViTError, IndexError):
    """选择索引越界或重复"""

    def __init__(self, message, sample=None, value=None):
        super().__init__(message)
        self.sample = sample
        self.value = value


class ConfigError(FilterViTError, ValueError):
    """配置不合法"""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ContractError(FilterViTError, ValueError):
    """调用前置条件不满足"""


class FormatError(FilterViTError, ValueError):
    """文件格式错误（CIFAR二进制、PPM、张量/检查点文件）"""


class TrainingDivergedError(FilterViTError, RuntimeError):
    """训练过程中出现非有限值"""

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name
