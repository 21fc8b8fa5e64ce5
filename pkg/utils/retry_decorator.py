# utils/retry_decorator.py
import functools
import logging
import time
from typing import Callable, Tuple, Type

from utils.errors import SamplingError

logger = logging.getLogger(__name__)


def retry_on_failure(
    max_attempts: int = 3,
    delay: float = 0.0,
    exceptions: Tuple[Type[Exception], ...] = (SamplingError,)
):
    """
    失败重试装饰器

    被装饰函数需要在每次调用时自行推进随机状态，否则重试会得到同样的结果。

    Args:
        max_attempts: 最大尝试次数
        delay: 首次重试前的等待秒数（指数退避）；采样类调用传 0
        exceptions: 触发重试的异常类型
    """
    if max_attempts < 1:
        raise ValueError('max_attempts 必须 >= 1')

    def decorator(func: Callable):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            last_exception = None

            for attempt in range(max_attempts):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    last_exception = e
                    if attempt < max_attempts - 1:
                        logger.warning(f"{func.__name__} 第 {attempt + 1} 次尝试失败: {e}")
                        if delay > 0:
                            time.sleep(delay * (2 ** attempt))
                    else:
                        logger.error(f"{func.__name__} 所有 {max_attempts} 次尝试均失败")

            raise last_exception
        return wrapper
    return decorator
