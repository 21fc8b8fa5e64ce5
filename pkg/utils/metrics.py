# utils/metrics.py
import time
from collections import defaultdict
from functools import wraps
from threading import Lock
from typing import Callable, Dict, List


class SimpleMetrics:
    """计数与耗时记录；耗时用 perf_counter 计量，单位为秒"""

    def __init__(self, keep_last: int = 100):
        self._counters = defaultdict(int)
        self._timings: Dict[str, List[float]] = defaultdict(list)
        self._keep_last = keep_last
        self._lock = Lock()

    def increment(self, metric_name: str, value: int = 1):
        with self._lock:
            self._counters[metric_name] += value

    def timing(self, metric_name: str, duration: float):
        with self._lock:
            self._timings[metric_name].append(duration)
            # 只保留最近 keep_last 个记录
            if len(self._timings[metric_name]) > self._keep_last:
                self._timings[metric_name].pop(0)

    def reset(self, metric_name: str = None):
        with self._lock:
            if metric_name is None:
                self._counters.clear()
                self._timings.clear()
            else:
                self._counters.pop(metric_name, None)
                self._timings.pop(metric_name, None)

    def get_stats(self):
        with self._lock:
            stats = {
                'counters': dict(self._counters),
                'timings': {}
            }

            for name, times in self._timings.items():
                if times:
                    stats['timings'][name] = {
                        'avg': sum(times) / len(times),
                        'count': len(times),
                        'min': min(times),
                        'max': max(times)
                    }

            return stats

    def best_time(self, metric_name: str) -> float:
        """多次重复中最快的一次；没有记录时返回 0"""
        with self._lock:
            times = self._timings.get(metric_name)
            return min(times) if times else 0.0


metrics = SimpleMetrics()


def track_performance(metric_name: str, registry: SimpleMetrics = None):
    def decorator(func: Callable):
        @wraps(func)
        def wrapper(*args, **kwargs):
            target = registry if registry is not None else metrics
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
                target.increment(f"{metric_name}.success")
                return result
            except Exception:
                target.increment(f"{metric_name}.error")
                raise
            finally:
                target.timing(metric_name, time.perf_counter() - start_time)
        return wrapper
    return decorator


def time_call(metric_name: str, func: Callable, *args, repeats: int = 1,
              registry: SimpleMetrics = None, **kwargs):
    """重复调用 func 并记录每次耗时，返回最后一次的结果"""
    tracked = track_performance(metric_name, registry)(func)
    result = None
    for _ in range(max(repeats, 1)):
        result = tracked(*args, **kwargs)
    return result
