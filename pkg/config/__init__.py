# 进程级环境配置（日志、默认种子、输出目录）
from .env_config import EnvironmentConfig, env_config

__all__ = ['EnvironmentConfig', 'env_config']
