# -*- coding: utf-8 -*-
"""
配置文件
命令行进程的默认值，来源于环境变量（见 config/env_config.py）
"""

from config.env_config import env_config


class Config:
    """命令行进程配置类 - 基于环境变量"""

    # 日志配置
    LOG_LEVEL = env_config.log_level
    LOG_FILE = env_config.log_file
    LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'

    # 运行默认值
    DEFAULT_SEED = env_config.default_seed
    OUTPUT_DIR = env_config.output_dir

    # 单行诊断前缀，便于 grep
    ERROR_PREFIX = 'tmx-error'


# 创建配置实例
config = Config()
