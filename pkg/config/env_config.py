# -*- coding: utf-8 -*-
"""
环境变量配置管理模块
只负责进程级设置（日志、默认种子、默认输出目录），模型语义一律来自运行配置文件
"""

import os
from typing import Optional

from dotenv import load_dotenv

# 加载 .env 文件
load_dotenv()


class EnvironmentConfig:
    """
    环境变量配置类
    负责从环境变量中读取和验证配置项
    """

    # 日志配置
    @property
    def log_level(self) -> str:
        return os.getenv('TMX_LOG_LEVEL', 'WARNING')

    @property
    def log_file(self) -> Optional[str]:
        value = os.getenv('TMX_LOG_FILE', '').strip()
        return value or None

    # 运行默认值
    @property
    def default_seed(self) -> int:
        raw = os.getenv('TMX_DEFAULT_SEED', '0')
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"TMX_DEFAULT_SEED 必须是整数: {raw!r}")

    @property
    def output_dir(self) -> str:
        return os.getenv('TMX_OUTPUT_DIR', 'out')

    def get_config_dict(self) -> dict:
        """返回所有配置的字典形式"""
        return {
            'log_level': self.log_level,
            'log_file': self.log_file or '未设置',
            'default_seed': self.default_seed,
            'output_dir': self.output_dir,
        }


# 创建全局配置实例
env_config = EnvironmentConfig()
