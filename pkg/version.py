__version__ = "0.1.0"

# Version history
# 0.1.0 - 桌面规模 TemporalMaxer：数值算子、模型、训练、推理评估、消融与命令行
