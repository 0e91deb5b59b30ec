"""
核心算法模块
包含自动求导张量、网络层、FilterAttention、数据管线、优化器、训练评估、可解释性与基准测试
"""
