"""工具函数（错误、种子、图表）"""
