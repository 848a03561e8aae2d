"""CLI 各阶段与基准流程"""
