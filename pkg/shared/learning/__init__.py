"""可微分学习组件（网络、模拟器、控制策略）"""
