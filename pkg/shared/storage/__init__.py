"""存储模块（实验配置、产物读写）"""
