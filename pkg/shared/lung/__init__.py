"""真实肺-呼吸机系统（动力学、PID、探索策略）"""
