"""ventbench - 呼吸机压力控制基准"""
