#!/usr/bin/env python3
"""
ventbench 入口文件

加载 .env、配置日志（终端 + logs/ventbench.log），然后把命令行交给 cli.parse_and_dispatch
"""
import logging
import os
import sys
from pathlib import Path

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(script_dir: Path) -> int:
    """按 LOG_LEVEL 配置根日志，返回日志级别"""
    log_level_str = os.getenv('LOG_LEVEL', 'INFO').upper()
    log_level_map = {
        'DEBUG': logging.DEBUG,
        'INFO': logging.INFO,
        'WARNING': logging.WARNING,
        'ERROR': logging.ERROR
    }
    log_level = log_level_map.get(log_level_str, logging.INFO)

    logging.basicConfig(
        level=log_level,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True  # 强制重新配置
    )

    logs_dir = script_dir / 'logs'
    logs_dir.mkdir(exist_ok=True)
    file_handler = logging.FileHandler(logs_dir / 'ventbench.log', encoding='utf-8')
    file_handler.setLevel(log_level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(file_handler)
    return log_level


def main() -> int:
    """主函数"""
    script_dir = Path(__file__).parent
    if str(script_dir) not in sys.path:
        sys.path.insert(0, str(script_dir))

    from dotenv import load_dotenv
    env_file = script_dir / '.env'
    if env_file.exists():
        load_dotenv(env_file)

    configure_logging(script_dir)
    logger = logging.getLogger(__name__)
    if env_file.exists():
        logger.debug(f"已加载环境变量文件: {env_file}")

    from cli import parse_and_dispatch
    try:
        return parse_and_dispatch(sys.argv[1:])
    except KeyboardInterrupt:
        logger.info("收到中断信号，退出")
        return 130


if __name__ == "__main__":
    sys.exit(main())
