"""
产物存储 - 管理输出目录下的数据集、模型和结果表

目录结构：
    <out>/run.json                 配置与哈希
    <out>/R<R>_C<C>/dataset.jsonl  探索轨迹
    <out>/R<R>_C<C>/simulator.json 模拟器
    <out>/R<R>_C<C>/pid.json       网格搜索得到的 PID
    <out>/R<R>_C<C>/policy.json    残差控制策略
    <out>/*.csv                    结果表

所有文件都不含时间戳，同一种子重复运行逐字节一致。
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from shared.lung.dynamics import LungSetting

logger = logging.getLogger(__name__)

# 常量定义
DATASET_FILE = 'dataset.jsonl'
SIMULATOR_FILE = 'simulator.json'
PID_FILE = 'pid.json'
POLICY_FILE = 'policy.json'
RUN_FILE = 'run.json'

SCORES_HEADER = ['experiment', 'setting', 'controller', 'lambda', 'score', 'config_hash', 'seed']
SIMULATORS_HEADER = ['setting', 'heldout_mae', 'open_loop_distance', 'open_loop_stderr', 'config_hash', 'seed']
BALLOON_HEADER = ['setting', 'heldout_mae', 'config_hash', 'seed']
CURVE_HEADER = ['episode', 'score']
OPEN_LOOP_HEADER = ['step', 'mean_distance']


def format_value(value: Any) -> str:
    """CSV 单元格：浮点数用 repr 保证精确往返，None 为空"""
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ArtifactStore:
    """输出目录的读写入口"""

    def __init__(self, root: Union[str, Path]):
        """
        Args:
            root: 输出目录（不存在时在首次写入时创建）
        """
        self.root = Path(root)

    def setting_dir(self, setting: LungSetting) -> Path:
        return self.root / setting.key

    def dataset_path(self, setting: LungSetting) -> Path:
        return self.setting_dir(setting) / DATASET_FILE

    def simulator_path(self, setting: LungSetting) -> Path:
        return self.setting_dir(setting) / SIMULATOR_FILE

    def pid_path(self, setting: LungSetting) -> Path:
        return self.setting_dir(setting) / PID_FILE

    def policy_path(self, setting: LungSetting, suffix: str = '') -> Path:
        name = POLICY_FILE if not suffix else f"policy_{suffix}.json"
        return self.setting_dir(setting) / name

    def path(self, name: str) -> Path:
        return self.root / name

    def write_json(self, path: Union[str, Path], data: Dict[str, Any]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write('\n')
        logger.debug(f"已写入 {path}")
        return path

    def read_json(self, path: Union[str, Path]) -> Dict[str, Any]:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """写结果表（固定表头，行按调用方给出的顺序）"""
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValueError(f"{name}: 行长度 {len(row)} 与表头 {len(header)} 不符")
                writer.writerow([format_value(v) for v in row])
                count += 1
        logger.info(f"已写入 {path}（{count} 行）")
        return path

    def read_csv(self, name: str) -> List[Dict[str, str]]:
        with open(self.path(name), 'r', encoding='utf-8', newline='') as f:
            return list(csv.DictReader(f))

    def write_curve(self, method: str, setting: LungSetting, points: Sequence[Sequence[float]]) -> Path:
        return self.write_csv(f"curve_{method}_{setting.R:g}_{setting.C:g}.csv", CURVE_HEADER,
                              [(int(ep), float(score)) for ep, score in points])

    def write_open_loop(self, setting: LungSetting, per_step: Sequence[float]) -> Path:
        return self.write_csv(f"open_loop_{setting.R:g}_{setting.C:g}.csv", OPEN_LOOP_HEADER,
                              [(t + 1, float(d)) for t, d in enumerate(per_step)])

    def grid_table_path(self, setting: LungSetting) -> Path:
        return self.path(f"grid_{setting.R:g}_{setting.C:g}.csv")

    def write_run_manifest(self, config: Dict[str, Any], config_hash: str, stage: str,
                           extra: Optional[Dict[str, Any]] = None) -> Path:
        data = {'config': config, 'config_hash': config_hash, 'stage': stage}
        if extra:
            data.update(extra)
        return self.write_json(self.path(RUN_FILE), data)
