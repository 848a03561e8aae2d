"""
ventbench 命令行

子命令：collect、tune-pid、train-sim、eval-sim、train-ctrl、score、benchmark
退出码：0 成功，2 配置错误，3 阶段失败，1 未预期的异常
"""
import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import click
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from shared.utils.errors import ConfigInvalid, VentBenchError

logger = logging.getLogger(__name__)

# 常量定义
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3

console = Console()
err_console = Console(stderr=True)


def _fmt(value: Any) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}" if math.isfinite(value) else str(value)
    return str(value)


def _print_table(title: str, columns: Sequence[str], rows: List[Sequence[Any]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*[_fmt(v) for v in row])
    console.print(table)


def _stage_context(options: Dict[str, Any]):
    """按 命令行 > 环境变量 > 配置文件 合并出运行上下文"""
    from shared.storage.experiment_config import apply_overrides, load_experiment_config
    from tools.common import StageContext

    if not options.get('config'):
        raise ConfigInvalid("--config: 缺少配置文件路径")
    cfg = load_experiment_config(options['config'])
    cfg = apply_overrides(cfg, seed=options.get('seed'), out=options.get('out'),
                          settings=options.get('settings'), jobs=options.get('jobs'))
    return StageContext(cfg=cfg, plot=options.get('plot', False), resume=options.get('resume', False))


def run_stage(stage: str, options: Dict[str, Any]) -> None:
    """统一的阶段分发（各阶段模块按需导入）"""
    ctx = _stage_context(options)
    jobs = ctx.cfg.jobs
    logger.info(f"开始阶段 {stage}: 配置 {ctx.cfg.name}，哈希 {ctx.config_hash}，种子 {ctx.seed}，输出 {ctx.cfg.output_dir}")

    if stage == 'collect':
        from tools.collect import run_collect
        summaries = run_collect(ctx, jobs)
        _print_table("collect", ['setting', 'breaths', 'kept', 'path'],
                     [[s.setting, s.breaths, s.kept, s.path] for s in summaries])

    elif stage == 'tune-pid':
        from tools.tune_pid import run_tune_pid
        summaries = run_tune_pid(ctx, jobs)
        _print_table("tune-pid", ['setting', 'kp', 'ki', 'kd', 'score', 'reference_score'],
                     [[s.setting, *s.coefficients.as_tuple(), s.score, s.reference_score] for s in summaries])

    elif stage == 'train-sim':
        from tools.train_sim import run_train_sim
        summaries = run_train_sim(ctx, jobs)
        _print_table("train-sim", ['setting', 'episodes', 'heldout_mae'],
                     [[s.setting, s.n_episodes, s.heldout_mae] for s in summaries])

    elif stage == 'eval-sim':
        from tools.eval_sim import run_eval_sim
        evaluations = run_eval_sim(ctx, jobs)
        _print_table("eval-sim", ['setting', 'heldout_mae', 'open_loop_distance', 'stderr'],
                     [[e.setting, e.heldout_mae, e.distance, e.stderr] for e in evaluations])

    elif stage == 'train-ctrl':
        from tools.train_ctrl import run_train_ctrl
        summaries = run_train_ctrl(ctx, jobs)
        _print_table("train-ctrl", ['setting', 'best_lambda', 'simulated_scores'],
                     [[s.setting, s.best_lambda, ', '.join(f"{lam:g}: {v:.4f}" for lam, v in s.simulated_scores)]
                      for s in summaries])

    elif stage == 'score':
        from tools.score import run_score
        rows = run_score(ctx, jobs)
        _print_table("score", ['setting', 'controller', 'lambda', 'score'],
                     [[r.setting, r.controller, r.lam, r.score] for r in rows])

    elif stage == 'benchmark':
        from tools.benchmark import run_benchmark
        bundle = run_benchmark(ctx, jobs)
        _print_table(f"benchmark {bundle.config_hash} seed={bundle.seed}",
                     ['experiment', 'setting', 'controller', 'lambda', 'score'],
                     [[r.experiment, r.setting, r.controller, r.lam, r.score] for r in bundle.scores])

    else:
        raise click.UsageError(f"未知阶段: {stage}")
    logger.info(f"阶段 {stage} 完成")


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('--config', 'config', type=click.Path(dir_okay=False), help='实验配置 JSON 文件')
@click.option('--seed', type=int, help='覆盖配置中的主种子')
@click.option('--out', type=click.Path(file_okay=False), help='输出目录（覆盖 VENTBENCH_OUT 和配置）')
@click.option('--settings', help='只运行部分设置，例如 "5,50;20,10"')
@click.option('--jobs', type=int, help='设置级并行进程数（覆盖 VENTBENCH_JOBS）')
@click.option('--plot', is_flag=True, help='输出 SVG 图表')
@click.option('--resume', is_flag=True, help='benchmark 复用已有阶段产物')
@click.option('--verbose', '-v', is_flag=True, help='DEBUG 日志')
@click.pass_context
def cli(ctx: click.Context, **options) -> None:
    """ventbench: 呼吸机压力控制的 PID / 学习模拟器 / 残差控制器基准"""
    if options.pop('verbose'):
        root = logging.getLogger()
        root.setLevel(logging.DEBUG)
        for handler in root.handlers:
            handler.setLevel(logging.DEBUG)
    ctx.obj = options


def _stage_command(stage: str, help_text: str) -> None:
    @cli.command(name=stage, help=help_text)
    @click.pass_obj
    def _command(options: Dict[str, Any]) -> None:
        run_stage(stage, options)


_stage_command('collect', '在真实被控对象上安全探索，保存数据集')
_stage_command('tune-pid', '网格搜索每个设置的最佳 PID')
_stage_command('train-sim', '从数据集训练模拟器')
_stage_command('eval-sim', '评估模拟器：留出开环 MAE 与开环距离')
_stage_command('train-ctrl', '在模拟器上训练残差控制器（λ 扫描）')
_stage_command('score', '在真实被控对象上为 PID 和残差控制器评分')
_stage_command('benchmark', '运行完整基准：性能、鲁棒性、样本效率和气球模型压力测试')


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    解析命令行并执行对应阶段

    Args:
        argv: 参数列表（不含程序名）

    Returns:
        退出码
    """
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name='ventbench',
                          standalone_mode=False)
        # --help 等提前退出时返回 click 的退出码
        return result if isinstance(result, int) else EXIT_OK
    except click.exceptions.Abort:
        err_console.print("已中止")
        return EXIT_UNEXPECTED
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except ConfigInvalid as e:
        logger.error(f"配置错误: {e}")
        err_console.print(f"[bold red]配置错误[/bold red] {escape(str(e))}")
        return EXIT_CONFIG
    except VentBenchError as e:
        logger.error(f"阶段失败: {e}", exc_info=True)
        err_console.print(f"[bold red]阶段失败[/bold red] {escape(str(e))}")
        return EXIT_STAGE
    except Exception as e:
        logger.error(f"未预期的异常: {e}", exc_info=True)
        err_console.print(f"[bold red]未预期的异常[/bold red] {escape(str(e))}")
        return EXIT_UNEXPECTED
