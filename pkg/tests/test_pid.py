import csv

import pytest

from shared.learning.policy import score_controller
from shared.lung.dynamics import LungSetting, PlantFactory, ZeroController, iso_setting, pip_waveforms
from shared.lung.pid import (GRID_VALUES, GridSpec, PidCoefficients, PidController, PidState, grid_search,
                             pid_control, pid_output, reference_pid, robust_grid_search,
                             save_grid_table)

pytestmark = pytest.mark.pid


def test_pid_output_terms():
    c = PidCoefficients(kp=2.0, ki=0.5, kd=1.0)
    assert pid_output([1.0, 3.0], 1.0, c) == pytest.approx(2.0 * 3.0 + 0.5 * 4.0 + 1.0 * 2.0)


def test_pid_control_clamps():
    c = PidCoefficients(kp=10.0)
    assert pid_control(PidState(), 30.0, 5.0, c) == 100.0
    assert pid_control(PidState(), 5.0, 30.0, c) == 0.0
    assert pid_control(PidState(), 10.0, 5.0, c, u_max=20.0) == 20.0


def test_windowed_integral():
    c = PidCoefficients(kp=0.0, ki=1.0, window=2)
    state = PidState(2)
    outputs = [pid_control(state, 6.0, 5.0, c) for _ in range(5)]
    # 窗口内最多 k+1 = 3 个误差
    assert outputs == [1.0, 2.0, 3.0, 3.0, 3.0]


def test_unbounded_integral_resets():
    controller = PidController(PidCoefficients(kp=0.0, ki=1.0))
    for _ in range(4):
        u = controller.control(6.0, 5.0, 0.0)
    assert u == 4.0
    controller.reset()
    assert controller.control(6.0, 5.0, 0.0) == 1.0


def test_derivative_uses_previous_error():
    state = PidState()
    c = PidCoefficients(kp=0.0, kd=1.0)
    assert pid_control(state, 10.0, 5.0, c) == 5.0
    assert pid_control(state, 10.0, 8.0, c) == 0.0


def test_coefficients_validate_and_round_trip():
    with pytest.raises(ValueError):
        PidCoefficients(kp=-1.0)
    c = PidCoefficients(1.0, 2.0, 0.0, window=4)
    assert PidCoefficients.from_dict(c.to_dict()) == c


def test_default_grid():
    assert len(GRID_VALUES) == 20
    assert list(GRID_VALUES) == sorted(set(GRID_VALUES))
    assert GRID_VALUES[0] == 0.0 and GRID_VALUES[-1] == 10.0
    grid = GridSpec.default()
    assert len(grid) == len(GRID_VALUES) ** 2
    assert len(GridSpec.default(full=True)) == len(GRID_VALUES) ** 3
    with pytest.raises(ValueError):
        GridSpec(kp=())


def test_zero_controller_score_on_rc():
    """零控制下压力停在 PEEP，分数为各 PIP 与 PEEP 差值的平均"""
    score = score_controller(ZeroController(), PlantFactory(setting=iso_setting(5, 50)), pip_waveforms())
    assert score == pytest.approx(17.5)


def test_grid_search_prefers_feedback(rc_factory, waveforms, tmp_path):
    grid = GridSpec(kp=(0.0, 1.0, 5.0), ki=(0.0, 1.0), kd=(0.0,))
    result = grid_search(rc_factory, grid, waveforms)
    assert len(result.table) == 6
    assert result.best != PidCoefficients(0.0, 0.0, 0.0)
    assert result.best_score == min(row.mean for row in result.table)

    path = tmp_path / 'grid.csv'
    save_grid_table(path, result)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['kp', 'ki', 'kd', 'score_pip20', 'score_pip30', 'mean']
    assert len(rows) == 7


def test_robust_grid_search_averages_settings(waveforms):
    factories = [PlantFactory(setting=iso_setting(20, C)) for C in (10, 20, 50)]
    grid = GridSpec(kp=(0.0, 2.0), ki=(0.0, 2.0), kd=(0.0,))
    result = robust_grid_search(factories, grid, waveforms)
    assert set(result.table[0].scores) == {'R20_C10', 'R20_C20', 'R20_C50'}
    with pytest.raises(ValueError):
        robust_grid_search([], grid, waveforms)


def test_reference_pid_only_for_iso_settings():
    assert reference_pid(iso_setting(5, 10)) == PidCoefficients(10.0, 0.2, 0.0)
    assert reference_pid(iso_setting(20, 50)) == PidCoefficients(5.0, 10.0, 0.0)
    assert reference_pid(LungSetting(R=7.0, C=10.0)) is None
