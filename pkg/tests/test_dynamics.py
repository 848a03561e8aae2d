import math

import numpy as np
import pytest

from shared.lung.dynamics import (EXPIRATORY, INSPIRATORY, ISO_SETTINGS, BalloonPlant, ConstantController,
                                  DynamicsConfig, LungSetting, PlantFactory, PlantState, RcPlant, Trajectory,
                                  Waveform, ZeroController, balloon_pressure, balloon_rest_volume, balloon_step,
                                  episode_split, expiratory_time_constant, iso_setting, load_trajectories,
                                  make_plant, pip_waveforms, rc_step, run_breath, save_trajectories,
                                  valve_flow, waveform_target)
from shared.utils.errors import EmptyTrajectory, NonPositiveVolume, SafetyAbort

pytestmark = pytest.mark.dynamics


def test_six_iso_settings():
    assert [s.key for s in ISO_SETTINGS] == ['R5_C10', 'R5_C20', 'R5_C50', 'R20_C10', 'R20_C20', 'R20_C50']
    with pytest.raises(ValueError):
        iso_setting(7, 10)


def test_setting_rejects_non_positive():
    with pytest.raises(ValueError):
        LungSetting(R=0, C=10)


def test_waveform_geometry():
    wf = Waveform(pip=35)
    assert wf.steps_per_breath == 100
    assert wf.inspiratory_steps == 34
    assert wf.key == 'pip35'
    assert waveform_target(0.5, wf) == 35
    assert waveform_target(1.5, wf) == 5
    assert waveform_target(3.2, wf) == 35
    with pytest.raises(ValueError):
        waveform_target(-0.1, wf)


def test_waveform_rejects_pip_below_peep():
    with pytest.raises(ValueError):
        Waveform(pip=5, peep=5)


def test_rc_step_formula(rc_setting):
    state = PlantState(v=0.0, p=5.0)
    new = rc_step(state, 100.0, 0.03, rc_setting)
    assert new.v == pytest.approx(3.0)
    assert new.p == pytest.approx(5.0 + 3.0 / 50.0 + 5.0 * 100.0 / 1000.0)
    assert new.t == pytest.approx(0.03)


def test_rc_step_allows_empty_lung(rc_setting):
    assert rc_step(PlantState(v=0.0, p=5.0), 0.0, 0.03, rc_setting).v == 0.0
    with pytest.raises(NonPositiveVolume):
        rc_step(PlantState(v=1.0, p=5.0), -100.0, 0.03, rc_setting)


def test_balloon_rest_radius_gives_baseline_pressure(rc_setting):
    v0 = balloon_rest_volume(rc_setting)
    assert v0 == pytest.approx(300.0)
    assert balloon_pressure(v0, rc_setting) == pytest.approx(rc_setting.p0)
    state = balloon_step(PlantState(v=v0, p=rc_setting.p0), 0.0, 0.03, rc_setting)
    assert state.p == pytest.approx(rc_setting.p0)


def test_balloon_step_rejects_emptying(rc_setting):
    with pytest.raises(NonPositiveVolume):
        balloon_step(PlantState(v=1.0, p=5.0), -100.0, 0.03, rc_setting)


def test_valve_flow_no_backflow(rc_setting):
    assert valve_flow(rc_setting.p_supply + 1.0, 1.0, rc_setting) == 0.0
    assert valve_flow(5.0, 0.0, rc_setting) == 0.0
    assert valve_flow(5.0, 1.0, rc_setting) == pytest.approx(2000.0)
    with pytest.raises(ValueError):
        valve_flow(5.0, 1.5, rc_setting)


def test_expiratory_time_constant():
    assert expiratory_time_constant(iso_setting(20, 50)) == pytest.approx(1.0)


def test_zero_controller_keeps_peep(rc_setting):
    traj = run_breath(RcPlant(rc_setting), ZeroController(), Waveform(pip=20), n_breaths=2)
    assert len(traj) == 200
    assert np.allclose(traj.pressures, 5.0)
    assert traj.samples[0].phase == INSPIRATORY
    assert traj.samples[34].phase == EXPIRATORY


def test_constant_controller_rises_then_exhales(rc_setting):
    plant = RcPlant(rc_setting)
    traj = run_breath(plant, ConstantController(10.0), Waveform(pip=20), n_breaths=1)
    p = traj.pressures
    assert np.all(np.diff(p[:34]) > 0)
    # 呼气段单调回落
    assert np.all(np.diff(p[35:]) <= 1e-12)
    assert p[-1] < p[34]


def test_controls_are_clipped(rc_setting):
    traj = run_breath(RcPlant(rc_setting), ConstantController(500.0), Waveform(pip=20), n_breaths=1)
    assert traj.controls.max() == 100.0


def test_safety_abort_on_pressure():
    plant = RcPlant(iso_setting(5, 10), DynamicsConfig(p_max=20.0))
    with pytest.raises(SafetyAbort) as info:
        run_breath(plant, ConstantController(100.0), Waveform(pip=35), n_breaths=1)
    assert info.value.reason == "pressure"
    assert info.value.error_code == 1002


def test_exhale_decays_toward_peep(rc_setting):
    plant = RcPlant(rc_setting)
    for _ in range(20):
        plant.step(50.0)
    high = plant.measured
    for _ in range(500):
        plant.exhale(5.0)
    assert plant.measured < high
    assert plant.measured == pytest.approx(5.0, abs=1e-3)


def test_noise_is_seeded(rc_setting):
    cfg = DynamicsConfig(noise=True)
    a = run_breath(RcPlant(rc_setting, cfg, seed=3), ConstantController(5.0), Waveform(pip=20))
    b = run_breath(RcPlant(rc_setting, cfg, seed=3), ConstantController(5.0), Waveform(pip=20))
    c = run_breath(RcPlant(rc_setting, cfg, seed=4), ConstantController(5.0), Waveform(pip=20))
    assert np.array_equal(a.pressures, b.pressures)
    assert not np.array_equal(a.pressures, c.pressures)


def test_make_plant_and_factory(rc_setting):
    assert isinstance(make_plant('rc', rc_setting), RcPlant)
    assert isinstance(make_plant('balloon', rc_setting), BalloonPlant)
    with pytest.raises(ValueError):
        make_plant('bellows', rc_setting)
    factory = PlantFactory(setting=rc_setting, kind='balloon')
    assert factory() is not factory()
    assert factory().measured == pytest.approx(rc_setting.p0)


def test_episode_split(rc_setting):
    traj = run_breath(RcPlant(rc_setting), ConstantController(10.0), Waveform(pip=20), n_breaths=3)
    episodes = episode_split(traj, context=10)
    assert len(episodes) == 3
    assert all(len(ep) == 34 for ep in episodes)
    assert len(episodes[0].context) == 0
    assert len(episodes[1].context) == 10
    assert np.all(episodes[1].targets == 20)
    assert episodes[2].breath == 2


def test_episode_split_empty(rc_setting):
    with pytest.raises(EmptyTrajectory):
        episode_split(Trajectory(samples=[], setting=rc_setting, waveform=Waveform(pip=20)))


def test_trajectory_jsonl_round_trip(tmp_path, rc_setting):
    traj = run_breath(RcPlant(rc_setting), ConstantController(10.0), Waveform(pip=20), n_breaths=1)
    traj.meta = {'breath': 0, 'policy': 'boundary'}
    path = tmp_path / 'data.jsonl'
    assert save_trajectories(path, [traj, traj]) == 2
    loaded = load_trajectories(path)
    assert len(loaded) == 2
    assert loaded[0].setting == rc_setting
    assert loaded[0].meta['policy'] == 'boundary'
    assert np.array_equal(loaded[1].pressures, traj.pressures)


def test_pip_waveforms_default():
    assert [wf.pip for wf in pip_waveforms()] == [10, 15, 20, 25, 30, 35]
    assert math.isclose(pip_waveforms()[0].period, 3.0)
