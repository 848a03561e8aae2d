import numpy as np
import pytest

from shared.lung.dynamics import (ISO_SETTINGS, DynamicsConfig, RcPlant, Waveform, iso_setting, pip_waveforms,
                                  run_breath)
from shared.lung.explore import (BOUNDARY, ISO_EXPLORATION, TRIANGULAR, BoundarySchedule, ExplorationConfig,
                                 ExplorationController, TriangularSchedule, boundary_schedule, collect_dataset,
                                 collect_trajectories, draw_policy, triangular_schedule)
from shared.lung.pid import PidCoefficients, PidController
from shared.utils.seeding import derive_rng

pytestmark = pytest.mark.explore

BASE = PidCoefficients(1.0, 3.0, 0.0)


def test_boundary_schedule_decays_linearly():
    f = BoundarySchedule(c=80.0, t_end=0.4)
    assert f(0.0) == 80.0
    assert f(0.2) == pytest.approx(40.0)
    assert f(0.4) == 0.0
    assert f(0.9) == 0.0


def test_triangular_schedule_apex_at_midpoint():
    f = TriangularSchedule(c=30.0, t_start=0.1, t_end=0.5)
    assert f(0.05) == 0.0
    assert f(0.3) == pytest.approx(30.0)
    assert f(0.2) == pytest.approx(15.0)
    assert f(0.4) == pytest.approx(15.0)
    assert f(0.5) == 0.0


def test_schedules_sample_inside_ranges():
    cfg = ISO_EXPLORATION[(5.0, 20.0)]
    rng = derive_rng(1, 'schedules')
    for _ in range(50):
        b = boundary_schedule(rng, cfg)
        assert cfg.boundary_c[0] <= b.c <= cfg.boundary_c[1]
        assert cfg.boundary_t[0] <= b.t_end <= cfg.boundary_t[1]
        t = triangular_schedule(rng, cfg)
        assert cfg.triangular_c[0] <= t.c <= cfg.triangular_c[1]
        assert (t.t_start, t.t_end) == cfg.triangular_t


def test_draw_policy_extremes():
    rng = derive_rng(0, 'policy')
    assert {draw_policy(rng, 1.0) for _ in range(20)} == {BOUNDARY}
    assert {draw_policy(rng, 0.0) for _ in range(20)} == {TRIANGULAR}


def test_config_validation():
    with pytest.raises(ValueError):
        ExplorationConfig(base_pid=BASE, p_a=1.5)
    with pytest.raises(ValueError):
        ExplorationConfig(base_pid=BASE, boundary_c=(100.0, 50.0))
    cfg = ExplorationConfig(base_pid=BASE, triangular_t=(1.2, 1.5))
    with pytest.raises(ValueError):
        cfg.check_waveform(Waveform(pip=20))
    assert ExplorationConfig.from_dict(cfg.to_dict()) == cfg


def test_negative_perturbation_is_clipped():
    controller = ExplorationController(PidController(PidCoefficients(0.0)), TriangularSchedule(-20.0, 0.0, 1.0))
    assert controller.control(20.0, 5.0, 0.5) == 0.0


def test_zero_perturbation_matches_base_pid():
    setting = iso_setting(5, 20)
    cfg = ExplorationConfig(base_pid=BASE, boundary_c=(0.0, 0.0), triangular_c=(0.0, 0.0))
    wf = Waveform(pip=25)
    explored = collect_trajectories(RcPlant(setting), cfg, wf, 3, derive_rng(0, 'explore'))
    reference = run_breath(RcPlant(setting), PidController(BASE), wf, n_breaths=3)
    joined = np.concatenate([t.pressures for t in explored])
    assert np.array_equal(joined, reference.pressures)


def test_collection_is_reproducible_and_tagged():
    setting = iso_setting(5, 50)
    cfg = ISO_EXPLORATION[(5.0, 50.0)]
    wf = Waveform(pip=30)
    a = collect_dataset(RcPlant(setting), cfg, wf, 8, derive_rng(5, 'explore'))
    b = collect_dataset(RcPlant(setting), cfg, wf, 8, derive_rng(5, 'explore'))
    assert len(a) == 8
    assert all(ep.policy in (BOUNDARY, TRIANGULAR) for ep in a)
    for x, y in zip(a, b):
        assert np.array_equal(x.pressures, y.pressures)
        assert np.array_equal(x.controls, y.controls)


def test_aborted_breaths_are_skipped():
    setting = iso_setting(5, 10)
    cfg = ExplorationConfig(base_pid=PidCoefficients(10.0), boundary_c=(100.0, 100.0), boundary_t=(1.0, 1.0),
                            p_a=1.0)
    plant = RcPlant(setting, DynamicsConfig(p_max=15.0))
    trajectories = collect_trajectories(plant, cfg, Waveform(pip=35), 3, derive_rng(0, 'abort'))
    assert trajectories == []


def test_boundary_fraction_tracks_p_a():
    rng = derive_rng(3, 'fraction')
    for p_a in (0.25, 0.5):
        draws = [draw_policy(rng, p_a) for _ in range(2000)]
        assert abs(draws.count(BOUNDARY) / 2000 - p_a) <= 0.05


def test_breaths_carry_previous_pressures():
    setting = iso_setting(5, 20)
    cfg = ExplorationConfig(base_pid=BASE, boundary_c=(0.0, 0.0), triangular_c=(0.0, 0.0))
    wf = Waveform(pip=25)
    episodes = collect_dataset(RcPlant(setting), cfg, wf, 3, derive_rng(2, 'lead'), context=6)
    trajectories = collect_trajectories(RcPlant(setting), cfg, wf, 3, derive_rng(2, 'lead'), context=6)
    assert [len(ep.context) for ep in episodes] == [0, 6, 6]
    assert trajectories[0].meta['lead'] == []
    for previous, ep in zip(trajectories, episodes[1:]):
        assert ep.context.tolist() == [s.p for s in previous.samples[-6:]]


@pytest.mark.slow
@pytest.mark.parametrize("setting", ISO_SETTINGS, ids=lambda s: s.key)
def test_full_collection_stays_below_pressure_limit(setting):
    """每个 PIP 采集 500 次呼吸，保留的轨迹都低于压力上限"""
    cfg = ISO_EXPLORATION[(setting.R, setting.C)]
    p_max = DynamicsConfig().p_max
    plant = RcPlant(setting)
    rng = derive_rng(0, 'explore', setting.key)
    for wf in pip_waveforms():
        trajectories = collect_trajectories(plant, cfg, wf, 500, rng)
        assert trajectories
        assert max(max(t.pressures) for t in trajectories) < p_max
