"""Shared fixtures: a small control zone and scenario template keep runs fast."""

import pytest

from backend.app.engine.core import ZoneConfig
from backend.app.engine.hdv_sim import ScenarioTemplate, generate_traces
from backend.app.engine.predictors import RecurrentPredictor, TrainingHyper, collect_trajectories, train


def small_zone(**overrides) -> ZoneConfig:
    params = dict(
        first=60.0,
        spacing=10.0,
        count=4,
        dt=0.2,
        horizon_steps=60,
        merge_speed_resolution=0.5,
    )
    params.update(overrides)
    return ZoneConfig.evenly_spaced(**params)


def small_template(**overrides) -> ScenarioTemplate:
    params = dict(
        num_hdvs=2,
        lead_position=(20.0, 50.0),
        gap=(25.0, 45.0),
        speed=(18.0, 26.0),
        cav_speed=(15.0, 22.0),
        cav_merge_candidates=(0, 3),
    )
    params.update(overrides)
    return ScenarioTemplate(**params)


@pytest.fixture
def zone() -> ZoneConfig:
    return small_zone()


@pytest.fixture
def template() -> ScenarioTemplate:
    return small_template()


@pytest.fixture
def traces(zone, template):
    return generate_traces(range(30), template, zone)


@pytest.fixture
def calib_and_test(zone, template):
    calib = collect_trajectories(generate_traces(range(100, 160), template, zone), per_scenario="one")
    test = collect_trajectories(generate_traces(range(200, 260), template, zone), per_scenario="one")
    return calib, test


@pytest.fixture(scope="session")
def trained_recurrent() -> RecurrentPredictor:
    """Network fitted on scenarios disjoint from every calibration and test range."""
    zone, template = small_zone(), small_template()
    dataset = collect_trajectories(generate_traces(range(40_000, 40_150), template, zone), per_scenario="all")
    hyper = TrainingHyper(learning_rate=5e-3, epochs=40, batch_size=16, seed=0, optimizer="adam")
    return RecurrentPredictor(zone, train(dataset, zone, hyper).params)
