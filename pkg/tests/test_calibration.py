"""Multi-seed checks that the simulated platform produces the effects it plants."""

import copy

import numpy as np
import pandas as pd
import pytest

from src.config import config_from_mapping
from src.main import EXIT_OK, cmd_simulate, main

from .conftest import BASE_CONFIG
from .test_cli import DEFAULT_CONFIG

pytestmark = pytest.mark.slow

SEEDS = range(1, 21)
WEIGHT_ORDER = ['Search', 'Open', 'Follow', 'Like', 'Join']


def read(path):
    return pd.read_csv(path, dtype=str, keep_default_na=False)


@pytest.fixture(scope='module')
def default_runs(tmp_path_factory):
    """Analysis directories of the default experiment under 20 seeds."""
    runs = {}
    for seed in SEEDS:
        run = tmp_path_factory.mktemp(f"seed{seed}")
        assert main(['simulate', '--config', str(DEFAULT_CONFIG), '--out', str(run / 'run'),
                     '--seed', str(seed), '--jobs', '4']) == EXIT_OK
        assert main(['analyze', str(run / 'run'), '--out', str(run / 'analysis'), '--jobs', '4']) == EXIT_OK
        runs[seed] = run / 'analysis'
    return runs


def action_effects(analysis_dir):
    effects = read(analysis_dir / 'effects.csv')
    row = effects[(effects['measure'] == 'TopicPrevalence') & (effects['topic'] == 'mu_action')].iloc[0]
    return {a: float(row[a]) for a in WEIGHT_ORDER}


def test_action_effects_follow_weights(default_runs):
    ordered = sum(sorted(effect, key=effect.get) == WEIGHT_ORDER
                  for effect in map(action_effects, default_runs.values()))
    null_search = sum(abs(action_effects(d)['Search']) < 2.0 for d in default_runs.values())
    assert ordered >= 18
    assert null_search >= 18


def test_influence_ranks_actions_by_weight(default_runs):
    ordered = 0
    for analysis_dir in default_runs.values():
        influence = read(analysis_dir / 'influence.csv')
        actions = influence[influence['factor'] == 'action']
        f2 = dict(zip(actions['level'], actions['influence'].astype(float)))
        ordered += sorted(f2, key=f2.get) == WEIGHT_ORDER
    assert ordered >= 18


def test_no_carryover_without_planted_boost(default_runs):
    quiet = 0
    for analysis_dir in default_runs.values():
        carryover = read(analysis_dir / 'carryover.csv')
        like = carryover[carryover['interaction'] == 'Like'].iloc[0]
        quiet += float(like['p_value']) > 0.05
    assert quiet >= 17


def test_mean_dose_response_rises_with_diminishing_steps(default_runs):
    curves = []
    for analysis_dir in default_runs.values():
        dose = read(analysis_dir / 'dose.csv')
        pooled = dose[(dose['topic'] == '*') & (dose['action'] != 'Search')]
        columns = [c for c in dose.columns if c.startswith('dose_')]
        curves.append(pooled[columns].astype(float).mean(axis=0).to_numpy())
    mean_curve = np.mean(curves, axis=0)
    steps = np.diff(mean_curve)
    assert (steps > 0).all()
    assert (np.diff(steps) <= 0.25).all()


def test_planted_carryover_detected(tmp_path):
    data = copy.deepcopy(BASE_CONFIG)
    data['experiment'].update({'interactions': ['Like'], 'puppets_per_cell': 20})
    data['platform'] = {'carryover': {'NFL': 0.05}}
    data['analysis'] = {'labeling': 'truth'}
    detected = 0
    for seed in SEEDS:
        config = config_from_mapping(data, seed_override=seed)
        run = tmp_path / f"seed{seed}"
        assert cmd_simulate(config, run / 'run', n_jobs=4) == EXIT_OK
        assert main(['analyze', str(run / 'run'), '--out', str(run / 'analysis'), '--jobs', '4']) == EXIT_OK
        carryover = read(run / 'analysis' / 'carryover.csv')
        detected += float(carryover[carryover['interaction'] == 'Like'].iloc[0]['p_value']) < 0.05
    assert detected >= 18
