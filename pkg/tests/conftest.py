import copy

import pytest

from src.config import DEFAULT_WEIGHTS, config_from_mapping
from src.platform_sim import FeedEntry, FeedPage, LibrarySettings, PlatformParams, PostRecord, build_library

UNIVERSE = ('NFL', 'Politics', 'Fitness', 'Cooking', 'Other')
PRIMERS = ('Breakfast Recipes', 'Lunch Recipes', 'Dinner Recipes')
ALIASES = {'Kansas City Chiefs': 'NFL', 'Elections': 'Politics'}

BASE_CONFIG = {
    'experiment': {
        'topics': ['Kansas City Chiefs', 'Elections', 'Fitness'],
        'interactions': ['Search', 'Open', 'Like', 'Join', 'Follow'],
        'puppets_per_cell': 4,
        'doses': 5,
        'seed': 42,
    },
    'topic_labels': {'Kansas City Chiefs': 'NFL', 'Elections': 'Politics'},
}


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-size trials (deselect with -m "not slow")')


def make_feed(rows, account_id='acct'):
    """rows: (topic, source_id[, embedding]) in rank order."""
    entries = []
    for rank, row in enumerate(rows, start=1):
        topic, source = row[0], row[1]
        embedding = tuple(row[2]) if len(row) > 2 else (0.0, 0.0)
        post = PostRecord(post_id=f"p{rank}", source_id=source, true_topic=topic, text=f"post {rank}",
                          embedding=embedding)
        entries.append(FeedEntry(rank=rank, post=post))
    return FeedPage(account_id=account_id, tick=0, entries=tuple(entries))


@pytest.fixture
def config_dict():
    return copy.deepcopy(BASE_CONFIG)


@pytest.fixture(scope='session')
def params():
    return PlatformParams(interaction_weights=dict(DEFAULT_WEIGHTS), rng_seed=7)


@pytest.fixture(scope='session')
def library(params):
    settings = LibrarySettings(sources_per_topic=10, posts_per_source=50)
    return build_library(params, settings, UNIVERSE, aliases=ALIASES,
                         subtopics={q: 'Cooking' for q in PRIMERS})


@pytest.fixture(scope='session')
def compact_config():
    """Two interactions, two puppets per cell, three doses: 16 puppets."""
    data = copy.deepcopy(BASE_CONFIG)
    data['experiment'].update({'interactions': ['Search', 'Like'], 'puppets_per_cell': 2, 'doses': 3})
    data['library'] = {'sources_per_topic': 10, 'posts_per_source': 50}
    data['analysis'] = {'labeling': 'truth', 'effect_dose': 3}
    return config_from_mapping(data)


@pytest.fixture(scope='session')
def compact_run(compact_config, tmp_path_factory):
    from src.main import cmd_simulate

    run_dir = tmp_path_factory.mktemp('run')
    assert cmd_simulate(compact_config, run_dir, n_jobs=1) == 0
    return run_dir
