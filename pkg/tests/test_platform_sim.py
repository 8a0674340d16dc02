import math
from dataclasses import replace

import numpy as np
import pytest

from src.config import DEFAULT_WEIGHTS
from src.platform_sim import (
    CONTROL,
    AccountState,
    ContentLibrary,
    InteractionError,
    PlatformParams,
    PostRecord,
    SourceRecord,
    SparseLibraryError,
    apply_interaction,
    create_account,
    engagement_order,
    generate_feed,
    saturation_factor,
    search_platform,
    trending_feed,
)
from src.trial import run_primer

from .conftest import PRIMERS


def test_create_account_is_fresh_and_deterministic(params):
    a = create_account(params, 7)
    b = create_account(params, 7)
    assert a == b
    assert a.topic_engagement == {} and a.source_engagement == {}
    assert a.interaction_history == () and a.clock == 0
    assert create_account(params, 8).seed != a.seed


def test_cold_start_feed_is_trending(params, library):
    account = create_account(params, 7)
    feed = generate_feed(account, library, params)
    assert feed == trending_feed(account, library, params)
    assert len(feed) == params.feed_length
    popularity = [p.popularity for p in feed.posts]
    assert popularity == sorted(popularity, reverse=True)
    assert popularity[0] == max(p.popularity for p in library.posts)


def test_search_content_orders_by_popularity(params, library):
    account = create_account(params, 1)
    results = search_platform(account, library, 'Fitness', 'content')
    fitness = sorted((p for p in library.posts if p.true_topic == 'Fitness'),
                     key=lambda p: (-p.popularity, p.post_id))
    assert [p.post_id for p in results[:5]] == [p.post_id for p in fitness[:5]]
    assert search_platform(account, library, 'Fitness', 'content') == results


def test_search_modes_filter_source_kind(params, library):
    account = create_account(params, 1)
    communities = search_platform(account, library, 'Politics', 'communities')
    users = search_platform(account, library, 'Elections', 'users')
    assert len(communities) >= 5 and len(users) >= 5
    assert all(isinstance(s, SourceRecord) and s.kind == 'community' for s in communities)
    assert all(s.kind == 'creator' and s.primary_topic == 'Politics' for s in users)


def test_primer_query_matches_only_its_subtopic(params, library):
    results = search_platform(create_account(params, 1), library, 'Lunch Recipes')
    assert all(p.true_topic == 'Cooking' and p.subtopic == 'Lunch Recipes' for p in results)


def test_sparse_search_raises():
    posts = [PostRecord(post_id=f"p{i}", source_id='s0', true_topic='NFL', text=f"t{i}", popularity=1.0)
             for i in range(3)]
    sources = [SourceRecord('s0', 'creator', 'NFL', 0.0, 1.0)]
    library = ContentLibrary(posts, sources, ('NFL', 'Other'))
    params = PlatformParams(interaction_weights=dict(DEFAULT_WEIGHTS))
    with pytest.raises(SparseLibraryError):
        search_platform(create_account(params, 1), library, 'NFL')
    with pytest.raises(SparseLibraryError):
        apply_interaction(create_account(params, 1), 'Like', 'NFL', 1, library, params)


def test_first_like_adds_the_weight(params, library):
    unsaturated = replace(params, dose_saturation={k: math.inf for k in params.dose_saturation})
    account = apply_interaction(create_account(unsaturated, 3), 'Like', 'Kansas City Chiefs', 1, library, unsaturated)
    liked = account.interaction_history[-1]
    assert account.topic_engagement == {'NFL': pytest.approx(0.8)}
    assert account.source_engagement == {liked.source_id: pytest.approx(0.8)}
    assert liked.topic == 'NFL' and liked.query == 'Kansas City Chiefs'
    assert account.clock == 1


def test_control_only_leaves_a_marker(params, library):
    before = create_account(params, 3)
    after = apply_interaction(before, CONTROL, 'NFL', 1, library, params)
    assert after.topic_engagement == before.topic_engagement
    assert after.source_engagement == before.source_engagement
    assert after.interaction_history[-1].interaction == CONTROL
    assert after.clock == before.clock + 1


def test_repeated_likes_saturate(params, library):
    account = create_account(params, 3)
    totals = []
    for i in range(1, 6):
        account = apply_interaction(account, 'Like', 'NFL', i, library, params)
        totals.append(account.topic_engagement['NFL'])
    expected = 0.8 * (2 / 2 + 2 / 3 + 2 / 4 + 2 / 5 + 2 / 6)
    assert totals[-1] == pytest.approx(expected, abs=1e-12)
    increments = np.diff([0.0] + totals)
    assert all(a >= b for a, b in zip(increments, increments[1:]))
    assert saturation_factor(math.inf, 4) == 1.0


@pytest.mark.parametrize('index', [0, 6])
def test_invalid_iteration_index(params, library, index):
    with pytest.raises(InteractionError):
        apply_interaction(create_account(params, 3), 'Like', 'NFL', index, library, params)


def test_unavailable_interaction_rejected(params, library):
    no_join = replace(params, available_interactions=('Search', 'Open', 'Like', 'Follow'))
    with pytest.raises(InteractionError):
        apply_interaction(create_account(no_join, 3), 'Join', 'NFL', 1, library, no_join)


def test_history_ticks_strictly_increase(params, library):
    account = run_primer(create_account(params, 5), library, params, PRIMERS)
    ticks = [h.tick for h in account.interaction_history]
    assert len(ticks) == 15
    assert all(a < b for a, b in zip(ticks, ticks[1:]))


def test_dominant_topic_fills_exploit_slots(params, library):
    quiet = replace(params, explore_quota=0.0, noise_scale=0.0)
    account = AccountState(account_id='a', seed=1, topic_engagement={'NFL': 10.0}, source_engagement={})
    feed = generate_feed(account, library, quiet)
    assert len(feed) == quiet.feed_length
    assert {p.true_topic for p in feed.posts} == {'NFL'}


def test_explore_slots_hold_unrelated_posts(params, library):
    account = run_primer(create_account(params, 11), library, params, PRIMERS)
    for i in range(1, 4):
        account = apply_interaction(account, 'Like', 'NFL', i, library, params)
    feed = generate_feed(account, library, params)
    topics = account.history_topics()
    sources = account.history_sources()
    novel = [p for p in feed.posts if p.true_topic not in topics and p.source_id not in sources]
    assert len(novel) == math.ceil(params.explore_quota * params.feed_length) == 6
    assert [e.rank for e in feed.entries] == list(range(1, 31))


def test_feed_is_deterministic(params, library):
    def run():
        account = run_primer(create_account(params, 9), library, params, PRIMERS)
        account = apply_interaction(account, 'Follow', 'Fitness', 1, library, params)
        return generate_feed(account, library, params)

    assert run() == run()


def test_primed_feed_is_cooking_dominated(params, library):
    account = run_primer(create_account(params, 4), library, params, PRIMERS)
    feed = generate_feed(account, library, params)
    counts = {}
    for post in feed.posts:
        counts[post.true_topic] = counts.get(post.true_topic, 0) + 1
    assert max(counts, key=counts.get) == 'Cooking'


def test_library_sources_mostly_post_on_topic(library):
    for source in library.sources:
        posts = [p for p in library.posts if p.source_id == source.source_id]
        on_topic = sum(p.true_topic == source.primary_topic for p in posts) / len(posts)
        assert on_topic >= 1 - source.topic_diversity - 0.1


def test_higher_like_weight_raises_topic_prevalence(library):
    """Only the Like weight differs between the two runs."""
    def prevalence(weight, seed):
        weights = dict(DEFAULT_WEIGHTS, Like=weight)
        params = PlatformParams(interaction_weights=weights, rng_seed=7)
        account = run_primer(create_account(params, seed), library, params, PRIMERS)
        for i in range(1, 6):
            account = apply_interaction(account, 'Like', 'NFL', i, library, params)
        feed = generate_feed(account, library, params)
        return sum(p.true_topic == 'NFL' for p in feed.posts) / len(feed)

    violations = sum(prevalence(0.2, seed) > prevalence(0.8, seed) for seed in range(20))
    assert violations <= 2


def test_iteration_bound_follows_params(params, library):
    longer = replace(params, max_iteration_index=8)
    account = apply_interaction(create_account(longer, 3), 'Like', 'NFL', 8, library, longer)
    assert account.topic_engagement['NFL'] > 0


def topic_counts(feed):
    counts = {}
    for post in feed.posts:
        counts[post.true_topic] = counts.get(post.true_topic, 0) + 1
    return counts


def test_zero_weight_search_leaves_feed_composition(params, library):
    primed = run_primer(create_account(params, 12), library, params, PRIMERS)
    searched = primed
    for i in range(1, 6):
        searched = apply_interaction(searched, 'Search', 'Kansas City Chiefs', i, library, params)
    before = topic_counts(generate_feed(primed, library, params))
    after = topic_counts(generate_feed(searched, library, params))
    assert searched.engagement_mass == pytest.approx(primed.engagement_mass)
    assert after.get('NFL', 0) == before.get('NFL', 0)


def test_explore_split_is_stable_across_ticks(params, library):
    account = run_primer(create_account(params, 14), library, params, PRIMERS)
    splits = []
    for i in range(1, 5):
        counts = topic_counts(generate_feed(account, library, params))
        splits.append({t: counts.get(t, 0) for t in ('NFL', 'Politics', 'Fitness', 'Other')})
        account = apply_interaction(account, CONTROL, 'NFL', i, library, params)
    assert all(split == splits[0] for split in splits)
    assert sum(splits[0].values()) == math.ceil(params.explore_quota * params.feed_length)
    assert set(splits[0].values()) <= {1, 2}


def test_carryover_shifts_slots_to_the_next_topic(params, library):
    def politics_share(carryover):
        boosted = replace(params, carryover=carryover)
        account = run_primer(create_account(boosted, 6), library, boosted, PRIMERS)
        for query in ('Kansas City Chiefs', 'Elections'):
            for i in range(1, 6):
                account = apply_interaction(account, 'Like', query, i, library, boosted)
        assert engagement_order(account) == ['Cooking', 'NFL', 'Politics']
        return topic_counts(generate_feed(account, library, boosted)).get('Politics', 0)

    assert politics_share({'NFL': 0.2}) >= politics_share({}) + 4
    assert politics_share({'Politics': 0.2}) == politics_share({})
