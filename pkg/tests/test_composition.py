import numpy as np
import pytest

from src.composition import (
    CATEGORY,
    EMBEDDING,
    IN_NETWORK,
    OUT_NETWORK,
    ClusteringError,
    CompositionError,
    cluster_purity,
    compose_vectors,
    composition_delta,
    compute_source_vectors,
    compute_topic_vectors,
    fit_topic_clusters,
)
from src.platform_sim import FeedPage
from src.utils import prominence_mass

from .conftest import make_feed


def truth(feed):
    return {p.post_id: p.true_topic for p in feed.posts}


def test_topic_vectors_arithmetic():
    feed = make_feed([('NFL', 's1'), ('Politics', 's2'), ('NFL', 's3'), ('Other', 's4')])
    prevalence, prominence, _ = compute_topic_vectors(feed, truth(feed))
    assert prevalence == pytest.approx({'NFL': 0.5, 'Politics': 0.25, 'Other': 0.25})
    assert prominence == pytest.approx({'NFL': 1 / 4 + 1 / 12, 'Politics': 0.125, 'Other': 0.0625})
    assert sum(prominence.values()) == pytest.approx(prominence_mass(4), abs=1e-9)


def test_single_post_feed():
    feed = make_feed([('Fitness', 's1')])
    prevalence, prominence, _ = compute_topic_vectors(feed, truth(feed))
    assert prevalence == {'Fitness': 1.0}
    assert prominence == {'Fitness': 1.0}


def test_average_embedding_and_universe():
    feed = make_feed([('NFL', 's1', (1.0, 0.0)), ('Politics', 's2', (0.0, 1.0))])
    prevalence, _, centroid = compute_topic_vectors(feed, truth(feed), universe=('NFL', 'Politics', 'Cooking'))
    np.testing.assert_allclose(centroid, [0.5, 0.5])
    assert prevalence['Cooking'] == 0.0


def test_topic_vectors_errors():
    feed = make_feed([('NFL', 's1'), ('Politics', 's2')])
    with pytest.raises(CompositionError):
        compute_topic_vectors(feed, {'p1': 'NFL'})
    with pytest.raises(CompositionError):
        compute_topic_vectors(FeedPage('acct', 0, ()), {})


def test_permuting_ranks_keeps_prevalence():
    rows = [('NFL', 's1'), ('Politics', 's2'), ('NFL', 's3'), ('Other', 's4'), ('Fitness', 's5')]
    forward, backward = make_feed(rows), make_feed(rows[::-1])
    prev_f, prom_f, _ = compute_topic_vectors(forward, truth(forward))
    prev_b, prom_b, _ = compute_topic_vectors(backward, truth(backward))
    assert prev_f == pytest.approx(prev_b)
    assert prom_f != pytest.approx(prom_b)


def test_source_vectors():
    feed = make_feed([('NFL', 's1'), ('NFL', 's2')])
    prevalence, prominence = compute_source_vectors(feed, {'s1'})
    assert prevalence[IN_NETWORK] == pytest.approx(0.5)
    assert prominence[IN_NETWORK] == pytest.approx(0.5)
    assert prominence[OUT_NETWORK] == pytest.approx(0.25)
    assert compute_source_vectors(feed, set())[0][IN_NETWORK] == 0.0
    prevalence, prominence = compute_source_vectors(feed, {'s1', 's2'})
    assert prevalence[IN_NETWORK] == 1.0
    assert prominence[IN_NETWORK] == pytest.approx(prominence_mass(2))


def test_prominence_bounded_by_prevalence_on_simulated_feeds(params, library):
    from src.platform_sim import apply_interaction, create_account, generate_feed
    from src.trial import run_primer

    from .conftest import PRIMERS

    account = run_primer(create_account(params, 2), library, params, PRIMERS)
    for i in range(1, 4):
        account = apply_interaction(account, 'Join', 'Elections', i, library, params)
        feed = generate_feed(account, library, params)
        vectors = compose_vectors(feed, truth(feed), account.history_sources(), universe=library.topics)
        assert sum(vectors.topic_prevalence.values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(vectors.topic_prominence.values()) == pytest.approx(prominence_mass(len(feed)), abs=1e-9)
        assert sum(vectors.source_prominence.values()) == pytest.approx(prominence_mass(len(feed)), abs=1e-9)
        for label, value in vectors.topic_prominence.items():
            assert 0.0 <= value <= vectors.topic_prevalence[label] + 1e-12


def test_category_delta():
    assert composition_delta('treatment', CATEGORY, {'Politics': 0.10}, {'Politics': 0.40},
                             topic='Politics') == pytest.approx(0.30)
    assert composition_delta('control', CATEGORY, {'Cooking': 0.10}, {'Cooking': 0.15}) == pytest.approx(0.05)
    pre, post = {'NFL': 0.2}, {'NFL': 0.7}
    assert composition_delta('treatment', CATEGORY, pre, post, topic='NFL') == \
        -composition_delta('treatment', CATEGORY, post, pre, topic='NFL')
    assert composition_delta('control', CATEGORY, {IN_NETWORK: 0.3}, {IN_NETWORK: 0.5},
                             component=IN_NETWORK) == pytest.approx(0.2)


def test_category_delta_unknown_key():
    with pytest.raises(CompositionError):
        composition_delta('treatment', CATEGORY, {'NFL': 0.1}, {'NFL': 0.2}, topic='Politics')


def test_embedding_delta_is_a_metric():
    assert composition_delta('treatment', EMBEDDING, (0.0, 0.0), (3.0, 4.0)) == pytest.approx(5.0)
    assert composition_delta('control', EMBEDDING, (0.0, 0.0), (3.0, 4.0)) == pytest.approx(5.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b, c = rng.normal(size=(3, 4))
        ab = composition_delta('treatment', EMBEDDING, a, b)
        assert ab == pytest.approx(composition_delta('treatment', EMBEDDING, b, a))
        assert ab <= composition_delta('treatment', EMBEDDING, a, c) + composition_delta('treatment', EMBEDDING, c, b) + 1e-12
    assert composition_delta('treatment', EMBEDDING, a, a) == 0.0
    with pytest.raises(CompositionError):
        composition_delta('treatment', EMBEDDING, (0.0, 0.0), (1.0, 2.0, 3.0))


def test_clusters_recover_separated_blobs():
    rng = np.random.default_rng(5)
    anchors = np.eye(8)[:3]
    labels = np.repeat(['NFL', 'Politics', 'Fitness'], 60)
    index = {'NFL': 0, 'Politics': 1, 'Fitness': 2}
    X = np.array([anchors[index[label]] for label in labels]) + rng.normal(0.0, 0.1 / np.sqrt(8), size=(180, 8))
    model = fit_topic_clusters(X, range(1, 9), true_labels=labels, seed=1)
    assert model.k == 3
    assert len(model.centroids) == 3
    assert cluster_purity(model, labels) >= 0.99
    assert sorted(model.label_map.values()) == ['Fitness', 'NFL', 'Politics']
    assert model.silhouette > 0.5
    assert model.label(X[:1]) == ['NFL']


def blobs(rng, sizes, dim=8, spread=0.1):
    names = ('NFL', 'Politics', 'Fitness', 'Cooking', 'Other')[:len(sizes)]
    labels = np.repeat(names, sizes)
    anchors = np.eye(dim)[:len(sizes)]
    centers = np.repeat(anchors, sizes, axis=0)
    return centers + rng.normal(0.0, spread / np.sqrt(dim), size=centers.shape), labels


def test_elbow_handles_unequal_blob_sizes():
    X, labels = blobs(np.random.default_rng(11), (120, 40, 20))
    model = fit_topic_clusters(X, range(1, 9), true_labels=labels, seed=0)
    assert model.k == 3
    assert cluster_purity(model, labels) >= 0.99


@pytest.mark.slow
def test_clustering_stable_across_seeds():
    good = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X, labels = blobs(rng, tuple(int(s) for s in rng.integers(20, 80, size=3)))
        model = fit_topic_clusters(X, range(1, 9), true_labels=labels, seed=seed)
        assert model.silhouette > 0.5
        if model.k == 3 and cluster_purity(model, labels) >= 0.99:
            good += 1
    assert good >= 19


def test_identical_points_force_one_cluster():
    model = fit_topic_clusters(np.ones((12, 4)), range(1, 5))
    assert model.k == 1
    assert model.silhouette == 0.0


def test_too_few_points():
    with pytest.raises(ClusteringError):
        fit_topic_clusters(np.eye(3), range(1, 9))
