import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import silhouette_score

from .platform_sim import FeedPage

logger = logging.getLogger(__name__)

IN_NETWORK = 'in-network'
OUT_NETWORK = 'out-of-network'
CONTROL_TOPIC = 'Cooking'
CATEGORY = 'category'
EMBEDDING = 'embedding'
SILHOUETTE_SAMPLE = 5000


class CompositionError(ValueError):
    """A feed or vector that composition measures cannot be computed on."""


class ClusteringError(ValueError):
    """Clustering input that cannot support the requested candidates."""


@dataclass(frozen=True)
class CompositionVectors:
    topic_prevalence: Dict[str, float]
    topic_prominence: Dict[str, float]
    avg_embedding: np.ndarray
    source_prevalence: Dict[str, float]
    source_prominence: Dict[str, float]


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    inertia_curve: Dict[int, float]
    silhouette: float
    label_map: Dict[int, str]
    assignments: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def predict(self, embeddings) -> np.ndarray:
        """Nearest-centroid cluster index for each row."""
        X = np.atleast_2d(np.asarray(embeddings, dtype=float))
        distances = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return distances.argmin(axis=1)

    def label(self, embeddings) -> list:
        return [self.label_map[int(c)] for c in self.predict(embeddings)]


def _check_feed(feed: FeedPage):
    if not feed.entries:
        raise CompositionError(f"empty feed for {feed.account_id} at tick {feed.tick}")


def compute_topic_vectors(feed: FeedPage, labels: Mapping[str, str], universe: Sequence[str] = (),
                          embeddings: Optional[Mapping[str, np.ndarray]] = None
                          ) -> Tuple[Dict[str, float], Dict[str, float], np.ndarray]:
    """
    Topic prevalence, Zipf-weighted topic prominence and mean embedding of a feed

    Args:
        feed: ranked snapshot
        labels: post_id -> topic label
        universe: labels reported with 0 when absent from the feed
        embeddings: post_id -> vector, defaulting to the post's own embedding

    Returns:
        (prevalence, prominence, avg_embedding)
    """
    _check_feed(feed)
    size = len(feed)
    prevalence = {label: 0.0 for label in universe}
    prominence = {label: 0.0 for label in universe}
    vectors = []
    for entry in feed.entries:
        post = entry.post
        if post.post_id not in labels:
            raise CompositionError(f"post {post.post_id} has no topic label")
        label = labels[post.post_id]
        prevalence[label] = prevalence.get(label, 0.0) + 1.0 / size
        prominence[label] = prominence.get(label, 0.0) + 1.0 / (entry.rank * size)
        vector = embeddings[post.post_id] if embeddings is not None else post.embedding
        if vector is None:
            raise CompositionError(f"post {post.post_id} has no embedding")
        vectors.append(np.asarray(vector, dtype=float))
    if len({v.shape for v in vectors}) > 1:
        raise CompositionError(f"feed {feed.account_id}@{feed.tick} mixes embedding dimensions")
    return prevalence, prominence, np.mean(vectors, axis=0)


def compute_source_vectors(feed: FeedPage, history_sources: Iterable[str]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """In-network vs out-of-network prevalence and prominence; in-network = source seen in history."""
    _check_feed(feed)
    network = set(history_sources)
    size = len(feed)
    prevalence = {IN_NETWORK: 0.0, OUT_NETWORK: 0.0}
    prominence = {IN_NETWORK: 0.0, OUT_NETWORK: 0.0}
    for entry in feed.entries:
        key = IN_NETWORK if entry.post.source_id in network else OUT_NETWORK
        prevalence[key] += 1.0 / size
        prominence[key] += 1.0 / (entry.rank * size)
    return prevalence, prominence


def compose_vectors(feed: FeedPage, labels: Mapping[str, str], history_sources: Iterable[str],
                    universe: Sequence[str] = (),
                    embeddings: Optional[Mapping[str, np.ndarray]] = None) -> CompositionVectors:
    topic_prevalence, topic_prominence, avg_embedding = compute_topic_vectors(feed, labels, universe, embeddings)
    source_prevalence, source_prominence = compute_source_vectors(feed, history_sources)
    return CompositionVectors(
        topic_prevalence=topic_prevalence,
        topic_prominence=topic_prominence,
        avg_embedding=avg_embedding,
        source_prevalence=source_prevalence,
        source_prominence=source_prominence,
    )


def composition_delta(group: str, kind: str, v_pre, v_post, topic: Optional[str] = None,
                      component: Optional[str] = None) -> float:
    """
    Change of one composition vector across a block

    category: v_post[x] - v_pre[x], with x the treatment topic (or Cooking for
    controls) unless component names the key directly (source vectors use in-network).
    embedding: Euclidean distance, identical for both groups.
    """
    if kind == EMBEDDING:
        pre = np.asarray(v_pre, dtype=float)
        post = np.asarray(v_post, dtype=float)
        if pre.shape != post.shape:
            raise CompositionError(f"embedding dimension mismatch: {pre.shape} vs {post.shape}")
        return float(np.linalg.norm(post - pre))
    if kind != CATEGORY:
        raise CompositionError(f"unknown delta kind {kind!r}")

    if component is not None:
        key = component
    elif group == 'control':
        key = CONTROL_TOPIC
    else:
        key = topic
    if key is None or key not in v_pre or key not in v_post:
        raise CompositionError(f"unknown composition key {key!r}")
    return float(v_post[key] - v_pre[key])


def _elbow(ks: Sequence[int], inertia: Sequence[float]) -> int:
    """k at the largest discrete second difference of the log-inertia curve."""
    if len(ks) < 3:
        return ks[-1]
    inertia = np.asarray(inertia, dtype=float)
    values = np.log(np.maximum(inertia, max(inertia[0] * 1e-12, np.finfo(float).tiny)))
    curvature = values[:-2] - 2 * values[1:-1] + values[2:]
    return ks[1 + int(np.argmax(curvature))]


def _majority_labels(assignments: np.ndarray, true_labels: Sequence[str], k: int) -> Dict[int, str]:
    label_map = {}
    true_labels = np.asarray(true_labels)
    for c in range(k):
        members = true_labels[assignments == c]
        if members.size == 0:
            label_map[c] = f"cluster-{c}"
            continue
        names, counts = np.unique(members, return_counts=True)
        label_map[c] = str(names[int(np.argmax(counts))])
    return label_map


def fit_topic_clusters(embeddings, k_candidates: Iterable[int] = range(1, 9),
                       true_labels: Optional[Sequence[str]] = None,
                       label_map: Optional[Mapping[int, str]] = None,
                       seed: int = 0) -> ClusterModel:
    """
    K-means over post embeddings with the elbow rule choosing k

    Each candidate k runs k-means++ with 20 restarts and at most 300 iterations;
    the chosen k is reported with its silhouette. Clusters are named by the
    majority true label when true_labels is given, else by label_map.

    Raises:
        ClusteringError: fewer points than the largest candidate k
    """
    X = np.asarray(embeddings, dtype=float)
    ks = sorted(set(int(k) for k in k_candidates))
    if X.ndim != 2 or not ks or ks[0] < 1:
        raise ClusteringError("embeddings must be a 2-D array and candidates positive integers")
    if X.shape[0] < ks[-1]:
        raise ClusteringError(f"{X.shape[0]} points cannot support k={ks[-1]}")
    if true_labels is not None and len(true_labels) != X.shape[0]:
        raise ClusteringError("true_labels must align with embeddings")

    if np.allclose(X, X[0]):
        logger.warning("All embeddings are identical; forcing k=1")
        assignments = np.zeros(X.shape[0], dtype=int)
        names = _majority_labels(assignments, true_labels, 1) if true_labels is not None else dict(label_map or {0: 'cluster-0'})
        return ClusterModel(k=1, centroids=X[:1].copy(), inertia_curve={1: 0.0}, silhouette=0.0,
                            label_map=names, assignments=assignments)

    distinct = np.unique(X, axis=0).shape[0]
    usable = [k for k in ks if k <= distinct]
    fits = {}
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        for k in usable:
            fits[k] = KMeans(n_clusters=k, init='k-means++', n_init=20, max_iter=300, tol=1e-6,
                             random_state=seed).fit(X)
    inertia_curve = {k: float(fits[k].inertia_) for k in usable}
    k = _elbow(usable, [inertia_curve[k] for k in usable])
    chosen = fits[k]
    assignments = chosen.labels_.astype(int)

    if 1 < k < X.shape[0]:
        sample = SILHOUETTE_SAMPLE if X.shape[0] > SILHOUETTE_SAMPLE else None
        silhouette = float(silhouette_score(X, assignments, sample_size=sample, random_state=seed))
    else:
        silhouette = 0.0

    if true_labels is not None:
        names = _majority_labels(assignments, true_labels, k)
    elif label_map is not None:
        names = {c: label_map.get(c, f"cluster-{c}") for c in range(k)}
    else:
        names = {c: f"cluster-{c}" for c in range(k)}

    logger.info(f"Clustering chose k={k} (silhouette {silhouette:.3f}) from candidates {usable}")
    return ClusterModel(k=k, centroids=chosen.cluster_centers_.copy(), inertia_curve=inertia_curve,
                        silhouette=silhouette, label_map=names, assignments=assignments)


def cluster_purity(model: ClusterModel, true_labels: Sequence[str]) -> float:
    """Fraction of points whose cluster's majority label equals their own label."""
    predicted = [model.label_map[int(c)] for c in model.assignments]
    return float(np.mean([p == t for p, t in zip(predicted, true_labels)]))
