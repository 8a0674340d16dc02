"""Deterministic simulated social platform.

A content library of creators, communities and their posts, plus accounts whose
interaction history drives a homepage feed through planted engagement weights.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import stable_seed

logger = logging.getLogger(__name__)

INTERACTIONS = ('Search', 'Open', 'Like', 'Join', 'Follow')
CONTROL = 'Control'
SEARCH_MODES = ('content', 'communities', 'users')
SEARCH_RESULT_LIMIT = 20
MIN_SEARCH_RESULTS = 5
MAX_ITERATION_INDEX = 5
NO_TOPIC = '-'

_MODE_FOR_INTERACTION = {
    'Search': 'content',
    'Open': 'content',
    'Like': 'content',
    'Join': 'communities',
    'Follow': 'users',
}
_SOURCE_KIND_FOR_MODE = {'communities': 'community', 'users': 'creator'}

_TITLE_WORDS = {
    'NFL': ('touchdown', 'quarterback', 'playoff', 'draft', 'kickoff', 'chiefs'),
    'Politics': ('ballot', 'senate', 'campaign', 'debate', 'election', 'policy'),
    'Fitness': ('workout', 'cardio', 'protein', 'stretch', 'marathon', 'squats'),
    'Cooking': ('recipe', 'skillet', 'pancakes', 'sandwich', 'roast', 'brunch'),
    'Other': ('gadget', 'travel', 'music', 'movie', 'garden', 'puzzle'),
}
_GENERIC_WORDS = ('update', 'story', 'guide', 'review', 'highlights', 'thread')


class SparseLibraryError(ValueError):
    """A search returned fewer results than an interaction needs."""


class InteractionError(ValueError):
    """An interaction request the platform cannot perform."""


@dataclass(frozen=True)
class PostRecord:
    post_id: str
    source_id: str
    true_topic: str
    text: str
    embedding: Optional[Tuple[float, ...]] = None
    created_tick: int = 0
    popularity: float = 0.0
    subtopic: str = ''


@dataclass(frozen=True)
class SourceRecord:
    source_id: str
    kind: str
    primary_topic: str
    topic_diversity: float
    popularity: float
    subtopic: str = ''


@dataclass(frozen=True)
class LibrarySettings:
    sources_per_topic: int = 12
    posts_per_source: int = 50
    topic_diversity: float = 0.1
    history_ticks: int = 48
    embedding_dim: int = 16


@dataclass(frozen=True)
class PlatformParams:
    interaction_weights: Mapping[str, float]
    explore_quota: float = 0.2
    feed_length: int = 30
    freshness_halflife: float = 24.0
    noise_scale: float = 0.05
    cold_start_min_signal: float = 0.5
    dose_saturation: Mapping[str, float] = field(default_factory=lambda: {k: 2.0 for k in INTERACTIONS})
    rng_seed: int = 0
    source_weight: float = 1.5
    available_interactions: Tuple[str, ...] = INTERACTIONS
    carryover: Mapping[str, float] = field(default_factory=dict)
    max_iteration_index: int = MAX_ITERATION_INDEX

    def __post_init__(self):
        errors = []
        for name, weight in self.interaction_weights.items():
            if not math.isfinite(weight) or weight < 0:
                errors.append(f"interaction weight {name}={weight} must be finite and nonnegative")
        for name, s in self.dose_saturation.items():
            if not s > 0:
                errors.append(f"dose saturation {name}={s} must be positive")
        if not 0.0 <= self.explore_quota <= 1.0:
            errors.append(f"explore_quota={self.explore_quota} must be in [0, 1]")
        if self.feed_length < 1:
            errors.append(f"feed_length={self.feed_length} must be >= 1")
        if not self.freshness_halflife > 0:
            errors.append(f"freshness_halflife={self.freshness_halflife} must be positive")
        if self.noise_scale < 0 or self.cold_start_min_signal < 0 or self.source_weight < 0:
            errors.append("noise_scale, cold_start_min_signal and source_weight must be nonnegative")
        for topic, boost in self.carryover.items():
            if not 0.0 <= boost <= 1.0:
                errors.append(f"carryover {topic}={boost} must be in [0, 1]")
        if self.max_iteration_index < 1:
            errors.append(f"max_iteration_index={self.max_iteration_index} must be >= 1")
        if errors:
            raise ValueError(f"Invalid platform parameters: {'; '.join(errors)}")

    def weight(self, interaction: str) -> float:
        return float(self.interaction_weights.get(interaction, 0.0))

    def saturation(self, interaction: str) -> float:
        return float(self.dose_saturation.get(interaction, math.inf))


@dataclass(frozen=True)
class HistoryEntry:
    tick: int
    interaction: str
    topic: str
    query: str
    target_id: str = ''
    source_id: str = ''


@dataclass(frozen=True)
class AccountState:
    account_id: str
    seed: int
    topic_engagement: Mapping[str, float]
    source_engagement: Mapping[str, float]
    interaction_history: Tuple[HistoryEntry, ...] = ()
    clock: int = 0
    dose_counts: Mapping[Tuple[str, str], int] = field(default_factory=dict)

    def history_topics(self, until_tick: Optional[int] = None) -> set:
        return {h.topic for h in self.interaction_history
                if h.interaction != CONTROL and (until_tick is None or h.tick < until_tick)}

    def history_sources(self, until_tick: Optional[int] = None) -> set:
        return {h.source_id for h in self.interaction_history
                if h.source_id and (until_tick is None or h.tick < until_tick)}

    @property
    def engagement_mass(self) -> float:
        return sum(self.topic_engagement.values()) + sum(self.source_engagement.values())


@dataclass(frozen=True)
class FeedEntry:
    rank: int
    post: PostRecord


@dataclass(frozen=True)
class FeedPage:
    account_id: str
    tick: int
    entries: Tuple[FeedEntry, ...]

    def __post_init__(self):
        ranks = [e.rank for e in self.entries]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValueError(f"feed ranks must be exactly 1..{len(ranks)}, got {ranks}")

    def __len__(self):
        return len(self.entries)

    @property
    def posts(self) -> List[PostRecord]:
        return [e.post for e in self.entries]


SearchResult = Union[PostRecord, SourceRecord]


class ContentLibrary:
    """Immutable post/source catalogue shared by every account of a run."""

    def __init__(self, posts: Sequence[PostRecord], sources: Sequence[SourceRecord],
                 topics: Sequence[str], aliases: Optional[Mapping[str, str]] = None,
                 subtopics: Optional[Mapping[str, str]] = None):
        if not posts:
            raise ValueError("content library must not be empty")
        self.posts: Tuple[PostRecord, ...] = tuple(sorted(posts, key=lambda p: p.post_id))
        self.sources: Tuple[SourceRecord, ...] = tuple(sorted(sources, key=lambda s: s.source_id))
        self.topics: Tuple[str, ...] = tuple(topics)
        self.aliases: Dict[str, str] = dict(aliases or {})
        self.subtopics: Dict[str, str] = dict(subtopics or {})
        self._sources_by_id = {s.source_id: s for s in self.sources}
        self._posts_by_id = {p.post_id: p for p in self.posts}

        dims = {len(p.embedding) for p in self.posts if p.embedding is not None}
        if len(dims) > 1:
            raise ValueError(f"library embeddings have mixed dimensions {sorted(dims)}")
        unknown = {p.true_topic for p in self.posts} - set(self.topics)
        if unknown:
            raise ValueError(f"posts carry topics outside the universe: {sorted(unknown)}")

        topic_index = {t: i for i, t in enumerate(self.topics)}
        source_index = {s.source_id: i for i, s in enumerate(self.sources)}
        self.post_topic_idx = np.array([topic_index[p.true_topic] for p in self.posts], dtype=np.int64)
        self.post_source_idx = np.array([source_index[p.source_id] for p in self.posts], dtype=np.int64)
        self.post_created = np.array([p.created_tick for p in self.posts], dtype=float)
        self.post_popularity = np.array([p.popularity for p in self.posts], dtype=float)
        positions = np.arange(len(self.posts))
        self.trending_order = np.lexsort((positions, -self.post_popularity))
        self._search_cache: Dict[Tuple[str, str, str], Tuple[SearchResult, ...]] = {}

    def __len__(self):
        return len(self.posts)

    def post(self, post_id: str) -> PostRecord:
        return self._posts_by_id[post_id]

    def source(self, source_id: str) -> SourceRecord:
        return self._sources_by_id[source_id]

    def resolve_query(self, query: str) -> Tuple[str, str]:
        """Map a query to (topic label, sub-topic or '')."""
        if query in self.subtopics:
            return self.subtopics[query], query
        label = self.aliases.get(query, query)
        if label not in self.topics:
            raise InteractionError(f"unknown topic {query!r}")
        return label, ''

    def ranked_matches(self, label: str, subtopic: str, mode: str) -> Tuple[SearchResult, ...]:
        key = (label, subtopic, mode)
        cached = self._search_cache.get(key)
        if cached is not None:
            return cached
        if mode == 'content':
            items = [p for p in self.posts
                     if p.true_topic == label and (not subtopic or p.subtopic == subtopic)]
        else:
            kind = _SOURCE_KIND_FOR_MODE[mode]
            items = [s for s in self.sources
                     if s.kind == kind and s.primary_topic == label and (not subtopic or s.subtopic == subtopic)]
        id_of = (lambda r: r.post_id) if mode == 'content' else (lambda r: r.source_id)
        ranked = tuple(sorted(items, key=lambda r: (-r.popularity, id_of(r))))
        self._search_cache[key] = ranked
        return ranked


def _title(rng: np.random.Generator, topic: str, subtopic: str, post_id: str) -> str:
    words = _TITLE_WORDS.get(topic, _GENERIC_WORDS)
    first, second = rng.choice(len(words), size=2, replace=False)
    lead = subtopic or topic
    return f"{lead}: {words[first]} {words[second]} {_GENERIC_WORDS[int(rng.integers(len(_GENERIC_WORDS)))]} #{post_id}"


def build_library(params: PlatformParams, settings: LibrarySettings, topics: Sequence[str],
                  aliases: Optional[Mapping[str, str]] = None,
                  subtopics: Optional[Mapping[str, str]] = None,
                  embed: Optional[Callable[[PostRecord], Sequence[float]]] = None) -> ContentLibrary:
    """
    Generate the content library for a run

    Args:
        params: platform parameters (rng_seed seeds generation)
        settings: library sizes, topic diversity, post age range, embedding dimension
        topics: topic label universe
        aliases: query -> label, e.g. "Kansas City Chiefs" -> "NFL"
        subtopics: sub-topic query -> label, e.g. "Breakfast Recipes" -> "Cooking"
        embed: post -> vector; defaults to the topic-anchor provider

    Returns:
        ContentLibrary with sources_per_topic sources per topic (and per sub-topic)
    """
    subtopics = dict(subtopics or {})
    if embed is None:
        from .embeddings import TopicAnchorProvider

        embed = TopicAnchorProvider(topics, dim=settings.embedding_dim, seed=params.rng_seed).embed

    rng = np.random.default_rng(stable_seed('library', params.rng_seed))
    groups: List[Tuple[str, str]] = []
    for label in topics:
        subs = sorted(q for q, lbl in subtopics.items() if lbl == label)
        groups.extend((label, sub) for sub in subs or [''])

    sources: List[SourceRecord] = []
    drafts: List[dict] = []
    for label, subtopic in groups:
        others = [t for t in topics if t != label]
        for j in range(settings.sources_per_topic):
            source = SourceRecord(
                source_id=f"src-{len(sources):04d}",
                kind='creator' if j % 2 == 0 else 'community',
                primary_topic=label,
                topic_diversity=settings.topic_diversity,
                popularity=float(rng.lognormal(0.0, 0.5)),
                subtopic=subtopic,
            )
            sources.append(source)
            n_off = round(settings.topic_diversity * settings.posts_per_source) if others else 0
            off_slots = set(rng.choice(settings.posts_per_source, size=n_off, replace=False).tolist())
            for k in range(settings.posts_per_source):
                topic = others[int(rng.integers(len(others)))] if k in off_slots else label
                drafts.append(dict(
                    source_id=source.source_id,
                    true_topic=topic,
                    subtopic=subtopic if topic == label else '',
                    popularity=source.popularity * float(rng.lognormal(0.0, 0.75)),
                    created_tick=-int(rng.integers(0, settings.history_ticks + 1)),
                ))

    posts = []
    for n, draft in enumerate(drafts):
        post_id = f"post-{n:06d}"
        post = PostRecord(post_id=post_id, text=_title(rng, draft['true_topic'], draft['subtopic'], post_id), **draft)
        posts.append(replace(post, embedding=tuple(float(x) for x in embed(post))))

    library = ContentLibrary(posts, sources, topics, aliases=aliases, subtopics=subtopics)
    logger.info(f"Built content library: {len(sources)} sources, {len(posts)} posts, {len(topics)} topics")
    return library


def create_account(params: PlatformParams, account_seed: int, account_id: Optional[str] = None) -> AccountState:
    """Fresh account: zero engagement, empty history, clock at tick 0."""
    return AccountState(
        account_id=account_id or f"acct-{account_seed}",
        seed=stable_seed('account', params.rng_seed, account_seed),
        topic_engagement={},
        source_engagement={},
    )


def search_platform(account: AccountState, library: ContentLibrary, query_topic: str,
                    mode: str = 'content', limit: int = SEARCH_RESULT_LIMIT) -> List[SearchResult]:
    """
    Search the library for a topic

    Returns posts (content), communities or creators (users) matching the topic,
    by descending popularity with ties broken by ascending identifier.
    """
    if mode not in SEARCH_MODES:
        raise InteractionError(f"unknown search mode {mode!r}")
    label, subtopic = library.resolve_query(query_topic)
    results = library.ranked_matches(label, subtopic, mode)
    if len(results) < MIN_SEARCH_RESULTS:
        raise SparseLibraryError(
            f"search for {query_topic!r} ({mode}) returned {len(results)} results, need {MIN_SEARCH_RESULTS}")
    return list(results[:limit])


def saturation_factor(saturation: float, repetition: int) -> float:
    """Hill-like dose factor s / (s + k - 1) for the k-th identical repetition."""
    if math.isinf(saturation):
        return 1.0
    return saturation / (saturation + repetition - 1)


def apply_interaction(account: AccountState, interaction: str, topic: str, iteration_index: int,
                      library: ContentLibrary, params: PlatformParams) -> AccountState:
    """
    Perform one scripted interaction and advance the clock by one tick

    Search only queries; Open opens the i-th content result; Like opens and likes it;
    Join/Follow target the i-th community/creator result. Control leaves a marker only.
    """
    if interaction != CONTROL and interaction not in INTERACTIONS:
        raise InteractionError(f"unknown interaction {interaction!r}")
    if interaction != CONTROL and interaction not in params.available_interactions:
        raise InteractionError(f"interaction {interaction!r} is not available on this platform")
    if not 1 <= iteration_index <= params.max_iteration_index:
        raise InteractionError(f"invalid iteration index {iteration_index} (1..{params.max_iteration_index})")

    tick = account.clock
    if interaction == CONTROL:
        entry = HistoryEntry(tick=tick, interaction=CONTROL, topic=NO_TOPIC, query=topic)
        return replace(account, interaction_history=account.interaction_history + (entry,), clock=tick + 1)

    label, _ = library.resolve_query(topic)
    results = search_platform(account, library, topic, _MODE_FOR_INTERACTION[interaction])
    target_id = source_id = ''
    if interaction != 'Search':
        if iteration_index > len(results):
            raise InteractionError(f"no result #{iteration_index} for {topic!r}")
        target = results[iteration_index - 1]
        if isinstance(target, PostRecord):
            target_id, source_id = target.post_id, target.source_id
        else:
            target_id = source_id = target.source_id

    key = (topic, interaction)
    repetition = account.dose_counts.get(key, 0) + 1
    increment = params.weight(interaction) * saturation_factor(params.saturation(interaction), repetition)

    topic_engagement = dict(account.topic_engagement)
    topic_engagement[label] = topic_engagement.get(label, 0.0) + increment
    source_engagement = dict(account.source_engagement)
    if source_id:
        source_engagement[source_id] = source_engagement.get(source_id, 0.0) + increment
    dose_counts = dict(account.dose_counts)
    dose_counts[key] = repetition

    entry = HistoryEntry(tick=tick, interaction=interaction, topic=label, query=topic,
                         target_id=target_id, source_id=source_id)
    logger.debug(f"{account.account_id} t={tick}: {interaction} {topic!r} #{iteration_index} (+{increment:.4f})")
    return replace(
        account,
        topic_engagement=topic_engagement,
        source_engagement=source_engagement,
        interaction_history=account.interaction_history + (entry,),
        clock=tick + 1,
        dose_counts=dose_counts,
    )


def trending_feed(account: AccountState, library: ContentLibrary, params: PlatformParams) -> FeedPage:
    length = min(params.feed_length, len(library))
    order = library.trending_order[:length]
    entries = tuple(FeedEntry(rank=r + 1, post=library.posts[i]) for r, i in enumerate(order))
    return FeedPage(account_id=account.account_id, tick=account.clock, entries=entries)


def _systematic_round(weights: np.ndarray, total: int, offset: float) -> np.ndarray:
    """
    Split total slots in proportion to weights

    Every count is the floor or ceiling of its exact share and the counts sum to
    total; over a uniform offset in [0, 1) each count equals its share on average.
    """
    weights = np.asarray(weights, dtype=float)
    if total <= 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=int)
    edges = np.round(np.cumsum(weights / weights.sum() * total), 9)
    cuts = np.floor(np.concatenate([[0.0], edges]) + offset)
    return np.diff(cuts).astype(int)


def engagement_order(account: AccountState) -> List[str]:
    """Engaged topics in the order the account first interacted with them."""
    order: List[str] = []
    for h in account.interaction_history:
        if h.interaction != CONTROL and h.topic not in order and account.topic_engagement.get(h.topic, 0.0) > 0:
            order.append(h.topic)
    return order


def _carryover(quotas: np.ndarray, account: AccountState, library: ContentLibrary,
               params: PlatformParams, length: int) -> np.ndarray:
    # the topic engaged right after t gains carryover[t] * length slots from the oldest engaged topic
    order = engagement_order(account)
    if not params.carryover or len(order) < 2:
        return quotas
    index = {t: i for i, t in enumerate(library.topics)}
    quotas = quotas.copy()
    oldest = index[order[0]]
    for previous, current in zip(order, order[1:]):
        boost = min(params.carryover.get(previous, 0.0) * length, quotas[oldest])
        if boost > 0:
            quotas[oldest] -= boost
            quotas[index[current]] += boost
    return quotas


def _explore_sample(library: ContentLibrary, related: np.ndarray, n_explore: int,
                    account_rng: np.random.Generator, rng: np.random.Generator) -> np.ndarray:
    """Explore posts: slots split evenly over unrelated topics, posts drawn uniformly within each."""
    unrelated = ~related
    topics = np.unique(library.post_topic_idx[unrelated])
    if n_explore <= 0 or topics.size == 0:
        return np.array([], dtype=np.int64)
    # the split depends on the account and its unrelated topics only, not on the tick
    order = account_rng.permutation(topics)
    counts = _systematic_round(np.ones(order.size), n_explore, account_rng.random())
    picked: List[int] = []
    for t_idx, count in zip(order, counts):
        pool = np.flatnonzero(unrelated & (library.post_topic_idx == t_idx))
        picked.extend(rng.choice(pool, size=min(int(count), pool.size), replace=False).tolist())
    if len(picked) < n_explore:
        rest = np.setdiff1d(np.flatnonzero(unrelated), picked)
        picked.extend(rng.choice(rest, size=min(n_explore - len(picked), rest.size), replace=False).tolist())
    return np.array(picked, dtype=np.int64)


def generate_feed(account: AccountState, library: ContentLibrary, params: PlatformParams) -> FeedPage:
    """
    Produce the ranked homepage feed for an account at its current tick

    Below cold_start_min_signal the feed is the popularity-ranked trending feed.
    Otherwise ceil(explore_quota * L) explore slots hold posts unrelated to any engaged
    topic or source, at uniformly sampled ranks. The remaining exploit slots are split
    across engaged topics in proportion to log(1 + topic engagement), each topic
    contributing its best-scoring posts, where
    score = topic engagement + source_weight * source engagement + freshness + noise.
    Exploit posts take the free ranks by descending score.
    """
    if account.engagement_mass < params.cold_start_min_signal:
        return trending_feed(account, library, params)

    n_posts = len(library)
    length = min(params.feed_length, n_posts)
    rng = np.random.default_rng([params.rng_seed, account.seed, account.clock])
    account_rng = np.random.default_rng([params.rng_seed, account.seed])

    topic_eng = np.array([account.topic_engagement.get(t, 0.0) for t in library.topics])
    source_eng = np.array([account.source_engagement.get(s.source_id, 0.0) for s in library.sources])
    post_topic_eng = topic_eng[library.post_topic_idx]
    post_source_eng = source_eng[library.post_source_idx]
    age = np.maximum(account.clock - library.post_created, 0.0)
    freshness = np.exp(-age * math.log(2) / params.freshness_halflife)
    noise = rng.standard_normal(n_posts) * params.noise_scale
    jitter = np.exp(rng.standard_normal(len(library.topics)) * params.noise_scale)
    score = post_topic_eng + params.source_weight * post_source_eng + freshness + noise
    related = (post_topic_eng > 0) | (post_source_eng > 0)

    n_explore = min(length, math.ceil(params.explore_quota * length - 1e-9))
    explore = _explore_sample(library, related, n_explore, account_rng, rng)
    explore_ranks = np.sort(rng.choice(length, size=len(explore), replace=False))

    exploit_slots = length - len(explore)
    weights = np.log1p(topic_eng) * jitter
    quotas = weights / weights.sum() * exploit_slots if weights.sum() > 0 else np.zeros(len(weights))
    quotas = _carryover(quotas, account, library, params, length)
    counts = _systematic_round(quotas, exploit_slots, rng.random())

    positions = np.arange(n_posts)
    by_score = np.lexsort((positions, -score))
    chosen: List[int] = []
    taken = np.zeros(n_posts, dtype=bool)
    taken[explore] = True
    for t_idx, count in enumerate(counts):
        if count == 0:
            continue
        pool = by_score[(library.post_topic_idx[by_score] == t_idx) & ~taken[by_score]][:count]
        taken[pool] = True
        chosen.extend(pool.tolist())
    if len(chosen) < exploit_slots:
        # topic pools exhausted: related posts first, then anything left
        for mask in (related, np.ones(n_posts, dtype=bool)):
            extra = by_score[mask[by_score] & ~taken[by_score]][:exploit_slots - len(chosen)]
            taken[extra] = True
            chosen.extend(extra.tolist())
    chosen.sort(key=lambda i: (-score[i], i))

    slots: List[Optional[int]] = [None] * length
    for rank_index, post_index in zip(explore_ranks, explore):
        slots[int(rank_index)] = int(post_index)
    fill = iter(chosen)
    for r in range(length):
        if slots[r] is None:
            slots[r] = next(fill)
    entries = tuple(FeedEntry(rank=r + 1, post=library.posts[i]) for r, i in enumerate(slots))
    return FeedPage(account_id=account.account_id, tick=account.clock, entries=entries)
