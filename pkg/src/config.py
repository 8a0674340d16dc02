import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv

from .platform_sim import INTERACTIONS, LibrarySettings, PlatformParams
from .trial import DEFAULT_PRIMER_TOPICS, PRIMER_DOSES, PRIMER_INTERACTION
from .utils import hash_payload, stable_seed

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    # Environment
    ENVIRONMENT = os.getenv('ENVIRONMENT', 'development').strip()
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').strip().upper()
    LOG_DIR = os.getenv('LOG_DIR', '').strip()

    # External embedding service (optional, never used by tests)
    EMBEDDING_API_URL = os.getenv('EMBEDDING_API_URL', '').strip()
    EMBEDDING_API_KEY = os.getenv('EMBEDDING_API_KEY', '').strip()
    EMBEDDING_MODEL = os.getenv('EMBEDDING_MODEL', 'text-embedding-3-small').strip()

    @classmethod
    def validate_embedding_service(cls):
        """Validate settings required by the external embedding provider"""
        errors = []

        if not cls.EMBEDDING_API_URL:
            errors.append('EMBEDDING_API_URL is required')
        if not cls.EMBEDDING_API_KEY:
            errors.append('EMBEDDING_API_KEY is required')

        if errors:
            raise ValueError(f"Configuration errors: {'; '.join(errors)}")

    @classmethod
    def is_production(cls):
        return cls.ENVIRONMENT.lower() == 'production'


class ConfigError(ValueError):
    """All violations found in an experiment config, reported together."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__(f"Configuration errors: {'; '.join(self.errors)}")


PRIMER_LABEL = 'Cooking'
OTHER_LABEL = 'Other'
LABELING_METHODS = ('cluster', 'truth')
EMBEDDING_PROVIDERS = ('topic-anchor', 'http')
MAX_DOSES = 20

DEFAULT_WEIGHTS = {'Search': 0.0, 'Open': 0.4, 'Like': 0.8, 'Join': 1.2, 'Follow': 0.6}
DEFAULT_SATURATION = {name: 2.0 for name in INTERACTIONS}

_SECTION_KEYS = {
    'experiment': {'topics', 'interactions', 'puppets_per_cell', 'doses', 'primer_topics', 'seed', 'output_dir'},
    'topic_labels': None,
    'platform': {'explore_quota', 'feed_length', 'freshness_halflife', 'noise_scale', 'cold_start_min_signal',
                 'source_weight', 'rng_seed', 'available_interactions', 'interaction_weights', 'dose_saturation',
                 'carryover'},
    'library': {'sources_per_topic', 'posts_per_source', 'topic_diversity', 'history_ticks', 'embedding_dim'},
    'embedding': {'provider', 'noise', 'fallback'},
    'analysis': {'labeling', 'k_min', 'k_max', 'effect_dose', 'alpha', 'epsilon'},
}
_REQUIRED = {'experiment': ('topics', 'interactions', 'seed')}


@dataclass(frozen=True)
class EmbeddingSettings:
    provider: str = 'topic-anchor'
    noise: float = 0.1
    fallback: bool = True


@dataclass(frozen=True)
class AnalysisSettings:
    labeling: str = 'cluster'
    k_min: int = 1
    k_max: int = 8
    effect_dose: int = 5
    alpha: float = 0.05
    epsilon: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    topics: Tuple[str, ...]
    interactions: Tuple[str, ...]
    puppets_per_cell: int
    doses: int
    primer_topics: Tuple[str, ...]
    seed: int
    output_dir: str
    topic_labels: Mapping[str, str]
    platform: PlatformParams
    library: LibrarySettings = field(default_factory=LibrarySettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def label_for(self, query: str) -> str:
        return self.topic_labels.get(query, query)

    @property
    def treatment_labels(self) -> Tuple[str, ...]:
        return tuple(self.label_for(t) for t in self.topics)

    @property
    def subtopics(self) -> Dict[str, str]:
        return {q: self.label_for(q) for q in self.primer_topics}

    @property
    def aliases(self) -> Dict[str, str]:
        return {q: lbl for q, lbl in self.topic_labels.items() if q not in self.primer_topics}

    @property
    def label_universe(self) -> Tuple[str, ...]:
        labels = list(self.treatment_labels)
        for extra in (PRIMER_LABEL, OTHER_LABEL):
            if extra not in labels:
                labels.append(extra)
        return tuple(labels)

    def to_dict(self) -> Dict[str, Any]:
        """Canonical mapping in the config-file schema (used for hashing and manifests)."""
        p = self.platform
        return {
            'experiment': {
                'topics': list(self.topics),
                'interactions': list(self.interactions),
                'puppets_per_cell': self.puppets_per_cell,
                'doses': self.doses,
                'primer_topics': list(self.primer_topics),
                'seed': self.seed,
                'output_dir': self.output_dir,
            },
            'topic_labels': dict(sorted(self.topic_labels.items())),
            'platform': {
                'explore_quota': p.explore_quota,
                'feed_length': p.feed_length,
                'freshness_halflife': p.freshness_halflife,
                'noise_scale': p.noise_scale,
                'cold_start_min_signal': p.cold_start_min_signal,
                'source_weight': p.source_weight,
                'rng_seed': p.rng_seed,
                'available_interactions': list(p.available_interactions),
                'interaction_weights': dict(sorted(p.interaction_weights.items())),
                'dose_saturation': {k: ('inf' if math.isinf(v) else v)
                                    for k, v in sorted(p.dose_saturation.items())},
                'carryover': dict(sorted(p.carryover.items())),
            },
            'library': {
                'sources_per_topic': self.library.sources_per_topic,
                'posts_per_source': self.library.posts_per_source,
                'topic_diversity': self.library.topic_diversity,
                'history_ticks': self.library.history_ticks,
                'embedding_dim': self.library.embedding_dim,
            },
            'embedding': {
                'provider': self.embedding.provider,
                'noise': self.embedding.noise,
                'fallback': self.embedding.fallback,
            },
            'analysis': {
                'labeling': self.analysis.labeling,
                'k_min': self.analysis.k_min,
                'k_max': self.analysis.k_max,
                'effect_dose': self.analysis.effect_dose,
                'alpha': self.analysis.alpha,
                'epsilon': self.analysis.epsilon,
            },
        }

    def config_hash(self) -> str:
        return hash_payload(self.to_dict())


class _Reader:
    """Typed access to one config section that records violations instead of raising."""

    def __init__(self, section: str, data: Mapping[str, Any], errors: List[str]):
        self.section = section
        self.data = data
        self.errors = errors

    def _fail(self, key: str, message: str):
        self.errors.append(f"{self.section}.{key}: {message}")

    def integer(self, key, default=None, minimum=None, maximum=None):
        value = self.data.get(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            self._fail(key, f"expected an integer, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self._fail(key, f"must be >= {minimum}, got {value}")
        if maximum is not None and value > maximum:
            self._fail(key, f"must be <= {maximum}, got {value}")
        return value

    def real(self, key, default=None, minimum=None, maximum=None, allow_inf=False, strict_minimum=False):
        value = self.data.get(key, default)
        if value is None:
            return None
        if allow_inf and isinstance(value, str) and value.strip().lower() in ('inf', 'infinity'):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self._fail(key, f"expected a number, got {value!r}")
            return default
        value = float(value)
        if math.isnan(value) or (math.isinf(value) and not allow_inf):
            self._fail(key, f"must be finite, got {value}")
            return default
        if minimum is not None and (value < minimum or (strict_minimum and value <= minimum)):
            bound = '>' if strict_minimum else '>='
            self._fail(key, f"must be {bound} {minimum}, got {value}")
        if maximum is not None and value > maximum:
            self._fail(key, f"must be <= {maximum}, got {value}")
        return value

    def string(self, key, default=None, choices=None):
        value = self.data.get(key, default)
        if value is None:
            return None
        if not isinstance(value, str):
            self._fail(key, f"expected a string, got {value!r}")
            return default
        if choices is not None and value not in choices:
            self._fail(key, f"must be one of {', '.join(choices)}, got {value!r}")
        return value

    def boolean(self, key, default=None):
        value = self.data.get(key, default)
        if not isinstance(value, bool):
            self._fail(key, f"expected true/false, got {value!r}")
            return default
        return value

    def string_list(self, key, default=None, nonempty=True):
        value = self.data.get(key, default)
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            self._fail(key, f"expected a list of strings, got {value!r}")
            return tuple(default or ())
        if nonempty and not value:
            self._fail(key, "must not be empty")
        if len(set(value)) != len(value):
            self._fail(key, "entries must be distinct")
        return tuple(value)


def _check_keys(data: Mapping[str, Any], errors: List[str], optional=()):
    for section, value in data.items():
        if section not in _SECTION_KEYS:
            errors.append(f"unknown section [{section}]")
            continue
        if not isinstance(value, Mapping):
            errors.append(f"[{section}] must be a table")
            continue
        allowed = _SECTION_KEYS[section]
        if allowed is not None:
            for key in value:
                if key not in allowed:
                    errors.append(f"{section}.{key}: unknown key")
    for section, keys in _REQUIRED.items():
        present = data.get(section) if isinstance(data.get(section), Mapping) else {}
        for key in keys:
            if key not in present and key not in optional:
                errors.append(f"{section}.{key}: missing required key")


def _weight_table(name, raw, interactions, defaults, errors, allow_inf=False):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        errors.append(f"platform.{name}: must be a table")
        return dict(defaults)
    table = dict(defaults)
    reader = _Reader(f"platform.{name}", raw, errors)
    for key in raw:
        if key not in interactions:
            errors.append(f"platform.{name}.{key}: unknown interaction")
            continue
        if allow_inf:
            value = reader.real(key, allow_inf=True, minimum=0.0, strict_minimum=True)
        else:
            value = reader.real(key, minimum=0.0)
        if value is not None:
            table[key] = value
    return table


def config_from_mapping(data: Mapping[str, Any], seed_override: Optional[int] = None) -> ExperimentConfig:
    """Validate a parsed config mapping, collecting every violation."""
    errors: List[str] = []
    if not isinstance(data, Mapping):
        raise ConfigError(['config root must be a table'])
    _check_keys(data, errors, optional=('seed',) if seed_override is not None else ())

    def section(name):
        value = data.get(name, {})
        return value if isinstance(value, Mapping) else {}

    exp = _Reader('experiment', section('experiment'), errors)
    topics = exp.string_list('topics', default=()) or ()
    interactions = exp.string_list('interactions', default=()) or ()
    for name in interactions:
        if name not in INTERACTIONS:
            errors.append(f"experiment.interactions: undefined interaction {name!r}")
    n = exp.integer('puppets_per_cell', default=4, minimum=1)
    doses = exp.integer('doses', default=5, minimum=1, maximum=MAX_DOSES)
    primer_topics = exp.string_list('primer_topics', default=list(DEFAULT_PRIMER_TOPICS))
    seed = exp.integer('seed', default=None, minimum=0)
    if seed_override is not None:
        seed = seed_override
    output_dir = exp.string('output_dir', default='runs/default')

    labels_raw = data.get('topic_labels', {})
    topic_labels: Dict[str, str] = {}
    if isinstance(labels_raw, Mapping):
        for query, label in labels_raw.items():
            if not isinstance(label, str) or not label:
                errors.append(f"topic_labels.{query}: expected a label string, got {label!r}")
            else:
                topic_labels[query] = label
    for primer in primer_topics or ():
        topic_labels.setdefault(primer, PRIMER_LABEL)
    treatment_labels = [topic_labels.get(t, t) for t in topics]
    if len(set(treatment_labels)) != len(treatment_labels):
        errors.append("topic_labels: treatment topics must map to distinct labels")
    for topic, label in zip(topics, treatment_labels):
        if label in (PRIMER_LABEL, OTHER_LABEL):
            errors.append(f"topic_labels.{topic}: treatment label may not be {label!r}")

    plat = _Reader('platform', section('platform'), errors)
    available = plat.string_list('available_interactions', default=list(INTERACTIONS)) or ()
    for name in available:
        if name not in INTERACTIONS:
            errors.append(f"platform.available_interactions: undefined interaction {name!r}")
    for name in interactions:
        if name in INTERACTIONS and name not in available:
            errors.append(f"experiment.interactions: {name!r} is not available on this platform")
    if available and PRIMER_INTERACTION not in available:
        errors.append(f"platform.available_interactions: primer needs {PRIMER_INTERACTION!r}")
    weights = _weight_table('interaction_weights', section('platform').get('interaction_weights'),
                            INTERACTIONS, DEFAULT_WEIGHTS, errors)
    saturation = _weight_table('dose_saturation', section('platform').get('dose_saturation'),
                               INTERACTIONS, DEFAULT_SATURATION, errors, allow_inf=True)
    carryover_raw = section('platform').get('carryover', {})
    carryover: Dict[str, float] = {}
    if not isinstance(carryover_raw, Mapping):
        errors.append("platform.carryover: must be a table")
    else:
        label_universe = set(treatment_labels) | {PRIMER_LABEL, OTHER_LABEL}
        carry_reader = _Reader('platform.carryover', carryover_raw, errors)
        for key in carryover_raw:
            if key not in label_universe:
                errors.append(f"platform.carryover.{key}: unknown topic label")
                continue
            value = carry_reader.real(key, minimum=0.0, maximum=1.0)
            if value is not None:
                carryover[key] = value
    rng_seed = plat.integer('rng_seed', default=None, minimum=0)
    if rng_seed is None and seed is not None:
        rng_seed = stable_seed('platform', seed) % (2 ** 63)
    platform_values = dict(
        explore_quota=plat.real('explore_quota', default=0.2, minimum=0.0, maximum=1.0),
        feed_length=plat.integer('feed_length', default=30, minimum=1),
        freshness_halflife=plat.real('freshness_halflife', default=24.0, minimum=0.0, strict_minimum=True),
        noise_scale=plat.real('noise_scale', default=0.05, minimum=0.0),
        cold_start_min_signal=plat.real('cold_start_min_signal', default=0.5, minimum=0.0),
        source_weight=plat.real('source_weight', default=1.5, minimum=0.0),
    )

    lib = _Reader('library', section('library'), errors)
    library = LibrarySettings(
        sources_per_topic=lib.integer('sources_per_topic', default=12, minimum=10),
        posts_per_source=lib.integer('posts_per_source', default=50, minimum=50),
        topic_diversity=lib.real('topic_diversity', default=0.1, minimum=0.0, maximum=1.0),
        history_ticks=lib.integer('history_ticks', default=48, minimum=0),
        embedding_dim=lib.integer('embedding_dim', default=16, minimum=1),
    )
    universe_size = len(set(treatment_labels) | {PRIMER_LABEL, OTHER_LABEL})
    if library.embedding_dim is not None and library.embedding_dim < universe_size:
        errors.append(f"library.embedding_dim: must be >= number of topic labels ({universe_size})")

    emb = _Reader('embedding', section('embedding'), errors)
    embedding = EmbeddingSettings(
        provider=emb.string('provider', default='topic-anchor', choices=EMBEDDING_PROVIDERS),
        noise=emb.real('noise', default=0.1, minimum=0.0),
        fallback=emb.boolean('fallback', default=True),
    )

    ana = _Reader('analysis', section('analysis'), errors)
    k_min = ana.integer('k_min', default=1, minimum=1)
    k_max = ana.integer('k_max', default=8, minimum=1)
    if k_min is not None and k_max is not None and k_min > k_max:
        errors.append(f"analysis.k_min: must be <= k_max ({k_min} > {k_max})")
    effect_dose = ana.integer('effect_dose', default=doses or 5, minimum=1)
    if effect_dose is not None and doses is not None and effect_dose > doses:
        errors.append(f"analysis.effect_dose: must be <= experiment.doses ({effect_dose} > {doses})")
    alpha = ana.real('alpha', default=0.05, minimum=0.0, maximum=1.0, strict_minimum=True)
    analysis = AnalysisSettings(
        labeling=ana.string('labeling', default='cluster', choices=LABELING_METHODS),
        k_min=k_min,
        k_max=k_max,
        effect_dose=effect_dose,
        alpha=alpha,
        epsilon=ana.real('epsilon', default=0.01, minimum=0.0, strict_minimum=True),
    )

    if errors:
        raise ConfigError(errors)

    platform = PlatformParams(
        interaction_weights=weights,
        dose_saturation=saturation,
        rng_seed=rng_seed,
        available_interactions=tuple(available),
        carryover=carryover,
        max_iteration_index=max(PRIMER_DOSES, doses),
        **platform_values,
    )
    return ExperimentConfig(
        topics=tuple(topics),
        interactions=tuple(interactions),
        puppets_per_cell=n,
        doses=doses,
        primer_topics=tuple(primer_topics),
        seed=seed,
        output_dir=output_dir,
        topic_labels=topic_labels,
        platform=platform,
        library=library,
        embedding=embedding,
        analysis=analysis,
    )


def parse_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """
    Parse and validate an experiment config file

    Args:
        path: TOML file with [experiment], [platform], ... sections
        seed_override: value of --seed, replacing experiment.seed

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError listing every violation found
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{path}: {e}"]) from e

    config = config_from_mapping(data, seed_override=seed_override)
    logger.info(f"Loaded config {path} (seed {config.seed}, {len(config.topics)} topics, "
                f"{len(config.interactions)} interactions)")
    return config
