import logging
import math
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

from .config import Config, EmbeddingSettings
from .utils import stable_seed

logger = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    """An embedding provider could not produce a vector for a post."""


class EmbeddingProvider(Protocol):
    name: str

    def embed(self, post) -> np.ndarray:
        ...


class TopicAnchorProvider:
    """
    Offline default provider

    A post's vector is the unit basis vector of its true topic plus Gaussian noise
    seeded by the post text. noise is the expected norm of the noise vector.
    """

    name = 'topic-anchor'

    def __init__(self, topics: Sequence[str], dim: int = 16, noise: float = 0.1, seed: int = 0):
        if dim < len(topics):
            raise ValueError(f"embedding dimension {dim} is smaller than the topic universe ({len(topics)})")
        self.topics = tuple(topics)
        self.dim = dim
        self.noise = noise
        self.seed = seed
        self._index = {t: i for i, t in enumerate(self.topics)}

    def embed(self, post) -> np.ndarray:
        if post.true_topic not in self._index:
            raise EmbeddingError(f"{post.post_id}: topic {post.true_topic!r} has no anchor")
        vector = np.zeros(self.dim)
        vector[self._index[post.true_topic]] = 1.0
        rng = np.random.default_rng(stable_seed('embed', self.seed, post.text))
        return vector + rng.normal(0.0, self.noise / math.sqrt(self.dim), size=self.dim)


class HttpEmbeddingProvider:
    """Client for an OpenAI-style /embeddings endpoint"""

    name = 'http'

    def __init__(self, api_url: str, api_key: str, model: str, dim: int, timeout: int = 30):
        self.api_url = api_url
        self.api_key = api_key
        self.model = model
        self.dim = dim
        self.timeout = timeout

    @classmethod
    def from_env(cls, dim: int) -> 'HttpEmbeddingProvider':
        Config.validate_embedding_service()
        return cls(Config.EMBEDDING_API_URL, Config.EMBEDDING_API_KEY, Config.EMBEDDING_MODEL, dim)

    def embed(self, post) -> np.ndarray:
        """
        Request the embedding of a post's text

        Raises:
            EmbeddingError on transport failure, non-200 status or a malformed body
        """
        headers = {
            'Content-Type': 'application/json',
            'Authorization': f"Bearer {self.api_key}",
        }
        payload = {'model': self.model, 'input': post.text, 'dimensions': self.dim}
        try:
            response = requests.post(self.api_url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as e:
            raise EmbeddingError(f"{post.post_id}: embedding request failed: {e}") from e

        logger.debug(f"Embedding response status: {response.status_code}")
        if response.status_code != 200:
            raise EmbeddingError(f"{post.post_id}: embedding service returned {response.status_code} - {response.text[:200]}")
        try:
            vector = np.asarray(response.json()['data'][0]['embedding'], dtype=float)
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise EmbeddingError(f"{post.post_id}: malformed embedding response") from e
        if vector.shape != (self.dim,):
            raise EmbeddingError(f"{post.post_id}: expected dimension {self.dim}, got {vector.shape}")
        return vector


class FallbackProvider:
    """Use primary, switching to fallback for the rest of the run after the first failure."""

    def __init__(self, primary, fallback):
        self.primary = primary
        self.fallback = fallback
        self.failed = False

    @property
    def name(self):
        return self.fallback.name if self.failed else self.primary.name

    def embed(self, post) -> np.ndarray:
        if not self.failed:
            try:
                return self.primary.embed(post)
            except EmbeddingError as e:
                logger.warning(f"Embedding provider {self.primary.name} failed, falling back to "
                               f"{self.fallback.name}: {e}")
                self.failed = True
        return self.fallback.embed(post)


def build_provider(settings: EmbeddingSettings, topics: Sequence[str], dim: int, seed: int):
    anchor = TopicAnchorProvider(topics, dim=dim, noise=settings.noise, seed=seed)
    if settings.provider == 'topic-anchor':
        return anchor
    try:
        remote = HttpEmbeddingProvider.from_env(dim)
    except ValueError as e:
        if not settings.fallback:
            raise EmbeddingError(str(e)) from e
        logger.warning(f"External embedding service not configured ({e}); using {anchor.name}")
        return anchor
    return FallbackProvider(remote, anchor) if settings.fallback else remote


def embed_post(provider, post, dim: Optional[int] = None) -> np.ndarray:
    """Embed one post, checking the vector is finite and of the expected dimension."""
    vector = np.asarray(provider.embed(post), dtype=float)
    if vector.ndim != 1 or (dim is not None and vector.shape[0] != dim):
        raise EmbeddingError(f"{post.post_id}: embedding has shape {vector.shape}, expected ({dim},)")
    if not np.all(np.isfinite(vector)):
        raise EmbeddingError(f"{post.post_id}: embedding has non-finite entries")
    return vector
