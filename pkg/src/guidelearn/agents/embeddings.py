"""Embedding providers. All return unit-norm float64 vectors of a fixed dimension."""

from __future__ import annotations

import hashlib
import re
from abc import ABC, abstractmethod
from typing import Any

import numpy as np

from guidelearn.agents.backends import ContentError, RemoteChatBackend

_WORD = re.compile(r"\w+", re.UNICODE)


class EmbeddingProvider(ABC):
    dimension: int

    @abstractmethod
    def embed(self, text: str) -> np.ndarray:
        ...

    def __call__(self, text: str) -> np.ndarray:
        return self.embed(text)


def _bucket(feature: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


def text_features(text: str, ngrams: tuple[int, ...] = (1, 2)) -> list[str]:
    words = _WORD.findall(text.lower())
    feats = []
    for n in ngrams:
        feats.extend(" ".join(words[i:i + n]) for i in range(len(words) - n + 1))
    return feats


def feature_bucket(feature: str, dimension: int) -> int:
    """Bucket index of ``feature``; bucket 0 is reserved for the empty text."""
    return 1 + _bucket(feature, dimension - 1)


def hashed_embedding(text: str, dimension: int = 256, ngrams: tuple[int, ...] = (1, 2)) -> np.ndarray:
    """Lowercased word n-gram counts hashed into ``dimension`` buckets, L2-normalized."""
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    vec = np.zeros(dimension, dtype=np.float64)
    feats = text_features(text, ngrams)
    if not feats:
        vec[0] = 1.0
        return vec
    for f in feats:
        vec[feature_bucket(f, dimension)] += 1.0
    return vec / np.linalg.norm(vec)


class HashedEmbedder(EmbeddingProvider):
    def __init__(self, dimension: int = 256, ngrams: tuple[int, ...] = (1, 2)):
        self.dimension = dimension
        self.ngrams = ngrams
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = hashed_embedding(text, self.dimension, self.ngrams)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec


class RemoteEmbedder(EmbeddingProvider):
    """Embedding endpoint speaking ``{model, input}`` -> ``{data: [{embedding}]}``."""

    def __init__(self, endpoint: str, model: str, dimension: int, **http: Any):
        self.dimension = dimension
        self.model = model
        self._http = RemoteChatBackend(endpoint, model, **http)
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        body = self._http.post_json({"model": self.model, "input": text})
        try:
            values = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ContentError(f"malformed embedding body: {str(body)[:200]}") from exc
        if values.shape != (self.dimension,):
            raise ContentError(f"embedding has dimension {values.size}, expected {self.dimension}")
        norm = np.linalg.norm(values)
        if norm == 0.0:
            raise ContentError("zero embedding returned")
        vec = values / norm
        self._cache[text] = vec
        return vec
