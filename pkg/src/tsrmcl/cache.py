"""Semantic cache: memoized text embeddings keyed by normalized text and
the text-encoder parameter fingerprint.

The cache is semantically transparent: any sequence of operations
produces bit-identical outputs with it on or off. Readers run
concurrently; a miss encodes outside the lock and publishes once, so
duplicate concurrent misses converge to a single stored value.
"""

from __future__ import annotations

import hashlib
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, StaleCacheError
from .tokenizer import normalize

__all__ = ["CacheStats", "SemanticCache", "get_or_encode", "bench_cache"]


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    bytes_resident: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


def _cache_key(text: str, fingerprint: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(normalize(text).encode("utf-8"))
    h.update(int(fingerprint).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


class SemanticCache:
    """Unbounded by default; pass ``max_entries`` for an LRU bound."""

    def __init__(self, fingerprint: int, max_entries: int | None = None):
        self.fingerprint = int(fingerprint)
        self.max_entries = max_entries
        self._entries: OrderedDict[int, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.stats = CacheStats()

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.stats.bytes_resident = 0

    def reset(self, fingerprint: int) -> None:
        """Adopt a new parameter fingerprint, dropping all entries."""
        with self._lock:
            self._entries.clear()
            self.stats = CacheStats()
            self.fingerprint = int(fingerprint)

    def _get(self, key: int) -> np.ndarray | None:
        with self._lock:
            hit = self._entries.get(key)
            if hit is None:
                self.stats.misses += 1
                return None
            self.stats.hits += 1
            if self.max_entries is not None:
                self._entries.move_to_end(key)
            return hit

    def _put(self, key: int, value: np.ndarray) -> np.ndarray:
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                return existing
            self._entries[key] = value
            self.stats.bytes_resident += value.nbytes
            if self.max_entries is not None and len(self._entries) > self.max_entries:
                _, dropped = self._entries.popitem(last=False)
                self.stats.evictions += 1
                self.stats.bytes_resident -= dropped.nbytes
            return value


def get_or_encode(text: str, model, cache: SemanticCache) -> np.ndarray:
    """Return the embedding of ``text``, encoding on first touch.

    The model's current text fingerprint must match the cache's;
    otherwise the cache is stale and must be cleared via ``reset``.
    """
    fp = model.text_fingerprint()
    if fp != cache.fingerprint:
        raise StaleCacheError(
            f"cache fingerprint {cache.fingerprint:#x} does not match encoder {fp:#x}"
        )
    key = _cache_key(text, fp)
    hit = cache._get(key)
    if hit is not None:
        return hit
    value = model.embed_text(text)  # outside the lock on purpose
    value.flags.writeable = False
    return cache._put(key, value)


def bench_cache(model, texts, images, repeats: int = 1) -> dict:
    """Cold/warm classification throughput with and without cache reuse.

    The cold pass clears the cache before every image, so every class
    text is re-encoded each time (hit ratio 0). The warm pass is timed
    after one priming sweep populated the cache (hit ratio 1). Returns
    the report dict {cold_ips, warm_ips, speedup, hits, misses, ...}.
    """
    from .contrastive import classify_image

    texts = list(texts)
    images = list(images)
    if not texts or not images or repeats < 1:
        raise ContractError("bench_cache needs non-empty texts, images, and repeats >= 1")

    fp = model.text_fingerprint()

    cold_cache = SemanticCache(fp)
    t0 = time.perf_counter()
    for _ in range(repeats):
        for img in images:
            cold_cache.clear()
            classify_image(model, img, texts, cache=cold_cache)
    cold_elapsed = time.perf_counter() - t0
    cold_stats = cold_cache.stats

    warm_cache = SemanticCache(fp)
    for t in texts:  # priming sweep
        get_or_encode(t, model, warm_cache)
    prime_misses = warm_cache.stats.misses
    t0 = time.perf_counter()
    for _ in range(repeats):
        for img in images:
            classify_image(model, img, texts, cache=warm_cache)
    warm_elapsed = time.perf_counter() - t0
    warm_stats = warm_cache.stats

    n = len(images) * repeats
    cold_ips = n / cold_elapsed if cold_elapsed > 0 else float("inf")
    warm_ips = n / warm_elapsed if warm_elapsed > 0 else float("inf")
    return {
        "cold_ips": cold_ips,
        "warm_ips": warm_ips,
        "speedup": warm_ips / cold_ips if cold_ips > 0 else float("inf"),
        "hits": cold_stats.hits + warm_stats.hits,
        "misses": cold_stats.misses + warm_stats.misses,
        "cold_hit_ratio": cold_stats.hit_ratio,
        "warm_hit_ratio": (warm_stats.hits / (warm_stats.lookups - prime_misses))
        if warm_stats.lookups > prime_misses else 0.0,
        "texts": len(texts),
        "images": len(images),
        "repeats": repeats,
    }
