"""
Embedding cache for DxAgents.

Finding descriptions recur across patients and the same image is scored
against many probes, so embeddings are cached by exact text or image
reference in a bounded LRU shared between worker threads.
"""

import threading
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from .constants import DEFAULT_CACHE_SIZE

CacheKey = Tuple[str, str]


class CacheManager:
    """Thread-safe bounded LRU cache for embedding vectors."""

    def __init__(self, max_cache_size: int = DEFAULT_CACHE_SIZE):
        """
        Initialize cache manager.

        Args:
            max_cache_size: Maximum number of cached vectors; 0 disables caching.
        """
        self.max_cache_size = max(0, int(max_cache_size))
        self._entries: "OrderedDict[CacheKey, np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _get_cache_key(kind: str, key: str) -> CacheKey:
        return (kind, key)

    def get_embedding(self, kind: str, key: str) -> Optional[np.ndarray]:
        """
        Get a cached embedding.

        Args:
            kind: "text" or "image".
            key: Exact text or image reference.

        Returns:
            A copy of the cached vector, or None on a miss.
        """
        cache_key = self._get_cache_key(kind, key)
        with self._lock:
            vector = self._entries.get(cache_key)
            if vector is None:
                self.misses += 1
                return None
            self._entries.move_to_end(cache_key)
            self.hits += 1
            return vector.copy()

    def cache_embedding(self, kind: str, key: str, vector: np.ndarray) -> None:
        """Store an embedding; concurrent writers of the same key: last writer wins."""
        if self.max_cache_size == 0:
            return
        cache_key = self._get_cache_key(kind, key)
        with self._lock:
            self._entries[cache_key] = np.array(vector, dtype=np.float64, copy=True)
            self._entries.move_to_end(cache_key)
            while len(self._entries) > self.max_cache_size:
                self._entries.popitem(last=False)

    def clear_cache(self) -> None:
        """Clear all cached data."""
        with self._lock:
            self._entries.clear()
            self.hits = 0
            self.misses = 0

    def get_cache_stats(self) -> Dict[str, int]:
        """Get cache statistics."""
        with self._lock:
            return {
                'cache_size': len(self._entries),
                'max_cache_size': self.max_cache_size,
                'hits': self.hits,
                'misses': self.misses,
            }
