"""Content-addressed cache of optimised embeddings and averaged attention."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def cache_key(image: np.ndarray, text: str, embedding_fp: str, schedule_fp: str, extra: dict) -> str:
    h = hashlib.sha256()
    img = np.ascontiguousarray(image, dtype="<f8")
    h.update(repr(img.shape).encode())
    h.update(img.tobytes())
    h.update(b"\x00" + text.encode())
    h.update(b"\x00" + embedding_fp.encode())
    h.update(b"\x00" + schedule_fp.encode())
    h.update(b"\x00" + json.dumps(extra, sort_keys=True, default=str).encode())
    return h.hexdigest()


@dataclass
class CacheEntry:
    vectors: np.ndarray  # optimised embeddings (tokens, width)
    maps: np.ndarray  # time-averaged raw attention (tokens, h, w)


class AttentionCache:
    """In memory when ``directory`` is None, else one ``.npz`` per key."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def get(self, key: str) -> CacheEntry | None:
        with self._lock:
            hit = self._mem.get(key)
        if hit is not None or self.directory is None:
            return hit
        path = self._path(key)
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as z:
            entry = CacheEntry(z["vectors"].astype(np.float64), z["maps"].astype(np.float64))
        with self._lock:
            self._mem[key] = entry
        return entry

    def put(self, key: str, entry: CacheEntry) -> None:
        with self._lock:
            self._mem[key] = entry
        if self.directory is None:
            return
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".npz.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, vectors=entry.vectors.astype("<f8"), maps=entry.maps.astype("<f8"))
            os.replace(tmp, self._path(key))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def __len__(self) -> int:
        return len(self._mem)
