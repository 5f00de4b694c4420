"""COCO-style run-length encoding (column-major, runs start with background)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from anyword.errors import LengthMismatch


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("run lengths must be non-negative")
    if sum(counts) != height * width:
        raise LengthMismatch(f"runs cover {sum(counts)} cells, mask has {height * width}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((width, height)).T.copy()


def encode_rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).T.ravel()
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def counts_to_string(counts: Sequence[int]) -> str:
    """Compressed COCO counts string (the ``maskApi`` LEB128-like variant)."""
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def decode_segmentation(seg: dict, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Decode a COCO ``{"size": [h, w], "counts": ...}`` object."""
    h, w = seg.get("size", (height, width))
    counts = seg["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts.decode() if isinstance(counts, bytes) else counts)
    return decode_rle(counts, int(h), int(w))


def encode_segmentation(mask: np.ndarray, compressed: bool = False) -> dict:
    counts = encode_rle(mask)
    h, w = np.shape(mask)
    return {"size": [int(h), int(w)], "counts": counts_to_string(counts) if compressed else counts}
