"""Point prompts mined from averaged cross-attention.

Attention maps live on a coarse grid (the ATTENTION frame, typically 16x16);
points handed to the segmentor are always in IMAGE-frame pixel coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from anyword.diffusion import AveragedAttentionMap, Normalization
from anyword.errors import DegenerateMap, EmptyMask, NoExteriorCells
from anyword.textgraph import Entity, ParsedExpression

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class Frame(str, Enum):
    ATTENTION = "attention"
    IMAGE = "image"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: np.ndarray
    frame: Frame = Frame.ATTENTION

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and self.frame == other.frame and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True)
class Point:
    """Image-frame coordinates; ``x`` is the column axis."""

    x: float
    y: float
    polarity: Polarity
    source_token: int | None = None

    def retag(self, polarity: Polarity) -> Point:
        return Point(self.x, self.y, polarity, self.source_token)

    def pixel(self) -> tuple[int, int]:
        return int(np.floor(self.y)), int(np.floor(self.x))


@dataclass(frozen=True)
class MaskPrompt:
    entity_id: int
    label: str
    positives: tuple[Point, ...]
    negatives: tuple[Point, ...]
    image_size: tuple[int, int]  # (H, W)
    phrase: str = ""

    def __post_init__(self):
        if not self.positives:
            raise ValueError("a mask prompt needs at least one positive point")
        H, W = self.image_size
        for p in self.positives + self.negatives:
            if not isinstance(p, Point):
                raise TypeError(f"expected Point, got {type(p).__name__}")
            if not (0 <= p.x < W and 0 <= p.y < H):
                raise ValueError(f"point ({p.x}, {p.y}) outside image {W}x{H}")
        if any(p.polarity != Polarity.POSITIVE for p in self.positives):
            raise ValueError("positive list holds a negative point")
        if any(p.polarity != Polarity.NEGATIVE for p in self.negatives):
            raise ValueError("negative list holds a positive point")

    def to_record(self, seed: int | None = None) -> dict:
        return {
            "entity_id": self.entity_id,
            "label": self.label,
            "positives": [[p.x, p.y] for p in self.positives],
            "negatives": [[p.x, p.y] for p in self.negatives],
            "seed": seed,
        }


def threshold_mask(avg: AveragedAttentionMap, threshold: float = 0.7, allow_raw: bool = False) -> BinaryMask:
    if avg.normalization != Normalization.MINMAX and not allow_raw:
        raise ValueError("thresholding expects a min-max normalised map; pass allow_raw=True to override")
    grid = avg.grid >= threshold
    if not grid.any():
        raise DegenerateMap(f"no cell of token {avg.token_index} reaches {threshold}", avg.token_index)
    return BinaryMask(grid, Frame.ATTENTION)


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Largest 4-connected component; ties go to the earliest top-left cell."""
    if not mask.grid.any():
        raise EmptyMask("mask has no foreground cells")
    labels, n = ndimage.label(mask.grid, structure=FOUR_CONNECTED)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat, np.arange(flat.size))
    best = min(range(1, n + 1), key=lambda k: (-sizes[k], first[k]))
    return BinaryMask(labels == best, mask.frame)


def cell_to_image(row: int, col: int, grid_shape: tuple[int, int], image_size: tuple[int, int]) -> tuple[float, float]:
    """Centre of an attention cell in image coordinates, returned as ``(x, y)``."""
    h, w = grid_shape
    H, W = image_size
    return (col + 0.5) * (W / w), (row + 0.5) * (H / h)


def sample_point(
    region: BinaryMask,
    rng: np.random.Generator,
    image_size: tuple[int, int],
    polarity: Polarity = Polarity.POSITIVE,
    source_token: int | None = None,
) -> Point:
    cells = np.argwhere(region.grid)
    if len(cells) == 0:
        raise EmptyMask("cannot sample from an empty region", source_token)
    r, c = cells[int(rng.integers(len(cells)))]
    if region.frame == Frame.IMAGE:
        x, y = c + 0.5, r + 0.5
    else:
        x, y = cell_to_image(int(r), int(c), region.shape, image_size)
    return Point(float(x), float(y), polarity, source_token)


def upscale(mask: BinaryMask, image_size: tuple[int, int]) -> BinaryMask:
    """Nearest-neighbour resize of an ATTENTION mask onto the image grid."""
    if mask.frame == Frame.IMAGE:
        return mask
    h, w = mask.shape
    H, W = image_size
    rows = np.floor((np.arange(H) + 0.5) * h / H).astype(int)
    cols = np.floor((np.arange(W) + 0.5) * w / W).astype(int)
    return BinaryMask(mask.grid[np.ix_(rows, cols)], Frame.IMAGE)


def _region_point(avg: AveragedAttentionMap, rng, image_size, threshold) -> Point:
    try:
        region = largest_component(threshold_mask(avg, threshold))
    except (DegenerateMap, EmptyMask) as exc:
        exc.token_index = avg.token_index
        raise
    return sample_point(region, rng, image_size, Polarity.POSITIVE, avg.token_index)


def cluster_positive(
    entity: Entity,
    maps: Mapping[int, AveragedAttentionMap],
    rng: np.random.Generator,
    image_size: tuple[int, int],
    threshold: float = 0.7,
) -> list[Point]:
    """One point per contributing token; a bare noun is sampled twice."""
    tokens = entity.concept_tokens
    points = [_region_point(maps[t.index], rng, image_size, threshold) for t in tokens]
    if len(tokens) == 1:
        points.append(_region_point(maps[entity.root.index], rng, image_size, threshold))
    return points


def bind_negatives(
    positives: Mapping[int, Sequence[Point]],
    target: int,
    entity_masks: Mapping[int, BinaryMask],
    rng: np.random.Generator,
    image_size: tuple[int, int],
    background_range: tuple[int, int] = (1, 3),
) -> list[Point]:
    """Other entities' positives become negatives; a lone entity gets background points."""
    own = {(p.x, p.y) for p in positives.get(target, ())}
    others = [j for j in positives if j != target]
    if others:
        out, seen = [], set()
        for j in others:
            for p in positives[j]:
                key = (p.x, p.y)
                if key in seen or key in own:
                    continue
                seen.add(key)
                out.append(p.retag(Polarity.NEGATIVE))
        return out
    inside = upscale(entity_masks[target], image_size).grid
    exterior = np.argwhere(~inside)
    if len(exterior) == 0:
        raise NoExteriorCells(f"mask of entity {target} covers the whole image")
    lo, hi = background_range
    k = min(int(rng.integers(lo, hi + 1)), len(exterior))
    chosen = rng.choice(len(exterior), size=k, replace=False)
    return [Point(float(c) + 0.5, float(r) + 0.5, Polarity.NEGATIVE, None) for r, c in exterior[np.sort(chosen)]]


@dataclass
class SkippedEntity:
    entity_id: int
    label: str
    reason: str
    token_index: int | None = None


def build_mask_prompts(
    parsed: ParsedExpression,
    maps: Mapping[int, AveragedAttentionMap],
    rng: np.random.Generator,
    image_size: tuple[int, int],
    threshold: float = 0.7,
    use_r1: bool = True,
    use_r2: bool = True,
    fresh_negatives: bool = False,
    skipped: list[SkippedEntity] | None = None,
) -> list[MaskPrompt]:
    """Positives for every entity first, then negatives bound in parse order.

    With ``use_r1`` off each entity gets a single point from its root map;
    with ``use_r2`` off no negatives are attached. Entities whose maps are
    degenerate are left out and recorded in ``skipped``.
    """
    skipped = skipped if skipped is not None else []
    positives: dict[int, list[Point]] = {}
    masks: dict[int, BinaryMask] = {}
    for i, ent in enumerate(parsed.entities):
        try:
            masks[i] = threshold_mask(maps[ent.root.index], threshold)
            if use_r1:
                positives[i] = cluster_positive(ent, maps, rng, image_size, threshold)
            else:
                positives[i] = [_region_point(maps[ent.root.index], rng, image_size, threshold)]
        except (DegenerateMap, EmptyMask) as exc:
            token = getattr(exc, "token_index", None)
            skipped.append(SkippedEntity(i, ent.label, type(exc).__name__, token if token is not None else ent.root.index))
            masks.pop(i, None)

    prompts = []
    for i in positives:
        ent = parsed.entities[i]
        negatives: list[Point] = []
        if use_r2:
            if fresh_negatives and len(positives) > 1:
                fresh = {
                    j: [_region_point(maps[parsed.entities[j].root.index], rng, image_size, threshold)]
                    for j in positives
                    if j != i
                }
                fresh[i] = positives[i]
                negatives = bind_negatives(fresh, i, masks, rng, image_size)
            else:
                negatives = bind_negatives(positives, i, masks, rng, image_size)
        prompts.append(
            MaskPrompt(i, ent.label, tuple(positives[i]), tuple(negatives), tuple(image_size), parsed.phrase(i))
        )
    return prompts


def dump_prompts(prompts: Sequence[MaskPrompt], seed: int | None = None) -> str:
    """One JSON record per line."""
    return "".join(json.dumps(p.to_record(seed), sort_keys=True) + "\n" for p in prompts)
