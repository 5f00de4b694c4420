"""Promptable mask generation and assembly of grounded results."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from anyword.errors import InvalidPrompt, MissingEntityMask
from anyword.promptmine import FOUR_CONNECTED, BinaryMask, Frame, MaskPrompt, SkippedEntity
from anyword.textgraph import ParsedExpression


@runtime_checkable
class PromptableSegmentor(Protocol):
    def segment(self, image: np.ndarray, prompt: MaskPrompt) -> BinaryMask: ...

    def info(self) -> dict: ...


def validate_prompt(image: np.ndarray, prompt: MaskPrompt) -> None:
    H, W = np.shape(image)[:2]
    if not prompt.positives:
        raise InvalidPrompt("prompt has no positive points")
    for p in prompt.positives + prompt.negatives:
        if not (0 <= p.x < W and 0 <= p.y < H):
            raise InvalidPrompt(f"point ({p.x}, {p.y}) lies outside the {W}x{H} image")
    pos = {p.pixel() for p in prompt.positives}
    clash = pos & {p.pixel() for p in prompt.negatives}
    if clash:
        raise InvalidPrompt(f"pixels {sorted(clash)} are both positive and negative")


class MockSegmentor:
    """Geometric stand-in for a promptable segmentation model.

    From each positive seed, grow the 4-connected set of pixels whose
    intensity is within ``tolerance`` of the seed and which are strictly
    closer to the seed than to every negative point. The mask is the union
    over seeds. Stateless, so safe to share between threads.
    """

    name = "mock"

    def __init__(self, tolerance: float = 0.05):
        self.tolerance = tolerance

    def info(self) -> dict:
        return {"name": self.name, "input_size": None}

    def segment_with_score(self, image: np.ndarray, prompt: MaskPrompt) -> tuple[BinaryMask, float]:
        validate_prompt(image, prompt)
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        H, W = img.shape[:2]
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
        negs = [(p.x, p.y) for p in prompt.negatives]
        neg_pixels = [p.pixel() for p in prompt.negatives]
        out = np.zeros((H, W), dtype=bool)
        for p in prompt.positives:
            r, c = p.pixel()
            ok = np.max(np.abs(img - img[r, c]), axis=2) <= self.tolerance
            if negs:
                d_seed = (xx - p.x) ** 2 + (yy - p.y) ** 2
                for nx, ny in negs:
                    ok &= d_seed < (xx - nx) ** 2 + (yy - ny) ** 2
                for nr, nc in neg_pixels:
                    ok[nr, nc] = False
            ok[r, c] = True
            labels, _ = ndimage.label(ok, structure=FOUR_CONNECTED)
            out |= labels == labels[r, c]
        return BinaryMask(out, Frame.IMAGE), 1.0

    def segment(self, image: np.ndarray, prompt: MaskPrompt) -> BinaryMask:
        return self.segment_with_score(image, prompt)[0]


def segment(image: np.ndarray, prompt: MaskPrompt, backend) -> BinaryMask:
    validate_prompt(image, prompt)
    return backend.segment(image, prompt)


def segment_scored(image: np.ndarray, prompt: MaskPrompt, backend) -> tuple[BinaryMask, float]:
    validate_prompt(image, prompt)
    scored = getattr(backend, "segment_with_score", None)
    if scored is not None:
        return scored(image, prompt)
    return backend.segment(image, prompt), 1.0


@dataclass
class GroundedRecord:
    entity_id: int
    label: str
    mask: BinaryMask
    token_indices: tuple[int, ...]
    prompt: MaskPrompt | None = None
    score: float = 1.0


@dataclass
class GroundedSegmentation:
    records: list[GroundedRecord] = field(default_factory=list)
    skipped: list[SkippedEntity] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self, compressed: bool = False) -> dict:
        from anyword.rle import encode_segmentation

        return {
            "records": [
                {
                    "entity_id": r.entity_id,
                    "label": r.label,
                    "token_indices": list(r.token_indices),
                    "score": r.score,
                    "mask": encode_segmentation(r.mask.grid, compressed),
                }
                for r in self.records
            ],
            "skipped": [vars(s) for s in self.skipped],
        }


def assemble_grounded(
    masks: Mapping[int, BinaryMask | tuple[BinaryMask, float]],
    parsed: ParsedExpression,
    prompts: Sequence[MaskPrompt] = (),
    skipped: Sequence[SkippedEntity] = (),
) -> GroundedSegmentation:
    """One record per non-skipped entity, in parse order."""
    skipped_ids = {s.entity_id for s in skipped}
    by_entity = {p.entity_id: p for p in prompts}
    records = []
    for i, ent in enumerate(parsed.entities):
        if i in skipped_ids:
            continue
        if i not in masks:
            raise MissingEntityMask(f"no mask for entity {i} ({ent.label!r})")
        m = masks[i]
        mask, score = m if isinstance(m, tuple) else (m, 1.0)
        records.append(GroundedRecord(i, ent.label, mask, ent.token_indices, by_entity.get(i), float(score)))
    return GroundedSegmentation(records, list(skipped))
