"""Readers that normalise annotation files into :class:`DatasetRecord`.

Three shapes are supported: COCO instance JSON (RLE or polygon
segmentations), refCOCO-style referring expressions on top of a COCO
instance file, and grounded captions whose phrases are character spans.
All readers work on local files only.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image
from skimage.draw import polygon as fill_polygon

from anyword.errors import EmptyDataset, LengthMismatch
from anyword.rle import decode_segmentation, encode_segmentation

log = logging.getLogger(__name__)


@dataclass
class DatasetRecord:
    record_id: str
    image: Any  # path or an in-memory array
    expressions: list[str]
    gt: list[tuple[str, dict]]  # (phrase, COCO RLE)
    split: str = ""
    image_id: Any = None
    meta: dict = field(default_factory=dict)

    def load_image(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return load_image(self.image)

    def gt_masks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for phrase, seg in self.gt:
            out.append((phrase, decode_segmentation(seg)))
        return out

    def check(self) -> None:
        img = self.load_image()
        for phrase, mask in self.gt_masks():
            if mask.shape != img.shape[:2]:
                raise LengthMismatch(f"mask for {phrase!r} is {mask.shape}, image is {img.shape[:2]}")


def load_image(path) -> np.ndarray:
    """Float image in [0, 1]; greyscale files stay 2-D."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def polygons_to_mask(polys: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Rasterise COCO polygons ``[x0, y0, x1, y1, ...]`` (pixel-centre convention)."""
    mask = np.zeros((height, width), dtype=bool)
    for poly in polys:
        xy = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        rr, cc = fill_polygon(xy[:, 1] - 0.5, xy[:, 0] - 0.5, shape=(height, width))
        mask[rr, cc] = True
    return mask


def annotation_rle(seg, height: int, width: int) -> dict:
    if isinstance(seg, list):
        return encode_segmentation(polygons_to_mask(seg, height, width))
    if isinstance(seg, dict):
        if isinstance(seg.get("counts"), list) and seg.get("size") is None:
            seg = {**seg, "size": [height, width]}
        return encode_segmentation(decode_segmentation(seg))
    raise ValueError(f"unsupported segmentation of type {type(seg).__name__}")


def _index_instances(instances: dict):
    images = {img["id"]: img for img in instances.get("images", [])}
    cats = {c["id"]: c["name"] for c in instances.get("categories", [])}
    anns = {a["id"]: a for a in instances.get("annotations", [])}
    return images, cats, anns


def read_coco(path, image_root=None) -> list[DatasetRecord]:
    """One record per image; ``gt`` holds every instance labelled by category."""
    path = Path(path)
    data = json.loads(path.read_text())
    images, cats, anns = _index_instances(data)
    root = Path(image_root) if image_root else path.parent
    by_image: dict[Any, list] = {i: [] for i in images}
    for a in anns.values():
        by_image.setdefault(a["image_id"], []).append(a)
    records = []
    for image_id, img in images.items():
        h, w = int(img["height"]), int(img["width"])
        gt = [(cats.get(a["category_id"], str(a["category_id"])), annotation_rle(a["segmentation"], h, w))
              for a in by_image[image_id]]
        records.append(DatasetRecord(str(image_id), root / img["file_name"], [], gt, "", image_id))
    return records


def read_refs(refs_path, instances_path, image_root=None, split: str | None = None) -> list[DatasetRecord]:
    """refCOCO-style refs (JSON list) over a COCO instance file.

    ``ann_id`` may be a single id or a list (multi-target); an empty list or
    ``-1`` marks a no-target expression, whose ground truth is an empty mask.
    """
    refs = json.loads(Path(refs_path).read_text())
    instances = json.loads(Path(instances_path).read_text())
    images, _cats, anns = _index_instances(instances)
    root = Path(image_root) if image_root else Path(instances_path).parent
    records = []
    for ref in refs:
        if split is not None and ref.get("split") != split:
            continue
        img = images[ref["image_id"]]
        h, w = int(img["height"]), int(img["width"])
        ids = ref.get("ann_id", [])
        ids = [ids] if isinstance(ids, int) else list(ids)
        mask = np.zeros((h, w), dtype=bool)
        for a in ids:
            if a is None or a < 0:
                continue
            mask |= decode_segmentation(annotation_rle(anns[a]["segmentation"], h, w))
        sents = [s["sent"] if isinstance(s, dict) else str(s) for s in ref.get("sentences", [])]
        phrase = sents[0] if sents else ""
        records.append(
            DatasetRecord(
                str(ref.get("ref_id", len(records))),
                root / img["file_name"],
                sents,
                [(phrase, encode_segmentation(mask))],
                ref.get("split", ""),
                ref["image_id"],
                {"no_target": not mask.any()},
            )
        )
    return records


def read_grounded(path, image_root=None) -> list[DatasetRecord]:
    """Grounded captions: ``{"file_name", "height", "width", "caption", "groundings": [...]}``.

    Each grounding carries a character ``span`` into the caption and a
    ``segmentation`` (RLE or polygons).
    """
    path = Path(path)
    items = json.loads(path.read_text())
    if isinstance(items, dict):
        items = items.get("records", [])
    root = Path(image_root) if image_root else path.parent
    records = []
    for k, item in enumerate(items):
        h, w = int(item["height"]), int(item["width"])
        caption = item["caption"]
        gt = []
        for g in item.get("groundings", []):
            start, end = g["span"]
            gt.append((caption[start:end], annotation_rle(g["segmentation"], h, w)))
        records.append(
            DatasetRecord(str(item.get("id", k)), root / item["file_name"], [caption], gt,
                          item.get("split", ""), item.get("image_id", k))
        )
    return records


def load_dataset(spec: str) -> list[DatasetRecord]:
    """Resolve a ``--dataset`` argument.

    ``synthetic`` or ``synthetic:SCENES[:VARIANTS[:SEED]]`` builds the
    in-memory benchmark; anything else is a JSON manifest
    ``{"format": "coco"|"refs"|"grounded", "annotations": ..., ...}``.
    """
    if spec.startswith("synthetic"):
        from anyword.synthetic import synthetic_dataset

        parts = spec.split(":")[1:]
        nums = [int(p) for p in parts if p]
        scenes, variants, seed = (nums + [50, 3, 0][len(nums):])[:3]
        return synthetic_dataset(scenes, variants=variants, seed=seed)
    manifest_path = Path(spec)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent

    def rel(key):
        v = manifest.get(key)
        return None if v is None else base / v

    fmt = manifest.get("format")
    if fmt == "coco":
        records = read_coco(rel("annotations"), rel("image_root"))
    elif fmt == "refs":
        records = read_refs(rel("annotations"), rel("instances"), rel("image_root"), manifest.get("split"))
    elif fmt == "grounded":
        records = read_grounded(rel("annotations"), rel("image_root"))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if not records:
        raise EmptyDataset(f"{spec} yielded no records")
    return records


def scene_sidecar(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".scene.json")


def iter_samples(spec: str) -> Iterable[tuple[Any, str]]:
    """``(image, text)`` pairs for adapter fitting: a JSON list or a dataset spec."""
    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
        if isinstance(data, list):
            for item in data:
                yield path.parent / item["image"], item["text"]
            return
    for rec in load_dataset(spec):
        for text in rec.expressions:
            yield rec, text
