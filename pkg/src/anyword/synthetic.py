"""Synthetic blob scenes that double as their own ground truth.

Each scene is a greyscale image with 1-4 non-overlapping uniform disks on
a dim background. Every word that names a disk (noun, adjective, synonym,
attribute noun) gets a Gaussian attention field for the toy denoiser, so
the whole pipeline can run without checkpoints.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from anyword.datasets import DatasetRecord, save_image, scene_sidecar
from anyword.diffusion import AttentionStack, Normalization, average_attention
from anyword.embedopt import EmbeddingSet
from anyword.errors import DegenerateMap, EmptyMask
from anyword.promptmine import cell_to_image, largest_component, threshold_mask
from anyword.rle import encode_segmentation
from anyword.textgraph import default_synonyms, parse_expression
from anyword.toy import ToyDenoiser, gaussian_field

BACKGROUND = 0.1
INTENSITIES = (0.3, 0.45, 0.6, 0.75, 0.9)
OBJECTS = {
    "ball": "sphere", "cup": "mug", "box": "crate", "vase": "urn", "bowl": "dish",
    "car": "automobile", "dog": "puppy", "cat": "kitty", "bird": "songbird",
    "chair": "stool", "bag": "sack", "kite": "glider",
}
PEOPLE = {"man": "guy", "woman": "lady", "boy": "lad", "girl": "lass"}
GARMENTS = ("hat", "scarf", "coat", "jacket", "cap", "helmet")
ADJECTIVES = ("red", "blue", "green", "small", "large", "wooden", "shiny", "round")


@dataclass
class FieldSpec:
    center: tuple[float, float]  # (row, col) in attention cells
    sigma: float

    def grid(self, shape=(16, 16)) -> np.ndarray:
        return gaussian_field(self.center, self.sigma, shape)


@dataclass
class SceneEntity:
    noun: str
    synonym: str
    center: tuple[float, float]  # (row, col) in pixels
    radius: float
    intensity: float
    adjective: str | None = None
    attribute: str | None = None  # garment worn by a person

    def phrase(self, synonym: bool = False) -> str:
        noun = self.synonym if synonym else self.noun
        if self.attribute:
            adj = f"{self.adjective} " if self.adjective else ""
            return f"a {noun} wearing a {adj}{self.attribute}"
        return f"a {self.adjective} {noun}" if self.adjective else f"a {noun}"

    def mask(self, size: tuple[int, int]) -> np.ndarray:
        H, W = size
        yy, xx = np.mgrid[0:H, 0:W] + 0.5
        return (yy - self.center[0]) ** 2 + (xx - self.center[1]) ** 2 <= self.radius**2


@dataclass
class SyntheticScene:
    scene_id: str
    size: tuple[int, int]
    entities: list[SceneEntity]
    fields: dict[str, FieldSpec]
    captions: list[str] = field(default_factory=list)
    resolution: tuple[int, int] = (16, 16)

    def image(self) -> np.ndarray:
        img = np.full(self.size, BACKGROUND)
        for e in self.entities:
            img[e.mask(self.size)] = e.intensity
        return img

    def field_grids(self) -> dict[str, np.ndarray]:
        return {w: f.grid(self.resolution) for w, f in self.fields.items()}

    def denoiser(self, **kwargs) -> ToyDenoiser:
        return ToyDenoiser(self.field_grids(), resolution=self.resolution, **kwargs)

    def to_record(self) -> DatasetRecord:
        gt = [(e.phrase(), encode_segmentation(e.mask(self.size))) for e in self.entities]
        return DatasetRecord(
            self.scene_id, self.image(), list(self.captions), gt, "synthetic", self.scene_id,
            {"scene": self.to_json()},
        )

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "size": list(self.size),
            "resolution": list(self.resolution),
            "entities": [asdict(e) for e in self.entities],
            "fields": {w: {"center": list(f.center), "sigma": f.sigma} for w, f in self.fields.items()},
            "captions": list(self.captions),
        }

    @classmethod
    def from_json(cls, d: dict) -> SyntheticScene:
        ents = [SceneEntity(**{**e, "center": tuple(e["center"])}) for e in d["entities"]]
        fields = {w: FieldSpec(tuple(f["center"]), float(f["sigma"])) for w, f in d["fields"].items()}
        return cls(d["scene_id"], tuple(d["size"]), ents, fields, list(d.get("captions", [])),
                   tuple(d.get("resolution", (16, 16))))

    def write(self, directory) -> Path:
        """Write ``<id>.png`` and its ``<id>.scene.json`` sidecar; returns the PNG path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        png = directory / f"{self.scene_id}.png"
        save_image(png, self.image())
        scene_sidecar(png).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return png


def fields_from_sidecar(path) -> dict[str, np.ndarray] | None:
    side = scene_sidecar(path)
    if not side.exists():
        return None
    return SyntheticScene.from_json(json.loads(side.read_text())).field_grids()


def captions_for(entities: list[SceneEntity], variants: int = 3) -> list[str]:
    """Scripted caption variants: listing, reversed with "near", synonym swap.

    A lone entity has no order to reverse, so its second variant switches
    to the definite article instead.
    """
    def listing(phrases):
        if len(phrases) == 1:
            return phrases[0]
        return ", ".join(phrases[:-1]) + " and " + phrases[-1]

    p = [e.phrase() for e in entities]
    out = [listing(p)]
    rev = p[::-1]
    if len(rev) > 1:
        out.append(rev[0] + " near " + listing(rev[1:]))
    else:
        out.append("the " + rev[0].removeprefix("a "))
    out.append(listing([entities[0].phrase(synonym=True)] + p[1:]))
    return out[:variants]


def _place(rng, n: int, size, radius_range, gap: float, tries: int = 2000):
    H, W = size
    for _ in range(tries):
        radii = rng.uniform(*radius_range, size=n)
        centers = []
        ok = True
        for r in radii:
            c = (rng.uniform(r + 2, H - r - 2), rng.uniform(r + 2, W - r - 2))
            for (c2, r2) in centers:
                if np.hypot(c[0] - c2[0], c[1] - c2[1]) < r + r2 + gap:
                    ok = False
                    break
            if not ok:
                break
            centers.append((c, r))
        if ok:
            return centers
    return None


def _regions_inside(scene: SyntheticScene, caption: str) -> bool:
    """Every concept token's largest thresholded region maps inside its disk."""
    parsed = parse_expression(caption)
    if len(parsed.entities) != len(scene.entities):
        return False
    den = scene.denoiser()
    V = EmbeddingSet(tuple(t.surface for t in parsed.tokens),
                     np.zeros((len(parsed.tokens), den.width)), np.zeros(len(parsed.tokens), dtype=bool))
    attn = den.attention(V)
    stack = AttentionStack(attn[None], np.array([1]))
    by_phrase = {e.phrase(): e for e in scene.entities}
    by_phrase.update({e.phrase(synonym=True): e for e in scene.entities})
    by_phrase.update({"the " + k.removeprefix("a "): e for k, e in list(by_phrase.items())})
    for i, ent in enumerate(parsed.entities):
        target = by_phrase.get(parsed.phrase(i))
        if target is None:
            return False
        disk = target.mask(scene.size)
        for tok in ent.concept_tokens:
            avg = average_attention(stack, tok.index, Normalization.MINMAX)
            try:
                region = largest_component(threshold_mask(avg))
            except (DegenerateMap, EmptyMask):
                return False
            for r, c in np.argwhere(region.grid):
                x, y = cell_to_image(r, c, region.shape, scene.size)
                if not disk[int(y), int(x)]:
                    return False
    return True


def _add_table_synonyms(entities: list[SceneEntity], fields: dict[str, FieldSpec]) -> None:
    """Let every built-in synonym of a noun attend to that noun's disk.

    Mutated captions then name things the toy model knows. Words listed
    under two nouns of the same scene are left out.
    """
    table = default_synonyms()
    owners: dict[str, set[int]] = {}
    for i, e in enumerate(entities):
        for phrase in table.get(e.noun, []):
            for word in phrase.split():
                owners.setdefault(word, set()).add(i)
    for word, who in owners.items():
        if len(who) == 1 and word not in fields:
            fields[word] = fields[entities[next(iter(who))].noun]


def make_scene(
    rng: np.random.Generator,
    scene_id: str,
    n_entities: int | None = None,
    size: tuple[int, int] = (128, 128),
    resolution: tuple[int, int] = (16, 16),
    variants: int = 3,
    person_rate: float = 0.25,
    adjective_rate: float = 0.6,
) -> SyntheticScene:
    for _ in range(200):
        n = int(rng.integers(1, 5)) if n_entities is None else n_entities
        placed = _place(rng, n, size, (13.0, 19.0), gap=24.0)
        if placed is None:
            continue
        objs = list(rng.permutation(sorted(OBJECTS)))
        people = list(rng.permutation(sorted(PEOPLE)))
        garments = list(rng.permutation(GARMENTS))
        adjs = list(rng.permutation(ADJECTIVES))
        shades = list(rng.permutation(INTENSITIES))
        cell = (size[0] / resolution[0], size[1] / resolution[1])
        entities, fields = [], {}
        for (c, r), shade in zip(placed, shades):
            person = rng.random() < person_rate and people
            noun = str(people.pop() if person else objs.pop())
            syn = PEOPLE[noun] if person else OBJECTS[noun]
            adj = str(adjs.pop()) if rng.random() < adjective_rate else None
            attr = str(garments.pop()) if person else None
            ent = SceneEntity(noun, syn, (float(c[0]), float(c[1])), float(r), float(shade), adj, attr)
            entities.append(ent)
            ctr = (c[0] / cell[0], c[1] / cell[1])
            main = FieldSpec(ctr, 0.45 * r / cell[0])
            fields[noun] = fields[syn] = main
            if attr:
                sub = FieldSpec((ctr[0] - 0.4 * r / cell[0], ctr[1]), 0.25 * r / cell[0])
                fields[attr] = sub
                if adj:
                    fields[adj] = sub
            elif adj:
                fields[adj] = main
        _add_table_synonyms(entities, fields)
        scene = SyntheticScene(scene_id, tuple(size), entities, fields, [], tuple(resolution))
        scene.captions = captions_for(entities, variants)
        if all(_regions_inside(scene, cap) for cap in scene.captions):
            return scene
    raise RuntimeError("could not place a valid synthetic scene")


def synthetic_scenes(n: int = 50, variants: int = 3, seed: int = 0, **kwargs) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, f"scene{i:03d}", variants=variants, **kwargs) for i in range(n)]


def synthetic_dataset(n: int = 50, variants: int = 3, seed: int = 0, **kwargs) -> list[DatasetRecord]:
    return [s.to_record() for s in synthetic_scenes(n, variants, seed, **kwargs)]
