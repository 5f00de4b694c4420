import json

import numpy as np
import pytest

from anyword.datasets import (
    DatasetRecord,
    iter_samples,
    load_dataset,
    load_image,
    polygons_to_mask,
    read_coco,
    read_grounded,
    read_refs,
    save_image,
    scene_sidecar,
)
from anyword.errors import EmptyDataset, LengthMismatch
from anyword.rle import decode_segmentation, encode_rle
from anyword.synthetic import SyntheticScene, captions_for, fields_from_sidecar, synthetic_scenes
from anyword.textgraph import parse_expression


@pytest.fixture
def coco_dir(tmp_path):
    img = np.zeros((10, 12))
    img[2:6, 2:8] = 0.5
    save_image(tmp_path / "a.png", img)
    rle_mask = np.zeros((10, 12), dtype=bool)
    rle_mask[7:9, 1:4] = True
    instances = {
        "images": [{"id": 1, "file_name": "a.png", "height": 10, "width": 12}],
        "categories": [{"id": 3, "name": "box"}, {"id": 4, "name": "cup"}],
        "annotations": [
            {"id": 10, "image_id": 1, "category_id": 3, "segmentation": [[2, 2, 8, 2, 8, 6, 2, 6]]},
            {"id": 11, "image_id": 1, "category_id": 4,
             "segmentation": {"size": [10, 12], "counts": encode_rle(rle_mask)}},
        ],
    }
    (tmp_path / "instances.json").write_text(json.dumps(instances))
    refs = [
        {"ref_id": 0, "image_id": 1, "ann_id": 10, "split": "val", "sentences": [{"sent": "the grey box"}]},
        {"ref_id": 1, "image_id": 1, "ann_id": [10, 11], "split": "val", "sentences": [{"sent": "both things"}]},
        {"ref_id": 2, "image_id": 1, "ann_id": -1, "split": "val", "sentences": [{"sent": "the giraffe"}]},
        {"ref_id": 3, "image_id": 1, "ann_id": 11, "split": "train", "sentences": ["a cup", "the cup"]},
    ]
    (tmp_path / "refs.json").write_text(json.dumps(refs))
    grounded = [{
        "id": "g0", "file_name": "a.png", "height": 10, "width": 12,
        "caption": "a box above a cup",
        "groundings": [
            {"span": [0, 5], "segmentation": [[2, 2, 8, 2, 8, 6, 2, 6]]},
            {"span": [12, 17], "segmentation": {"size": [10, 12], "counts": encode_rle(rle_mask)}},
        ],
    }]
    (tmp_path / "grounded.json").write_text(json.dumps(grounded))
    return tmp_path, rle_mask


def box_mask():
    m = np.zeros((10, 12), dtype=bool)
    m[2:6, 2:8] = True
    return m


def test_polygon_pixel_centre_convention():
    np.testing.assert_array_equal(polygons_to_mask([[2, 2, 8, 2, 8, 6, 2, 6]], 10, 12), box_mask())


def test_read_coco(coco_dir):
    root, rle_mask = coco_dir
    [rec] = read_coco(root / "instances.json")
    assert [p for p, _ in rec.gt] == ["box", "cup"]
    masks = dict(rec.gt_masks())
    np.testing.assert_array_equal(masks["box"], box_mask())
    np.testing.assert_array_equal(masks["cup"], rle_mask)
    assert rec.load_image().shape == (10, 12)
    rec.check()


def test_read_refs(coco_dir):
    root, rle_mask = coco_dir
    recs = read_refs(root / "refs.json", root / "instances.json", split="val")
    assert [r.record_id for r in recs] == ["0", "1", "2"]
    single, multi, none = (r.gt_masks()[0][1] for r in recs)
    np.testing.assert_array_equal(single, box_mask())
    np.testing.assert_array_equal(multi, box_mask() | rle_mask)
    assert not none.any() and recs[2].meta["no_target"]
    assert recs[0].expressions == ["the grey box"]
    train = read_refs(root / "refs.json", root / "instances.json", split="train")
    assert train[0].expressions == ["a cup", "the cup"]


def test_read_grounded(coco_dir):
    root, rle_mask = coco_dir
    [rec] = read_grounded(root / "grounded.json")
    assert [p for p, _ in rec.gt] == ["a box", "a cup"]
    assert rec.expressions == ["a box above a cup"]
    np.testing.assert_array_equal(rec.gt_masks()[1][1], rle_mask)


def test_manifests(coco_dir):
    root, _ = coco_dir
    (root / "m.json").write_text(json.dumps({"format": "refs", "annotations": "refs.json",
                                             "instances": "instances.json", "split": "train"}))
    assert [r.record_id for r in load_dataset(str(root / "m.json"))] == ["3"]
    (root / "empty.json").write_text(json.dumps({"format": "refs", "annotations": "refs.json",
                                                 "instances": "instances.json", "split": "test"}))
    with pytest.raises(EmptyDataset):
        load_dataset(str(root / "empty.json"))
    (root / "bad.json").write_text(json.dumps({"format": "voc"}))
    with pytest.raises(ValueError):
        load_dataset(str(root / "bad.json"))


def test_check_flags_resolution_mismatch():
    rec = DatasetRecord("x", np.zeros((4, 4)), [], [("a", {"size": [3, 3], "counts": [9]})])
    with pytest.raises(LengthMismatch):
        rec.check()


def test_image_round_trip(tmp_path):
    img = np.linspace(0, 1, 48).reshape(6, 8)
    save_image(tmp_path / "g.png", img)
    back = load_image(tmp_path / "g.png")
    assert back.shape == (6, 8)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    rgb = np.dstack([img, img * 0.5, 1 - img])
    save_image(tmp_path / "c.png", rgb)
    assert load_image(tmp_path / "c.png").shape == (6, 8, 3)


def test_iter_samples_json_list(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps([{"image": "a.png", "text": "a cat"}]))
    assert list(iter_samples(str(tmp_path / "s.json"))) == [(tmp_path / "a.png", "a cat")]


# --- synthetic benchmark ---------------------------------------------------------


def test_synthetic_spec():
    recs = load_dataset("synthetic:4:2:7")
    assert len(recs) == 4 and all(len(r.expressions) == 2 for r in recs)
    assert [r.record_id for r in recs] == [r.record_id for r in load_dataset("synthetic:4:2:7")]


def test_synthetic_scenes_are_valid():
    scenes = synthetic_scenes(20, seed=3)
    counts = {len(s.entities) for s in scenes}
    assert counts <= {1, 2, 3, 4} and len(counts) > 1
    for s in scenes:
        img = s.image()
        assert img.shape == (128, 128)
        masks = [e.mask(s.size) for e in s.entities]
        assert not np.any(np.sum(masks, axis=0) > 1)
        for e, m in zip(s.entities, masks):
            assert np.all(img[m] == e.intensity)
        assert len(s.captions) == 3 and len(set(s.captions)) == 3
        for cap in s.captions:
            assert len(parse_expression(cap).entities) == len(s.entities)


def test_synthetic_is_seeded():
    a = [s.to_json() for s in synthetic_scenes(3, seed=11)]
    b = [s.to_json() for s in synthetic_scenes(3, seed=11)]
    c = [s.to_json() for s in synthetic_scenes(3, seed=12)]
    assert a == b and a != c


def test_caption_variants():
    s = synthetic_scenes(1, seed=0, n_entities=2)[0]
    e0, e1 = s.entities
    assert captions_for(s.entities) == [
        f"{e0.phrase()} and {e1.phrase()}",
        f"{e1.phrase()} near {e0.phrase()}",
        f"{e0.phrase(synonym=True)} and {e1.phrase()}",
    ]


def test_scene_json_and_sidecar(tmp_path):
    s = synthetic_scenes(1, seed=5)[0]
    assert SyntheticScene.from_json(json.loads(json.dumps(s.to_json()))).to_json() == s.to_json()
    png = s.write(tmp_path)
    assert scene_sidecar(png).exists()
    grids = fields_from_sidecar(png)
    assert set(grids) == set(s.fields)
    assert fields_from_sidecar(tmp_path / "nothing.png") is None


def test_scene_record_masks_decode():
    s = synthetic_scenes(1, seed=2)[0]
    rec = s.to_record()
    for (phrase, seg), e in zip(rec.gt, s.entities):
        assert phrase == e.phrase()
        np.testing.assert_array_equal(decode_segmentation(seg), e.mask(s.size))
