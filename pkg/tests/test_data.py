import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp.data import (
    SHAPES, GenerationStats, SceneConfig, answer_vocabulary, from_coco, generate, load_split,
    make_mismatched_pair, make_nlvr, make_vqa, mask_box, parse_caption, render_scene,
    sample_itm_pairs, save_split, shape_mask,
)
from gridvlp.text import default_vocabulary, detokenize, tokenize


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def colour_box(scene, obj):
    """Bounding box of the pixels painted in the object's colour."""
    from gridvlp.data import COLORS

    mask = (scene.image == np.array(COLORS[obj.attr], dtype=np.uint8)).all(-1)
    x1, y1, x2, y2 = mask_box(mask)
    s = scene.image.shape[0]
    return ((x1 + x2) / 2 / s, (y1 + y2) / 2 / s, (x2 - x1) / s, (y2 - y1) / s)


def test_same_seed_is_byte_identical():
    a = list(generate(5, 20))
    b = list(generate(5, 20))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.caption == y.caption


def test_scenes_independent_of_start():
    whole = list(generate(3, 10))
    tail = list(generate(3, 4, start=6))
    assert [s.caption for s in whole[6:]] == [s.caption for s in tail]


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        list(generate(0, 0))


def test_single_object_grammar():
    pattern = re.compile(r"^a (red|green|blue|yellow|magenta|cyan) (circle|square|triangle)$")
    for scene in generate(1, 200, SceneConfig(max_objects=1)):
        assert pattern.match(scene.caption), scene.caption


def test_boxes_tight_and_in_unit_square():
    for scene in generate(2, 300):
        for obj in scene.objects:
            assert all(0 <= v <= 1 for v in obj.box)
            assert box_iou(obj.box, colour_box(scene, obj)) >= 0.95


def test_objects_do_not_overlap():
    for scene in generate(4, 300):
        for i, a in enumerate(scene.objects):
            for b in scene.objects[i + 1:]:
                assert box_iou(a.box, b.box) <= 0.1


def test_caption_mentions_each_object_once():
    for scene in generate(6, 300):
        for obj in scene.objects:
            assert scene.caption.count(f"{obj.attr} {obj.cls}") == 1


def test_caption_grammar_is_invertible():
    for scene in generate(7, 300):
        objects, relations = parse_caption(scene.caption)
        assert sorted(objects) == sorted((o.attr, o.cls) for o in scene.objects)
        assert len(relations) == len(objects) - 1


def test_class_and_colour_balance():
    stats = GenerationStats()
    for _ in generate(11, 1000, stats=stats):
        pass
    assert stats.scenes == 1000
    for counts in (stats.class_counts, stats.attr_counts):
        mean = sum(counts.values()) / len(counts)
        for c in counts.values():
            assert abs(c - mean) <= 0.1 * mean


def test_unsatisfiable_placement_is_skipped():
    cfg = SceneConfig(min_objects=3, max_objects=3, min_size=0.9, max_size=0.95, max_retries=20)
    stats = GenerationStats()
    scenes = list(generate(0, 5, cfg, stats))
    assert len(scenes) == 5
    assert stats.skipped_objects == 10
    assert all(len(s.objects) == 1 for s in scenes)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(SHAPES), st.integers(8, 40), st.integers(0, 20), st.integers(0, 20))
def test_shape_mask_inside_extent(shape, extent, x0, y0):
    mask = shape_mask(shape, 64, x0, y0, extent)
    x1, y1, x2, y2 = mask_box(mask)
    assert x0 <= x1 and y0 <= y1 and x2 <= x0 + extent and y2 <= y0 + extent


def test_captions_tokenize_without_unknowns():
    vocab = default_vocabulary()
    for scene in generate(0, 100):
        ids = tokenize(scene.caption, vocab)
        assert vocab.unk_id not in ids.token_ids
        assert detokenize(ids.token_ids, vocab) == scene.caption


# --- mismatched pairs ----------------------------------------------------------------

def test_two_scenes_force_the_swap():
    scenes = [s for s in generate(0, 10)][:2]
    assert scenes[0].caption != scenes[1].caption
    rng = np.random.default_rng(0)
    for _ in range(20):
        image_scene, caption, label, sid = make_mismatched_pair(scenes, rng)
        assert not label
        other = scenes[1] if image_scene is scenes[0] else scenes[0]
        assert caption == other.caption and sid == other.scene_id


def test_mismatched_pair_needs_two():
    with pytest.raises(ValueError):
        make_mismatched_pair(list(generate(0, 1)), np.random.default_rng(0))


def test_label_balance_and_foreign_negatives():
    scenes = list(generate(0, 64))
    rng = np.random.default_rng(0)
    labels = []
    for _ in range(160):
        for pair in sample_itm_pairs(scenes, rng):
            labels.append(pair.label)
            own = scenes[pair.image_index]
            if pair.label:
                assert pair.caption == own.caption
            else:
                assert pair.caption_scene_id != own.scene_id
                assert pair.caption != own.caption
    assert len(labels) >= 10000
    assert 0.48 <= np.mean(labels) <= 0.52


# --- downstream grammars -------------------------------------------------------------

def test_vqa_answers_follow_from_annotations():
    scenes = list(generate(0, 40))
    answers = set(answer_vocabulary())
    for ex in make_vqa(scenes, np.random.default_rng(0), 300):
        scene = scenes[ex.scene_index]
        assert ex.answer in answers
        words = ex.question.split()
        if ex.question.startswith("what color"):
            assert (ex.answer, words[4]) in {(o.attr, o.cls) for o in scene.objects}
        elif ex.question.startswith("what shape"):
            assert (words[4], ex.answer) in {(o.attr, o.cls) for o in scene.objects}
        elif ex.question.startswith("how many"):
            assert ex.answer == ["zero", "one", "two", "three"][len(scene.objects)]
        elif len(words) == 5:
            assert ex.answer == ("yes" if words[3] in {o.cls for o in scene.objects} else "no")
        elif words[4] == "object":
            assert ex.answer == ("yes" if words[3] in {o.attr for o in scene.objects} else "no")
        else:
            present = (words[3], words[4]) in {(o.attr, o.cls) for o in scene.objects}
            assert ex.answer == ("yes" if present else "no")


def test_vqa_sixteen_scenes_yield_two_hundred():
    assert len(make_vqa(list(generate(0, 16)), np.random.default_rng(0), 200)) == 200


def test_nlvr_labels_follow_from_annotations():
    scenes = list(generate(0, 30))
    examples = make_nlvr(scenes, np.random.default_rng(1), 200)
    assert len(examples) == 200
    for ex in examples:
        words = ex.statement.split()
        target = scenes[ex.left_index if words[1] == "left" else ex.right_index]
        present = (words[5], words[6]) in {(o.attr, o.cls) for o in target.objects}
        assert present == ex.label
    assert 0.35 < np.mean([ex.label for ex in examples]) < 0.65


# --- serialization -------------------------------------------------------------------

def test_split_round_trip(tmp_path):
    scenes = list(generate(0, 6))
    save_split(scenes, tmp_path)
    records = [json.loads(line) for line in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert set(records[0]) == {"scene_id", "caption", "objects", "image"}
    loaded = load_split(tmp_path)
    for a, b in zip(scenes, loaded):
        assert np.array_equal(a.image, b.image)
        assert a.caption == b.caption
        assert [o.cls for o in a.objects] == [o.cls for o in b.objects]
        for oa, ob in zip(a.objects, b.objects):
            assert oa.box == pytest.approx(ob.box, abs=1e-6)


def test_large_preset_renders():
    scene = render_scene(0, 0, SceneConfig(image_size=160))
    assert scene.image.shape == (160, 160, 3)


def test_from_coco_normalises_boxes():
    rec = from_coco({"id": 9, "width": 200, "height": 100, "file_name": "x.jpg"},
                    [{"id": 1, "bbox": [50, 25, 100, 50], "category_id": 3}], {3: "dog"},
                    "a dog", {1: "brown"})
    assert rec["objects"] == [{"class": "dog", "attr": "brown", "box": [0.5, 0.5, 0.5, 0.5]}]
