"""Deterministic synthetic scenes: colored shapes, boxes and template captions.

Each scene is rendered from its own generator seeded by ``(seed, scene_id)``
so scenes can be produced independently and in any order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 50),
    "magenta": (210, 60, 210),
    "cyan": (60, 210, 210),
}
COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six")
RELATIONS = ("left of", "above", "below")


def grammar_words() -> list[str]:
    words = set(SHAPES) | set(COLORS) | set(COUNT_WORDS)
    for phrase in (*RELATIONS, "a the and is there what color shape how many objects are",
                   "yes no left right image images contains contain both object ?"):
        words.update(phrase.split())
    return sorted(words)


@dataclass
class SceneConfig:
    image_size: int = 64
    classes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.22  # shape extent as a fraction of the image side
    max_size: float = 0.36
    background: tuple[int, int, int] = (40, 40, 40)
    max_retries: int = 200
    distinct: bool = True  # no repeated class or color within a scene

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.colors = tuple(self.colors)
        self.background = tuple(self.background)
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors {sorted(unknown)}")


@dataclass
class SceneObject:
    cls: str
    attr: str
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h


@dataclass
class Scene:
    scene_id: int
    seed: int
    image: np.ndarray  # H×W×3 uint8
    objects: list[SceneObject]
    caption: str
    skipped: int = 0

    def record(self, image_path: str) -> dict:
        return {
            "scene_id": self.scene_id,
            "caption": self.caption,
            "objects": [
                {"class": o.cls, "attr": o.attr, "box": [round(v, 6) for v in o.box]}
                for o in self.objects
            ],
            "image": image_path,
        }


def shape_mask(shape: str, size: int, x0: int, y0: int, extent: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - x0) / extent
    v = (yy - y0) / extent
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if shape == "circle":
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25)
    if shape == "square":
        return inside
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        return inside & (np.abs(u - 0.5) <= 0.5 * v)
    raise ValueError(f"unknown shape {shape!r}")


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _overlaps(a, b, gap: int = 1) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def relation(a: SceneObject, b: SceneObject) -> str:
    """Where ``a`` sits relative to ``b`` (``a`` is never right of ``b``)."""
    dx = b.box[0] - a.box[0]
    dy = b.box[1] - a.box[1]
    if dx >= abs(dy):
        return "left of"
    return "above" if dy > 0 else "below"


def order_objects(objects: Sequence[SceneObject]) -> list[SceneObject]:
    return sorted(objects, key=lambda o: (o.box[0], o.box[1]))


def make_caption(objects: Sequence[SceneObject]) -> str:
    ordered = order_objects(objects)
    parts = [f"a {ordered[0].attr} {ordered[0].cls}"]
    for prev, obj in zip(ordered, ordered[1:]):
        parts.append(f"{relation(prev, obj)} a {obj.attr} {obj.cls}")
    return " ".join(parts)


def parse_caption(caption: str) -> tuple[list[tuple[str, str]], list[str]]:
    """Invert :func:`make_caption` into ``[(color, shape)…]`` and relations."""
    words = caption.split()
    objects, relations, i = [], [], 0
    while i < len(words):
        if words[i] == "a":
            objects.append((words[i + 1], words[i + 2]))
            i += 3
        elif words[i] == "left":
            relations.append("left of")
            i += 2
        else:
            relations.append(words[i])
            i += 1
    return objects, relations


def render_scene(scene_id: int, seed: int, cfg: SceneConfig) -> Scene:
    rng = np.random.default_rng([seed, scene_id])
    size = cfg.image_size
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = cfg.background
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    distinct = cfg.distinct and n <= min(len(cfg.classes), len(cfg.colors))
    if distinct:
        classes = rng.permutation(len(cfg.classes))[:n]
        colors = rng.permutation(len(cfg.colors))[:n]
    else:
        classes = rng.integers(0, len(cfg.classes), n)
        colors = rng.integers(0, len(cfg.colors), n)

    lo = max(3, int(round(cfg.min_size * size)))
    hi = max(lo, int(round(cfg.max_size * size)))
    placed: list[tuple[int, int, int, int]] = []
    objects: list[SceneObject] = []
    skipped = 0
    for k in range(n):
        shape = cfg.classes[int(classes[k])]
        color = cfg.colors[int(colors[k])]
        for _ in range(cfg.max_retries):
            extent = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, size - extent + 1))
            y0 = int(rng.integers(0, size - extent + 1))
            mask = shape_mask(shape, size, x0, y0, extent)
            if not mask.any():
                continue
            bb = mask_box(mask)
            if any(_overlaps(bb, other) for other in placed):
                continue
            placed.append(bb)
            image[mask] = COLORS[color]
            x1, y1, x2, y2 = bb
            box = ((x1 + x2) / 2 / size, (y1 + y2) / 2 / size, (x2 - x1) / size, (y2 - y1) / size)
            objects.append(SceneObject(shape, color, box))
            break
        else:
            skipped += 1
    if skipped:
        log.debug("scene %d: skipped %d unplaceable objects", scene_id, skipped)
    return Scene(scene_id, seed, image, objects, make_caption(objects), skipped)


@dataclass
class GenerationStats:
    scenes: int = 0
    skipped_objects: int = 0
    class_counts: dict = field(default_factory=dict)
    attr_counts: dict = field(default_factory=dict)


def generate(seed: int, count: int, cfg: Optional[SceneConfig] = None,
             stats: Optional[GenerationStats] = None, start: int = 0) -> Iterator[Scene]:
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or SceneConfig()
    for scene_id in range(start, start + count):
        scene = render_scene(scene_id, seed, cfg)
        if stats is not None:
            stats.scenes += 1
            stats.skipped_objects += scene.skipped
            for o in scene.objects:
                stats.class_counts[o.cls] = stats.class_counts.get(o.cls, 0) + 1
                stats.attr_counts[o.attr] = stats.attr_counts.get(o.attr, 0) + 1
        yield scene


# --- image-text matching pairs ------------------------------------------------

def _negative_caption(i: int, scenes: Sequence[Scene], rng: np.random.Generator,
                      pool: Optional[Sequence[Scene]] = None) -> Scene:
    source = scenes if pool is None else pool
    own = scenes[i]
    candidates = [s for s in source if s.scene_id != own.scene_id and s.caption != own.caption]
    if not candidates:
        raise ValueError("no scene with a different caption available for a negative pair")
    return candidates[int(rng.integers(len(candidates)))]


def make_mismatched_pair(scenes: Sequence[Scene], rng: np.random.Generator,
                         pool: Optional[Sequence[Scene]] = None):
    """Pick an image from ``scenes`` and a caption from a different scene."""
    if len(scenes) < 2 and pool is None:
        raise ValueError("need at least two scenes for a mismatched pair")
    i = int(rng.integers(len(scenes)))
    other = _negative_caption(i, scenes, rng, pool)
    return scenes[i], other.caption, False, other.scene_id


@dataclass
class ItmPair:
    image_index: int
    caption: str
    label: bool
    caption_scene_id: int


def sample_itm_pairs(scenes: Sequence[Scene], rng: np.random.Generator,
                     negative_rate: float = 0.5,
                     pool: Optional[Sequence[Scene]] = None) -> list[ItmPair]:
    """One pair per image: matched with prob ``1 - negative_rate``, else a foreign caption."""
    pairs = []
    for i, scene in enumerate(scenes):
        if rng.random() < negative_rate:
            other = _negative_caption(i, scenes, rng, pool)
            pairs.append(ItmPair(i, other.caption, False, other.scene_id))
        else:
            pairs.append(ItmPair(i, scene.caption, True, scene.scene_id))
    return pairs


# --- downstream task grammars -------------------------------------------------

def answer_vocabulary(cfg: Optional[SceneConfig] = None) -> list[str]:
    cfg = cfg or SceneConfig()
    counts = list(COUNT_WORDS[1:cfg.max_objects + 1])
    return [*cfg.colors, *cfg.classes, *counts, "yes", "no"]


@dataclass
class VqaExample:
    scene_index: int
    question: str
    answer: str


def make_vqa(scenes: Sequence[Scene], rng: np.random.Generator, count: int,
             cfg: Optional[SceneConfig] = None) -> list[VqaExample]:
    """Unambiguous question/answer pairs; question kinds are sampled uniformly."""
    cfg = cfg or SceneConfig()
    pools: dict[str, list[VqaExample]] = {"color": [], "shape": [], "count": [], "yes": [], "no": []}
    for i, scene in enumerate(scenes):
        shapes = [o.cls for o in scene.objects]
        colors = [o.attr for o in scene.objects]
        for o in scene.objects:
            if shapes.count(o.cls) == 1:
                pools["color"].append(VqaExample(i, f"what color is the {o.cls} ?", o.attr))
            if colors.count(o.attr) == 1:
                pools["shape"].append(VqaExample(i, f"what shape is the {o.attr} object ?", o.cls))
        pools["count"].append(VqaExample(
            i, "how many objects are there ?", COUNT_WORDS[len(scene.objects)]))
        present = {(o.attr, o.cls) for o in scene.objects}
        for color in cfg.colors:
            for shape in cfg.classes:
                key = "yes" if (color, shape) in present else "no"
                pools[key].append(VqaExample(i, f"is there a {color} {shape} ?", key))
        for shape in cfg.classes:
            key = "yes" if shape in shapes else "no"
            pools[key].append(VqaExample(i, f"is there a {shape} ?", key))
        for color in cfg.colors:
            key = "yes" if color in colors else "no"
            pools[key].append(VqaExample(i, f"is there a {color} object ?", key))
    for pool in pools.values():
        rng.shuffle(pool)
    kinds = ["color", "shape", "count", "yesno"]
    out: list[VqaExample] = []
    while len(out) < count:
        live = [k for k in kinds if (pools["yes"] and pools["no"]) or k != "yesno"]
        live = [k for k in live if k == "yesno" or pools[k]]
        if not live:
            break
        kind = live[int(rng.integers(len(live)))]
        if kind == "yesno":
            kind = "yes" if rng.random() < 0.5 else "no"
        out.append(pools[kind].pop())
    return out


@dataclass
class NlvrExample:
    left_index: int
    right_index: int
    statement: str
    label: bool


def make_nlvr(scenes: Sequence[Scene], rng: np.random.Generator, count: int,
              cfg: Optional[SceneConfig] = None) -> list[NlvrExample]:
    cfg = cfg or SceneConfig()
    out, seen = [], set()
    attempts = 0
    while len(out) < count and attempts < 100 * count:
        attempts += 1
        i, j = (int(v) for v in rng.choice(len(scenes), size=2, replace=False))
        side = "left" if rng.random() < 0.5 else "right"
        target = scenes[i] if side == "left" else scenes[j]
        present = {(o.attr, o.cls) for o in target.objects}
        want = rng.random() < 0.5
        if want:
            attr, cls = sorted(present)[int(rng.integers(len(present)))]
        else:
            absent = [(c, s) for c in cfg.colors for s in cfg.classes if (c, s) not in present]
            attr, cls = absent[int(rng.integers(len(absent)))]
        statement = f"the {side} image contains a {attr} {cls}"
        if (i, j, statement) in seen:
            continue
        seen.add((i, j, statement))
        out.append(NlvrExample(i, j, statement, want))
    return out


# --- serialization -----------------------------------------------------------

def save_split(scenes: Sequence[Scene], directory) -> Path:
    """Write ``index.jsonl`` plus one PNG per scene."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "index.jsonl", "w") as fh:
        for scene in scenes:
            rel = f"images/{scene.scene_id:06d}.png"
            Image.fromarray(scene.image).save(directory / rel)
            fh.write(json.dumps(scene.record(rel), sort_keys=True) + "\n")
    return directory


def load_split(directory) -> list[Scene]:
    from PIL import Image

    directory = Path(directory)
    scenes = []
    with open(directory / "index.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            image = np.asarray(Image.open(directory / rec["image"]).convert("RGB"))
            objects = [SceneObject(o["class"], o["attr"], tuple(o["box"])) for o in rec["objects"]]
            scenes.append(Scene(rec["scene_id"], -1, image, objects, rec["caption"]))
    return scenes


def from_coco(image_info: dict, annotations: Sequence[dict], categories: dict[int, str],
              caption: str, attributes: Optional[dict[int, str]] = None) -> dict:
    """Map a COCO/Visual Genome style record onto the index schema.

    COCO boxes are absolute ``[x, y, w, h]``; the index stores normalized
    ``[cx, cy, w, h]``. Attributes (Visual Genome) are keyed by annotation id;
    objects without one get ``attr: null``. No image data is read.
    """
    W, H = image_info["width"], image_info["height"]
    objects = []
    for ann in annotations:
        x, y, w, h = ann["bbox"]
        objects.append({
            "class": categories[ann["category_id"]],
            "attr": (attributes or {}).get(ann.get("id")),
            "box": [(x + w / 2) / W, (y + h / 2) / H, w / W, h / H],
        })
    return {"scene_id": image_info["id"], "caption": caption, "objects": objects,
            "image": image_info["file_name"]}
