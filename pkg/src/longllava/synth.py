"""Procedural images and self-labelling synthetic tasks.

Images are coloured geometric shapes on plain dark backgrounds, described by
small dicts (``ImageSpec``) so records stay serialisable and the label of
every instance follows from its generation parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .protocol import Record
from .tensor import Rng
from .vision import Image, segment_image

COLORS = {
    "red": (0.92, 0.10, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.98, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
    "gray": (0.55, 0.55, 0.55),
}
NEEDLE_COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "cross")

EVAL_SEED_OFFSET = 1_000_000  # eval instances draw from a seed range disjoint from training


def _mask(shape: str, side: int, cx: float, cy: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float32) + 0.5
    dx, dy = x - cx, y - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if shape == "cross":
        w = r / 3
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def image_key(spec: dict) -> str:
    return json.dumps(spec, sort_keys=True)


@lru_cache(maxsize=4096)
def _render_cached(key: str) -> Image:
    spec = json.loads(key)
    side = spec.get("side", 96)
    width = spec.get("width", side)
    height = spec.get("height", side)
    bg = spec.get("bg", 0.15)
    px = np.full((height, width, 3), bg, np.float32)
    for obj in spec.get("objects", []):
        m = _mask(obj["shape"], max(height, width), obj["cx"] * width, obj["cy"] * height, obj["r"] * min(height, width))
        m = m[:height, :width]
        px[m] = COLORS[obj["color"]]
    return Image(px)


def render(spec: dict) -> Image:
    """Draw an image spec: ``{"side", "bg", "objects": [{"shape", "color", "cx", "cy", "r"}]}``."""
    return _render_cached(image_key(spec))


def random_object(rng: Rng, shape: str, color: str, r_range=(0.28, 0.31)) -> dict:
    r = float(r_range[0] + (r_range[1] - r_range[0]) * rng.random())
    cx = float(r + (1 - 2 * r) * rng.random())
    cy = float(r + (1 - 2 * r) * rng.random())
    return {"shape": shape, "color": color, "cx": round(cx, 3), "cy": round(cy, 3), "r": round(r, 3)}


def object_image(rng: Rng, shape: str, color: str, side: int = 96) -> dict:
    bg = round(0.05 + 0.2 * rng.random(), 3)
    return {"side": side, "bg": bg, "objects": [random_object(rng, shape, color)]}


def blank_image(rng: Rng, side: int = 96) -> dict:
    return {"side": side, "bg": round(0.05 + 0.2 * rng.random(), 3), "objects": []}


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthTaskSpec:
    task: str = "caption"                 # caption | needle | icl_match
    n_colors: int = 4
    n_shapes: int = 3
    image_size: int = 96
    haystack: tuple[int, int] = (2, 8)    # needle: frame count range (inclusive)
    shots: tuple[int, int] = (0, 4)       # icl: support count range (inclusive)
    relation: str | None = None           # icl: fixed relation, or None for random
    seed: int = 0


def caption_classes(spec: SynthTaskSpec) -> list[tuple[str, str]]:
    return [(c, s) for c in NEEDLE_COLORS[:spec.n_colors] for s in SHAPES[:spec.n_shapes]]


def gen_caption_task(spec: SynthTaskSpec, n: int, seed: int) -> list[Record]:
    """Single images labelled "<color> <shape>"; classes are balanced then shuffled."""
    rng = Rng(seed, "caption")
    classes = caption_classes(spec)
    labels = [classes[i % len(classes)] for i in range(n)]
    order = rng.permutation(n)
    out = []
    for i in order:
        color, shape = labels[i]
        img = object_image(rng, shape, color, spec.image_size)
        out.append(Record("single", [img], question="Describe the image.", answer=f"{color} {shape}",
                          meta={"color": color, "shape": shape}))
    return out


def gen_single_qa(spec: SynthTaskSpec, n: int, seed: int) -> list[Record]:
    rng = Rng(seed, "single_qa")
    classes = caption_classes(spec)
    out = []
    for _ in range(n):
        color, shape = classes[int(rng.integers(0, len(classes)))]
        img = object_image(rng, shape, color, spec.image_size)
        kind = int(rng.integers(0, 3))
        if kind == 0:
            out.append(Record("single", [img], question="What color is the object?", answer=color,
                              meta={"color": color, "shape": shape}))
        elif kind == 1:
            out.append(Record("single", [img], question="What shape is the object?", answer=shape,
                              meta={"color": color, "shape": shape}))
        else:
            out.append(Record("single", [img], question="Describe the image.", answer=f"{color} {shape}",
                              meta={"color": color, "shape": shape}))
    return out


def needle_index(haystack_size: int, depth_fraction: float) -> int:
    """Half-up rounding of ``depth * (n - 1)``.

    The product is rounded to 9 decimals first so decimal depths such as 0.7
    land on exact ties instead of just below them.
    """
    return int(np.floor(round(depth_fraction * (haystack_size - 1), 9) + 0.5))


def make_needle_frames(rng: Rng, haystack_size: int, needle_idx: int, needle_color: str,
                       distractor_shapes=SHAPES, side: int = 96) -> list[dict]:
    """Gray distractor shapes with one coloured needle frame."""
    frames = []
    for i in range(haystack_size):
        shape = distractor_shapes[int(rng.integers(0, len(distractor_shapes)))]
        color = needle_color if i == needle_idx else "gray"
        frames.append(object_image(rng, shape, color, side))
    return frames


NEEDLE_QUESTION = "What color is the needle?"


def gen_needle_task(spec: SynthTaskSpec, n: int, seed: int, question: str = NEEDLE_QUESTION) -> list[Record]:
    rng = Rng(seed, "needle")
    lo, hi = spec.haystack
    out = []
    for _ in range(n):
        size = int(rng.integers(lo, hi + 1))
        idx = int(rng.integers(0, size))
        color = NEEDLE_COLORS[int(rng.integers(0, spec.n_colors))]
        frames = make_needle_frames(rng, size, idx, color, side=spec.image_size)
        out.append(Record("video", frames, question=question, answer=color,
                          meta={"needle_index": idx, "color": color, "haystack": size}))
    return out


# ---------------------------------------------------------------------------
# in-context matching

RELATIONS = ("same shape", "same color")


def relation_holds(relation: str, a: dict, b: dict) -> bool:
    oa, ob = a["objects"][0], b["objects"][0]
    if relation == "same shape":
        return oa["shape"] == ob["shape"]
    if relation == "same color":
        return oa["color"] == ob["color"]
    raise ValueError(f"unknown relation {relation!r}")


def make_pair(rng: Rng, relation: str, label: bool, n_colors: int = 4, n_shapes: int = 4,
              side: int = 96) -> tuple[dict, dict]:
    """Image pair where ``relation`` holds iff ``label``; the other attribute disagrees with it.

    Because exactly one of shape/colour matches, the label cannot be read off
    without knowing which relation is in play.
    """
    colors, shapes = NEEDLE_COLORS[:n_colors], SHAPES[:n_shapes]
    c1, s1 = colors[int(rng.integers(0, n_colors))], shapes[int(rng.integers(0, n_shapes))]
    same_shape = label if relation == "same shape" else not label
    other = lambda pool, v: [p for p in pool if p != v][int(rng.integers(0, len(pool) - 1))]
    s2 = s1 if same_shape else other(shapes, s1)
    c2 = other(colors, c1) if same_shape else c1
    return object_image(rng, s1, c1, side), object_image(rng, s2, c2, side)


def icl_labels(rng: Rng, k: int) -> list[bool]:
    """Balanced yes/no support labels in random order (exactly half each when k is even)."""
    labels = [i % 2 == 0 for i in range(k)]
    if k % 2:
        labels[-1] = bool(rng.integers(0, 2))
    return [labels[i] for i in rng.permutation(k)]


def yes_no(b: bool) -> str:
    return "yes" if b else "no"


def icl_record(relation: str, supports: list[tuple[dict, dict, bool]], query: tuple[dict, dict],
               answer: bool) -> Record:
    images, texts = [], []
    for a, b, lab in supports:
        images += [a, b]
        texts += ["", f"Answer: {yes_no(lab)}"]
    images += list(query)
    texts += ["", "Answer:"]
    return Record("multi", images, texts=texts, question="", answer=yes_no(answer),
                  meta={"relation": relation, "k": len(supports)})


def gen_icl_task(spec: SynthTaskSpec, n: int, seed: int) -> list[Record]:
    rng = Rng(seed, "icl")
    lo, hi = spec.shots
    out = []
    for _ in range(n):
        relation = spec.relation or RELATIONS[int(rng.integers(0, len(RELATIONS)))]
        k = int(rng.integers(lo, hi + 1))
        supports = []
        for lab in icl_labels(rng, k):
            a, b = make_pair(rng, relation, lab, side=spec.image_size)
            supports.append((a, b, lab))
        qlab = bool(rng.integers(0, 2))
        q = make_pair(rng, relation, qlab, side=spec.image_size)
        out.append(icl_record(relation, supports, q, qlab))
    return out


# ---------------------------------------------------------------------------
# other sources of the multi-image mixture


def gen_text_task(n: int, seed: int) -> list[Record]:
    """Pure-text instructions: copy a short word sequence."""
    rng = Rng(seed, "text")
    pool = list(NEEDLE_COLORS) + list(SHAPES) + ["one", "two", "three", "four", "yes", "no"]
    out = []
    for _ in range(n):
        words = [pool[int(rng.integers(0, len(pool)))] for _ in range(int(rng.integers(1, 4)))]
        out.append(Record("text", question=f"Copy: {' '.join(words)}\nAnswer:", answer=" ".join(words)))
    return out


def gen_video_caption(spec: SynthTaskSpec, n: int, seed: int) -> list[Record]:
    return gen_needle_task(spec, n, seed, question="Describe the video.")


def gen_subimage_task(spec: SynthTaskSpec, n: int, seed: int) -> list[Record]:
    """A wide image holding one object, tiled into sub-images; asks for the object's colour."""
    rng = Rng(seed, "subimage")
    side = spec.image_size
    out = []
    for _ in range(n):
        cols = int(rng.integers(1, 3))
        rows = int(rng.integers(1, 3))
        color = NEEDLE_COLORS[int(rng.integers(0, spec.n_colors))]
        shape = SHAPES[int(rng.integers(0, spec.n_shapes))]
        obj = random_object(rng, shape, color, r_range=(0.12, 0.18))
        big = {"side": side, "width": side * cols, "height": side * rows, "bg": 0.1, "objects": [obj]}
        seg = segment_image(render(big), side)
        # tiles are referenced by crop so records stay serialisable
        images = [{"crop_of": big, "tile": None, "side": side}]
        images += [{"crop_of": big, "tile": [r, c], "side": side} for r in range(rows) for c in range(cols)]
        out.append(Record("patched", images, question="What color is the object?", answer=color,
                          row_splits=list(seg.row_splits), meta={"color": color}))
    return out


def resolve_image(ref) -> Image:
    """Materialise an image reference: spec dict, crop-of-spec dict, or raster file path."""
    from .vision import read_raster

    if isinstance(ref, str):
        return read_raster(ref)
    if "crop_of" in ref:
        return _resolve_crop(image_key(ref))
    return render(ref)


@lru_cache(maxsize=1024)
def _resolve_crop(key: str) -> Image:
    from .vision import resize

    ref = json.loads(key)
    big = render(ref["crop_of"])
    side = ref["side"]
    if ref["tile"] is None:
        return resize(big, side, side)
    seg = segment_image(big, side)
    r, c = ref["tile"]
    return seg.subimages[r * seg.n_cols + c]
