"""Synthetic evaluation suites and the grid scorer.

Every instance carries its own ground truth, derived from the parameters
that generated it. Runners answer with one label from a closed set; a model
runner does this by constrained decoding over the label tokens.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .model import forward_full
from .protocol import MultimodalSequence, Record, Vocabulary, record_to_sequence
from .synth import (
    EVAL_SEED_OFFSET,
    NEEDLE_COLORS,
    NEEDLE_QUESTION,
    RELATIONS,
    SHAPES,
    icl_labels,
    icl_record,
    make_needle_frames,
    make_pair,
    needle_index,
    relation_holds,
    yes_no,
)
from .tensor import Rng

YES_NO = ("yes", "no")


@dataclass
class EvalInstance:
    record: Record
    answer: str
    labels: tuple[str, ...]
    truth: Callable[[], str] = field(repr=False, default=None)  # recomputes the label from generation parameters

    def sequence(self, vocab: Vocabulary, tokens_per_image: int = 144) -> MultimodalSequence:
        return record_to_sequence(self.record, vocab, tokens_per_image, with_answer=False)


# ---------------------------------------------------------------------------
# needle in a haystack


@dataclass(frozen=True)
class NIAHSpec:
    haystack_size: int
    depth_fraction: float = 0.5
    needle_class: int = 0                      # index into NEEDLE_COLORS
    distractor_shapes: tuple[str, ...] = SHAPES
    seed: int = 0
    image_size: int = 96

    def __post_init__(self) -> None:
        if self.haystack_size < 1:
            raise ValueError("haystack_size must be at least 1")
        if not 0.0 <= self.depth_fraction <= 1.0:
            raise ValueError("depth_fraction must lie in [0, 1]")
        if not 0 <= self.needle_class < len(NEEDLE_COLORS):
            raise ValueError("needle_class out of range")

    @property
    def needle_index(self) -> int:
        return needle_index(self.haystack_size, self.depth_fraction)


def needle_color_of(frames: Sequence[dict]) -> str | None:
    """The colour of the single non-gray object among ``frames``, read from their specs."""
    found = [o["color"] for f in frames for o in f.get("objects", []) if o["color"] != "gray"]
    if len(found) > 1:
        raise ValueError("more than one needle")
    return found[0] if found else None


def gen_niah(spec: NIAHSpec) -> EvalInstance:
    rng = Rng(spec.seed + EVAL_SEED_OFFSET, "niah")
    color = NEEDLE_COLORS[spec.needle_class]
    frames = make_needle_frames(rng, spec.haystack_size, spec.needle_index, color, spec.distractor_shapes,
                                spec.image_size)
    rec = Record("video", frames, question=NEEDLE_QUESTION, answer=color,
                 meta={"needle_index": spec.needle_index, "haystack": spec.haystack_size})
    return EvalInstance(rec, color, NEEDLE_COLORS, lambda: needle_color_of(frames))


# ---------------------------------------------------------------------------
# in-context matching


@dataclass
class ICLInstance:
    relation: str
    supports: list[tuple[dict, dict, bool]]
    query: tuple[dict, dict]
    label: bool

    @property
    def k(self) -> int:
        return len(self.supports)

    def to_record(self) -> Record:
        return icl_record(self.relation, self.supports, self.query, self.label)

    def to_eval(self) -> EvalInstance:
        q = self.query
        return EvalInstance(self.to_record(), yes_no(self.label), YES_NO,
                            lambda: yes_no(relation_holds(self.relation, *q)))


def gen_icl_matching(relation: str, k: int, seed: int, image_size: int = 96) -> ICLInstance:
    """``k`` labelled support pairs (balanced when ``k`` is even) and one query pair.

    Support and query draws use separate streams so the query for a given
    seed is the same at every ``k``.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    base = Rng(seed + EVAL_SEED_OFFSET, "icl_eval")
    qrng, srng = base.spawn("query"), base.spawn("supports")
    label = bool(qrng.integers(0, 2))
    query = make_pair(qrng, relation, label, side=image_size)
    supports = []
    for lab in icl_labels(srng, k):
        a, b = make_pair(srng, relation, lab, side=image_size)
        supports.append((a, b, lab))
    return ICLInstance(relation, supports, query, label)


# ---------------------------------------------------------------------------
# runners


class Runner(Protocol):
    def __call__(self, inst: EvalInstance) -> str: ...


class OracleRunner:
    """Answers from the generation parameters."""

    def __call__(self, inst: EvalInstance) -> str:
        return inst.truth()


class RandomRunner:
    def __init__(self, seed: int = 0) -> None:
        self.rng = Rng(seed, "random_runner")

    def __call__(self, inst: EvalInstance) -> str:
        return inst.labels[int(self.rng.integers(0, len(inst.labels)))]


class ExhaustiveRunner:
    """Inspects every frame it is shown for the needle; guesses uniformly when none is visible."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = Rng(seed, "exhaustive_runner")

    def __call__(self, inst: EvalInstance) -> str:
        color = needle_color_of(inst.record.images)
        if color is not None:
            return color
        return inst.labels[int(self.rng.integers(0, len(inst.labels)))]


class ModelRunner:
    """Greedy answer restricted to the instance's label set (one token per label)."""

    def __init__(self, components) -> None:
        self.comp = components

    @torch.no_grad()
    def __call__(self, inst: EvalInstance) -> str:
        comp = self.comp
        seq = inst.sequence(comp.vocab, comp.tokens_per_image)
        ids = torch.tensor(seq.render(comp.vocab), dtype=torch.long)
        refs = [inst.record.images[s.index] for s in seq.image_slots]
        logits = forward_full(comp.model, ids, comp.image_embeds(refs))[-1]
        label_ids = [comp.vocab.label_id(lab) for lab in inst.labels]
        return inst.labels[int(torch.argmax(logits[label_ids]))]


# ---------------------------------------------------------------------------
# grids


@dataclass
class EvalCell:
    coords: dict
    correct: int = 0
    trials: int = 0
    valid: bool = True
    error: str = ""

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials if self.trials and self.valid else math.nan


@dataclass
class EvalGrid:
    axes: dict[str, list]
    cells: list[EvalCell]

    def cell(self, **coords) -> EvalCell:
        for c in self.cells:
            if c.coords == coords:
                return c
        raise KeyError(coords)

    def accuracies(self) -> list[float]:
        return [c.accuracy for c in self.cells]

    def series(self, axis: str) -> tuple[list, list[float]]:
        """Accuracy along ``axis``, pooled over every other axis."""
        xs = list(self.axes[axis])
        ys = []
        for x in xs:
            cs = [c for c in self.cells if c.coords[axis] == x and c.valid]
            n = sum(c.trials for c in cs)
            ys.append(sum(c.correct for c in cs) / n if n else math.nan)
        return xs, ys

    def rows(self) -> list[dict]:
        return [{**c.coords, "accuracy": c.accuracy, "correct": c.correct, "trials": c.trials,
                 "valid": c.valid, "error": c.error} for c in self.cells]

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def write_heatmap(self, path: str | Path, x_axis: str, y_axis: str) -> None:
        """``x y accuracy`` triples, one per line, for external heatmap plotting."""
        with open(path, "w") as fh:
            fh.write(f"# {x_axis} {y_axis} accuracy\n")
            for c in self.cells:
                fh.write(f"{c.coords[x_axis]} {c.coords[y_axis]} {c.accuracy}\n")


Generator = Callable[[dict, int], EvalInstance]


def _cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def score_grid(runner: Runner, generator: Generator, axes: dict[str, Sequence], trials: int, seed: int,
               common_axes: Sequence[str] = ()) -> EvalGrid:
    """Exact-match accuracy of ``runner`` on ``trials`` instances per cell.

    Cells are the Cartesian product of ``axes``; ``generator(coords, seed)``
    builds one instance. Each cell's instance seeds derive from
    ``(seed, cell index)``, where the cell index ignores ``common_axes`` so
    cells that differ only along those axes see the same random draws. A
    runner exception marks the cell invalid and scoring moves on.
    """
    names = list(axes)
    grid_axes = {k: list(v) for k, v in axes.items()}
    seed_names = [n for n in names if n not in common_axes]
    seed_index = {c: i for i, c in enumerate(product(*(grid_axes[n] for n in seed_names)))}
    cells = []
    for values in product(*(grid_axes[n] for n in names)):
        coords = dict(zip(names, values))
        cell = EvalCell(coords)
        base = _cell_seed(seed, seed_index[tuple(coords[n] for n in seed_names)])
        try:
            for t in range(trials):
                inst = generator(coords, base + t)
                cell.correct += int(runner(inst) == inst.answer)
                cell.trials += 1
        except Exception as exc:  # a failing cell must not sink the whole grid
            cell.valid = False
            cell.error = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
    return EvalGrid(grid_axes, cells)


def niah_generator(n_classes: int = len(NEEDLE_COLORS), image_size: int = 96) -> Generator:
    """Cells over ``haystack`` and ``depth``; needle class drawn per trial."""
    def gen(coords: dict, seed: int) -> EvalInstance:
        cls = int(Rng(seed, "niah_class").integers(0, n_classes))
        return gen_niah(NIAHSpec(coords["haystack"], coords["depth"], cls, seed=seed, image_size=image_size))
    return gen


def icl_generator(relation: str = "same shape", image_size: int = 96) -> Generator:
    """Cells over ``shots``."""
    def gen(coords: dict, seed: int) -> EvalInstance:
        return gen_icl_matching(coords.get("relation", relation), coords["shots"], seed, image_size).to_eval()
    return gen


def niah_grid(runner: Runner, haystacks=(2, 4, 8), depths=(0.0, 0.25, 0.5, 0.75, 1.0), trials: int = 20,
              seed: int = 0, image_size: int = 96) -> EvalGrid:
    return score_grid(runner, niah_generator(image_size=image_size), {"haystack": haystacks, "depth": depths},
                      trials, seed)


def icl_grid(runner: Runner, shots=(1, 2, 4, 5), relation: str = "same shape", trials: int = 50,
             seed: int = 0, image_size: int = 96) -> EvalGrid:
    """Shot sweep with common random numbers: every shot count shares its query pairs."""
    return score_grid(runner, icl_generator(relation, image_size), {"shots": shots}, trials, seed,
                      common_axes=("shots",))


# ---------------------------------------------------------------------------
# frame-budget sweeps


@dataclass
class Video:
    frames: list[dict]
    answer: str


def uniform_sample(n_frames: int, budget: int) -> list[int]:
    """``budget`` indices ``floor(i * n / budget)``; all frames when ``budget >= n``."""
    if budget >= n_frames:
        return list(range(n_frames))
    return [i * n_frames // budget for i in range(budget)]


def needle_video(length: int = 64, needle_at: int | None = None, image_size: int = 96) -> Callable[[int], Video]:
    """Factory of needle videos; ``needle_at`` pins the needle (random position otherwise)."""
    def make(seed: int) -> Video:
        rng = Rng(seed + EVAL_SEED_OFFSET, "video")
        idx = needle_at if needle_at is not None else int(rng.integers(0, length))
        color = NEEDLE_COLORS[int(rng.integers(0, len(NEEDLE_COLORS)))]
        return Video(make_needle_frames(rng, length, idx, color, side=image_size), color)
    return make


def sweep_frames(runner: Runner, frame_counts: Sequence[int], task: Callable[[int], Video] | None = None,
                 trials: int = 20, seed: int = 0) -> EvalGrid:
    """Accuracy when the runner sees only ``count`` uniformly sampled frames of each video.

    The same videos are used at every count; ground truth is the full
    video's label.
    """
    counts = list(frame_counts)
    if counts != sorted(counts):
        raise ValueError("frame counts must be ascending")
    task = task or needle_video()

    def gen(coords: dict, s: int) -> EvalInstance:
        video = task(s)
        shown = [video.frames[i] for i in uniform_sample(len(video.frames), coords["frames"])]
        rec = Record("video", shown, question=NEEDLE_QUESTION, answer=video.answer)
        return EvalInstance(rec, video.answer, NEEDLE_COLORS, lambda: needle_color_of(video.frames))

    return score_grid(runner, gen, {"frames": counts}, trials, seed, common_axes=("frames",))


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)


def capability_scores(runner: Runner, image_size: int, trials: int = 20, seed: int = 1,
                      haystack: int = 8, shots: Sequence[int] = (0, 1, 2, 3, 4),
                      relation: str = "same shape") -> dict:
    """Long-context retrieval at one haystack size plus an ICL shot curve.

    NIAH runs ``trials`` per depth over the default depth grid; the ICL
    sweep uses ``4 * trials`` shared query pairs per shot count.
    """
    niah = niah_grid(runner, haystacks=(haystack,), trials=trials, seed=seed, image_size=image_size)
    icl = icl_grid(runner, shots=shots, relation=relation, trials=4 * trials, seed=seed, image_size=image_size)
    depth_acc = niah.accuracies()
    xs, acc = icl.series("shots")
    return {"niah_haystack": haystack, "niah_by_depth": dict(zip(map(str, niah.axes["depth"]), depth_acc)),
            "niah": sum(depth_acc) / len(depth_acc), "niah_trials": trials * len(depth_acc),
            "icl_shots": list(xs), "icl_accuracy": list(acc), "icl_trials": 4 * trials}
