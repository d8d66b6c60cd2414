"""Multimodal sequence protocol: special-token vocabulary, the four input
templates (single image, interleaved multi-image, video, tiled image),
a stream parser, and fixed-length packing with ``<eos>`` separators.

Rendered forms::

    single   <img> slots </img> \\n text
    multi    [text0] <img> slots </img> \\n text1 <img> slots </img> \\n text2 ...
    video    <vid> <img>..</img> <t> <img>..</img> ... </vid> \\n text
    patched  <img>main</img> \\n <img>sub</img><img>sub</img> \\n <img>sub</img>... \\n text

In the tiled form every row of sub-images ends with a newline, including
the last one.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

FULL_SCALE_PACK_LENGTH = 176_000
DESK_PACK_LENGTH = 4096

SPECIAL_TOKENS = ("<pad>", "<eos>", "<img>", "</img>", "<img_token>", "<vid>", "</vid>", "<t>", "\n", "<bos>")

_WORDS = """
What is this This a an cat dog are they the image images Describe describe color shape of in frame video
which Which marked red green blue yellow gray white purple orange circle square triangle cross diamond ring
yes no Yes No same different Is it there and on with background small large picture shows Answer answer
Question Q A copy Copy repeat Repeat say Say after me one two three four five six seven eight first second
last left right top bottom needle hidden object pair match relation holds where Where to for number count
How many word hello world please ok bright colored odd
""".split()

_PIECE_RE = re.compile(r"\n| ?[A-Za-z0-9']+| ?[^\sA-Za-z0-9']|[^\S\n]")


class ProtocolError(ValueError):
    pass


class Vocabulary:
    """512 ids: specials, whole words (bare and space-prefixed), then 256 byte-fallback ids.

    Any text round-trips through ``encode``/``decode``.
    """

    def __init__(self, size: int = 512) -> None:
        n_bytes = 256
        self.size = size
        self.specials = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        words = []
        for w in _WORDS:
            words += [w, " " + w]
        n_word_slots = size - n_bytes - len(SPECIAL_TOKENS)
        if len(words) > n_word_slots:
            raise ValueError(f"{len(words)} word pieces do not fit into {n_word_slots} slots")
        self.byte_offset = size - n_bytes
        self.id_to_piece: list[str | None] = list(SPECIAL_TOKENS) + words
        self.id_to_piece += [None] * (self.byte_offset - len(self.id_to_piece))
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_piece) if w is not None and i >= len(SPECIAL_TOKENS)}

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, special: str) -> int:
        return self.specials[special]

    pad = property(lambda self: self.specials["<pad>"])
    eos = property(lambda self: self.specials["<eos>"])
    img_open = property(lambda self: self.specials["<img>"])
    img_close = property(lambda self: self.specials["</img>"])
    img_token = property(lambda self: self.specials["<img_token>"])
    vid_open = property(lambda self: self.specials["<vid>"])
    vid_close = property(lambda self: self.specials["</vid>"])
    frame_sep = property(lambda self: self.specials["<t>"])
    newline = property(lambda self: self.specials["\n"])

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _PIECE_RE.findall(text):
            if piece == "\n":
                ids.append(self.newline)
            elif piece in self.word_to_id:
                ids.append(self.word_to_id[piece])
            else:
                ids.extend(self.byte_offset + b for b in piece.encode("utf-8"))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out, pending = [], bytearray()
        for i in ids:
            i = int(i)
            if i >= self.byte_offset:
                pending.append(i - self.byte_offset)
                continue
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending = bytearray()
            out.append(self.id_to_piece[i] or "")
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
        return "".join(out)

    def label_id(self, label: str) -> int:
        """Single id of a space-prefixed answer word."""
        ids = self.encode(" " + label)
        if len(ids) != 1:
            raise ProtocolError(f"label {label!r} is not a single token")
        return ids[0]


# ---------------------------------------------------------------------------
# segments


@dataclass(frozen=True)
class Text:
    ids: tuple[int, ...]
    target: bool = False


@dataclass(frozen=True)
class ImageSlot:
    index: int
    length: int = 144


Segment = Union[Text, ImageSlot]


def _canon(segments: Iterable[Segment]) -> tuple[Segment, ...]:
    out: list[Segment] = []
    for seg in segments:
        if isinstance(seg, Text):
            if not seg.ids:
                continue
            if out and isinstance(out[-1], Text) and out[-1].target == seg.target:
                out[-1] = Text(out[-1].ids + seg.ids, seg.target)
                continue
        out.append(seg)
    return tuple(out)


@dataclass(frozen=True)
class MultimodalSequence:
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", _canon(self.segments))

    @property
    def image_slots(self) -> list[ImageSlot]:
        return [s for s in self.segments if isinstance(s, ImageSlot)]

    @property
    def n_images(self) -> int:
        return len(self.image_slots)

    def __len__(self) -> int:
        return sum(len(s.ids) if isinstance(s, Text) else s.length + 2 for s in self.segments)

    def render(self, vocab: Vocabulary) -> list[int]:
        out: list[int] = []
        for s in self.segments:
            if isinstance(s, Text):
                out.extend(s.ids)
            else:
                out.append(vocab.img_open)
                out.extend([vocab.img_token] * s.length)
                out.append(vocab.img_close)
        return out

    def target_mask(self) -> list[bool]:
        out: list[bool] = []
        for s in self.segments:
            if isinstance(s, Text):
                out.extend([s.target] * len(s.ids))
            else:
                out.extend([False] * (s.length + 2))
        return out

    def with_answer(self, ids: Sequence[int]) -> "MultimodalSequence":
        return MultimodalSequence(self.segments + (Text(tuple(ids), target=True),))

    def prompt(self) -> "MultimodalSequence":
        """The sequence with any trailing answer segment removed."""
        segs = list(self.segments)
        while segs and isinstance(segs[-1], Text) and segs[-1].target:
            segs.pop()
        return MultimodalSequence(tuple(segs))


def _text(vocab: Vocabulary, s: str) -> Text:
    return Text(tuple(vocab.encode(s)))


def _sp(*ids: int) -> Text:
    return Text(tuple(ids))


def assemble_single(image_slot: ImageSlot, text: str, vocab: Vocabulary) -> MultimodalSequence:
    return MultimodalSequence((image_slot, _sp(vocab.newline), _text(vocab, text)))


def assemble_multi(image_slots: Sequence[ImageSlot], texts: Sequence[str] | None, vocab: Vocabulary) -> MultimodalSequence:
    """Each image followed by a newline and its text.

    ``texts`` has one entry per image (text after it) or one more (the first
    entry then precedes the first image). ``None`` means all empty.
    """
    n = len(image_slots)
    texts = [""] * n if texts is None else list(texts)
    if len(texts) not in (n, n + 1):
        raise ProtocolError(f"{n} images need {n} or {n + 1} texts, got {len(texts)}")
    segs: list[Segment] = []
    if len(texts) == n + 1:
        segs.append(_text(vocab, texts.pop(0)))
    for slot, txt in zip(image_slots, texts):
        segs += [slot, _sp(vocab.newline), _text(vocab, txt)]
    return MultimodalSequence(tuple(segs))


def assemble_video(frames: Sequence[ImageSlot], text: str, vocab: Vocabulary) -> MultimodalSequence:
    if not frames:
        raise ProtocolError("video needs at least one frame")
    segs: list[Segment] = [_sp(vocab.vid_open)]
    for i, f in enumerate(frames):
        if i:
            segs.append(_sp(vocab.frame_sep))
        segs.append(f)
    segs += [_sp(vocab.vid_close, vocab.newline), _text(vocab, text)]
    return MultimodalSequence(tuple(segs))


def assemble_patched(main: ImageSlot, subimages: Sequence[ImageSlot], row_splits: Sequence[int], text: str,
                     vocab: Vocabulary) -> MultimodalSequence:
    """``row_splits`` are cumulative sub-image counts at the end of each row."""
    splits = list(row_splits)
    if not splits or splits[-1] != len(subimages) or any(b <= a for a, b in zip([0] + splits, splits)):
        raise ProtocolError(f"row splits {splits} inconsistent with {len(subimages)} sub-images")
    segs: list[Segment] = [main, _sp(vocab.newline)]
    start = 0
    for end in splits:
        segs += list(subimages[start:end]) + [_sp(vocab.newline)]
        start = end
    segs.append(_text(vocab, text))
    return MultimodalSequence(tuple(segs))


def single_length(n_text: int, slot: int = 144) -> int:
    return slot + 2 + 1 + n_text


def video_length(n_frames: int, n_text: int, slot: int = 144) -> int:
    return 2 + n_frames * (slot + 2) + (n_frames - 1) + 1 + n_text


def patched_length(n_sub: int, n_rows: int, n_text: int, slot: int = 144) -> int:
    return (slot + 2) + 1 + n_sub * (slot + 2) + n_rows + n_text


def parse_stream(ids: Sequence[int], vocab: Vocabulary) -> MultimodalSequence:
    """Recover segment structure from a rendered stream; image slots are numbered in order."""
    segs: list[Segment] = []
    text: list[int] = []
    i, n_img = 0, 0
    while i < len(ids):
        tok = ids[i]
        if tok == vocab.img_open:
            j = i + 1
            while j < len(ids) and ids[j] == vocab.img_token:
                j += 1
            if j >= len(ids) or ids[j] != vocab.img_close:
                raise ProtocolError(f"unterminated image at position {i}")
            if text:
                segs.append(Text(tuple(text)))
                text = []
            segs.append(ImageSlot(n_img, j - i - 1))
            n_img += 1
            i = j + 1
            continue
        if tok in (vocab.img_close, vocab.img_token):
            raise ProtocolError(f"stray image token at position {i}")
        text.append(tok)
        i += 1
    if text:
        segs.append(Text(tuple(text)))
    return MultimodalSequence(tuple(segs))


def brackets_balanced(ids: Sequence[int], vocab: Vocabulary) -> bool:
    """Linear scan: ``<img>`` never nests, ``<vid>`` never nests, images close before their video."""
    in_img = in_vid = False
    for tok in ids:
        if tok == vocab.img_open:
            if in_img:
                return False
            in_img = True
        elif tok == vocab.img_close:
            if not in_img:
                return False
            in_img = False
        elif tok == vocab.vid_open:
            if in_vid or in_img:
                return False
            in_vid = True
        elif tok == vocab.vid_close:
            if not in_vid or in_img:
                return False
            in_vid = False
        elif tok == vocab.img_token and not in_img:
            return False
    return not in_img and not in_vid


# ---------------------------------------------------------------------------
# packing


class PackingError(ValueError):
    pass


@dataclass
class PackedBatch:
    members: list[int]
    length: int

    def render(self, sequences: Sequence, vocab: Vocabulary) -> list[int]:
        out: list[int] = []
        for k, i in enumerate(self.members):
            if k:
                out.append(vocab.eos)
            seq = sequences[i]
            out.extend(seq.render(vocab) if isinstance(seq, MultimodalSequence) else seq)
        return out


def plan_packing(lengths: Sequence[int], L: int) -> list[PackedBatch]:
    """Greedy first-fit over lengths alone; a separator costs one token between members."""
    batches: list[PackedBatch] = []
    for i, n in enumerate(lengths):
        if n > L:
            raise PackingError(f"sequence {i} has length {n} > pack length {L}")
        for b in batches:
            if b.length + 1 + n <= L:
                b.members.append(i)
                b.length += 1 + n
                break
        else:
            batches.append(PackedBatch([i], n))
    return batches


def pack(sequences: Sequence, L: int = DESK_PACK_LENGTH) -> list[PackedBatch]:
    return plan_packing([len(s) for s in sequences], L)


# ---------------------------------------------------------------------------
# dataset records (line-delimited JSON)

TASK_TYPES = ("single", "multi", "video", "patched", "text")


@dataclass
class Record:
    task_type: str
    images: list = field(default_factory=list)   # procedural spec dicts or raster file paths
    texts: list[str] = field(default_factory=list)
    question: str = ""
    answer: str = ""
    row_splits: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task_type not in TASK_TYPES:
            raise ProtocolError(f"unknown task_type {self.task_type!r}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def write_records(records: Iterable[Record], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[Record]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Record(**json.loads(line)))
    return out


def record_to_sequence(rec: Record, vocab: Vocabulary, tokens_per_image: int = 144,
                       with_answer: bool = True) -> MultimodalSequence:
    slots = [ImageSlot(i, tokens_per_image) for i in range(len(rec.images))]
    if rec.task_type == "single":
        seq = assemble_single(slots[0], rec.question, vocab)
    elif rec.task_type == "multi":
        seq = assemble_multi(slots, rec.texts or None, vocab)
        seq = MultimodalSequence(seq.segments + (_text(vocab, rec.question),))
    elif rec.task_type == "video":
        seq = assemble_video(slots, rec.question, vocab)
    elif rec.task_type == "patched":
        seq = assemble_patched(slots[0], slots[1:], rec.row_splits, rec.question, vocab)
    else:
        seq = MultimodalSequence((_text(vocab, rec.question),))
    if with_answer and rec.answer:
        seq = seq.with_answer(vocab.encode(" " + rec.answer))
    return seq
