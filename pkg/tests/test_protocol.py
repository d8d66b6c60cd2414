import importlib.util
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longllava.protocol import (
    FULL_SCALE_PACK_LENGTH,
    SPECIAL_TOKENS,
    ImageSlot,
    MultimodalSequence,
    PackingError,
    ProtocolError,
    Record,
    Text,
    Vocabulary,
    assemble_multi,
    assemble_patched,
    assemble_single,
    assemble_video,
    brackets_balanced,
    pack,
    parse_stream,
    patched_length,
    plan_packing,
    read_records,
    record_to_sequence,
    single_length,
    video_length,
    write_records,
)

FIXTURES = Path(__file__).parent / "fixtures"
V = Vocabulary()


def _fixture_module():
    path = Path(__file__).resolve().parents[1] / "scripts" / "make_protocol_fixtures.py"
    spec = importlib.util.spec_from_file_location("make_protocol_fixtures", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.mark.parametrize("name", ["single", "multi", "video", "patched"])
def test_template_matches_golden_fixture_bytewise(name):
    mod = _fixture_module()
    rendered = mod.serialize(mod.templates(V)[name].render(V))
    assert rendered == (FIXTURES / f"template_{name}.ids").read_bytes()


def test_single_fixture_matches_hand_built_stream():
    words = [V.word_to_id[w] for w in ("What", " is", " this")] + [V.byte_offset + ord("?")]
    expected = [V["<img>"]] + [V["<img_token>"]] * 144 + [V["</img>"], V["\n"]] + words
    stored = [int(t) for t in (FIXTURES / "template_single.ids").read_text().split()]
    assert stored == expected


def test_special_tokens_unique():
    ids = [V[t] for t in SPECIAL_TOKENS]
    assert len(set(ids)) == len(ids)
    assert len(V) == 512


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=40))
def test_vocab_round_trip(text):
    assert V.decode(V.encode(text)) == text
    assert all(0 <= i < len(V) for i in V.encode(text))


def test_single_examples():
    empty = assemble_single(ImageSlot(0), "", V)
    assert empty.render(V) == [V.img_open] + [V.img_token] * 144 + [V.img_close, V.newline]
    txt = "What is this?"
    assert len(assemble_single(ImageSlot(0), txt, V)) == 144 + 2 + 1 + len(V.encode(txt)) == single_length(4)


def test_multi_examples():
    one = assemble_multi([ImageSlot(0)], ["hello"], V)
    assert one == assemble_single(ImageSlot(0), "hello", V)
    for n in range(1, 6):
        assert len(assemble_multi([ImageSlot(i) for i in range(n)], None, V)) == n * 147
    with pytest.raises(ProtocolError):
        assemble_multi([ImageSlot(0)], ["a", "b", "c"], V)


@pytest.mark.parametrize("n", [1, 2, 3, 8])
def test_video_separators_and_length(n):
    seq = assemble_video([ImageSlot(i) for i in range(n)], "What are they?", V)
    ids = seq.render(V)
    assert ids.count(V.frame_sep) == n - 1
    assert ids[0] == V.vid_open and V.vid_close in ids
    assert len(ids) == video_length(n, 4) == 2 + n * 146 + (n - 1) + 1 + 4


def test_video_needs_frames():
    with pytest.raises(ProtocolError):
        assemble_video([], "", V)


def test_patched_examples():
    subs = [ImageSlot(i) for i in range(1, 7)]
    seq = assemble_patched(ImageSlot(0), subs, [3, 6], "What are they?", V)
    ids = seq.render(V)
    assert ids.count(V.newline) == 3  # after main, and after each of the two rows
    assert len(ids) == patched_length(6, 2, 4)
    one = assemble_patched(ImageSlot(0), [ImageSlot(1)], [1], "q", V)
    assert [type(s).__name__ for s in one.segments] == ["ImageSlot", "Text", "ImageSlot", "Text"]
    with pytest.raises(ProtocolError):
        assemble_patched(ImageSlot(0), subs, [3, 5], "", V)


def _random_sequence(rng: random.Random) -> MultimodalSequence:
    kind = rng.choice(["single", "multi", "video", "patched"])
    slot = rng.choice([1, 4, 144])
    text = rng.choice(["", "What is this?", "a red circle", "This is a:"])
    if kind == "single":
        return assemble_single(ImageSlot(0, slot), text, V)
    if kind == "multi":
        n = rng.randint(1, 4)
        return assemble_multi([ImageSlot(i, slot) for i in range(n)], [text] * n, V)
    if kind == "video":
        return assemble_video([ImageSlot(i, slot) for i in range(rng.randint(1, 6))], text, V)
    rows, cols = rng.randint(1, 3), rng.randint(1, 3)
    subs = [ImageSlot(i + 1, slot) for i in range(rows * cols)]
    return assemble_patched(ImageSlot(0, slot), subs, [cols * (r + 1) for r in range(rows)], text, V)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_brackets_and_parse_round_trip(seed):
    seq = _random_sequence(random.Random(seed))
    ids = seq.render(V)
    assert brackets_balanced(ids, V)
    back = parse_stream(ids, V)
    assert back.render(V) == ids
    assert [s.length for s in back.image_slots] == [s.length for s in seq.image_slots]
    assert [s.index for s in back.image_slots] == list(range(seq.n_images))


def test_brackets_detect_errors():
    assert not brackets_balanced([V.img_open, V.img_open, V.img_close, V.img_close], V)
    assert not brackets_balanced([V.img_token], V)
    assert not brackets_balanced([V.vid_open, V.img_open, V.vid_close, V.img_close], V)
    with pytest.raises(ProtocolError):
        parse_stream([V.img_open, V.img_token], V)


def test_pack_examples():
    seqs = [[1] * 10, [2] * 10]
    batches = pack(seqs, 25)
    assert len(batches) == 1 and batches[0].length == 21
    rendered = batches[0].render(seqs, V)
    assert rendered == [1] * 10 + [V.eos] + [2] * 10
    alone = pack([[3] * 25, [4] * 3], 25)
    assert [b.length for b in alone] == [25, 3]
    assert alone[0].render([[3] * 25, [4] * 3], V)[-1] == 3
    with pytest.raises(PackingError, match="sequence 1"):
        pack([[1], [1] * 30], 25)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=60), st.integers(300, 1000))
def test_packing_conserves_tokens(lengths, L):
    batches = plan_packing(lengths, L)
    members = sorted(i for b in batches for i in b.members)
    assert members == list(range(len(lengths)))
    for b in batches:
        assert b.members == sorted(b.members)
        assert b.length == sum(lengths[i] for i in b.members) + len(b.members) - 1 <= L
    seps = sum(len(b.members) - 1 for b in batches)
    assert sum(b.length for b in batches) == sum(lengths) + seps


def test_packing_never_splits_image_slots():
    rng = random.Random(3)
    seqs = [_random_sequence(rng) for _ in range(40)]
    L = max(len(s) for s in seqs) + 50
    for b in pack(seqs, L):
        stream = b.render(seqs, V)
        assert len(stream) == b.length
        assert brackets_balanced(stream, V)
        pieces, cur = [], []
        for t in stream:
            if t == V.eos:
                pieces.append(cur)
                cur = []
            else:
                cur.append(t)
        pieces.append(cur)
        assert pieces == [seqs[i].render(V) for i in b.members]


def test_full_scale_packing_arithmetic():
    # lengths of single images, 8-frame videos and patched images at 144 tokens per image
    rng = random.Random(0)
    lengths = [rng.choice([single_length(rng.randint(5, 60)), video_length(8, rng.randint(5, 40)),
                           patched_length(6, 2, rng.randint(5, 40))]) for _ in range(20_000)]
    batches = plan_packing(lengths, FULL_SCALE_PACK_LENGTH)
    assert sum(b.length for b in batches) == sum(lengths) + len(lengths) - len(batches)
    assert all(b.length <= FULL_SCALE_PACK_LENGTH for b in batches)
    assert len(batches) >= -(-(sum(lengths) + len(lengths) - 1) // (FULL_SCALE_PACK_LENGTH + 1))


def test_record_io_and_sequence(tmp_path):
    recs = [Record("single", [{"k": 1}], question="What is this?", answer="red"),
            Record("text", question="hello", answer="world")]
    write_records(recs, tmp_path / "r.jsonl")
    back = read_records(tmp_path / "r.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]
    seq = record_to_sequence(back[0], V, 36)
    assert seq.n_images == 1 and seq.image_slots[0].length == 36
    assert sum(seq.target_mask()) == 1
    assert seq.prompt() == record_to_sequence(back[0], V, 36, with_answer=False)
    with pytest.raises(ProtocolError):
        Record("audio")


def test_text_segments_merge():
    seq = MultimodalSequence((Text((1,)), Text((2,)), Text(()), ImageSlot(0, 1)))
    assert seq.segments == (Text((1, 2)), ImageSlot(0, 1))
