"""Regenerate the golden token streams for the four prompt templates.

Writes tests/fixtures/template_<name>.ids (space-separated ids, one line)
and a readable template_<name>.txt next to it. Only rerun this when the
rendering convention changes on purpose; the protocol tests compare the
stored files byte for byte.
"""

import argparse
from pathlib import Path

from longllava.protocol import (
    ImageSlot,
    Vocabulary,
    assemble_multi,
    assemble_patched,
    assemble_single,
    assemble_video,
)


def templates(vocab: Vocabulary, slot: int = 144) -> dict:
    s = lambda i: ImageSlot(i, slot)  # noqa: E731
    return {
        "single": assemble_single(s(0), "What is this?", vocab),
        "multi": assemble_multi([s(0), s(1)], ["This is a cat. ", "This is a:"], vocab),
        "video": assemble_video([s(0), s(1), s(2)], "What are they?", vocab),
        "patched": assemble_patched(s(0), [s(i) for i in range(1, 7)], [3, 6], "What are they?", vocab),
    }


def serialize(ids: list[int]) -> bytes:
    return (" ".join(map(str, ids)) + "\n").encode("ascii")


def readable(ids: list[int], vocab: Vocabulary) -> str:
    out, run = [], 0
    for i in ids + [-1]:
        if i == vocab.img_token:
            run += 1
            continue
        if run:
            out.append(f"<img_token>x{run}")
            run = 0
        if i >= 0:
            out.append(repr(vocab.decode([i])))
    return " ".join(out) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    for name, seq in templates(vocab).items():
        ids = seq.render(vocab)
        (out / f"template_{name}.ids").write_bytes(serialize(ids))
        (out / f"template_{name}.txt").write_text(readable(ids, vocab))
        print(name, len(ids))


if __name__ == "__main__":
    main()
