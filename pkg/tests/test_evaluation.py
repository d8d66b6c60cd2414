import math
import random
from fractions import Fraction

import pytest

from longllava.evaluation import (
    YES_NO,
    EvalInstance,
    ExhaustiveRunner,
    NIAHSpec,
    OracleRunner,
    RandomRunner,
    binomial_sigma,
    gen_icl_matching,
    gen_niah,
    icl_generator,
    icl_grid,
    needle_color_of,
    needle_video,
    niah_grid,
    score_grid,
    sweep_frames,
    uniform_sample,
)
from longllava.protocol import Vocabulary
from longllava.synth import NEEDLE_COLORS, needle_index, relation_holds

SIDE = 16  # eval generators only emit specs; rendering is never needed here


def oracle_index(n: int, depth: float) -> int:
    # exact rational half-up rounding of depth * (n - 1), depth read as the decimal it prints as
    x = Fraction(repr(depth)) * (n - 1)
    return math.floor(x + Fraction(1, 2))


def test_niah_examples():
    one = gen_niah(NIAHSpec(1, 0.0, 2, image_size=SIDE))
    assert one.record.meta["needle_index"] == 0
    assert needle_color_of(one.record.images) == NEEDLE_COLORS[2] == one.answer
    last = gen_niah(NIAHSpec(9, 1.0, image_size=SIDE))
    assert last.record.meta["needle_index"] == 8
    with pytest.raises(ValueError):
        NIAHSpec(0)
    with pytest.raises(ValueError):
        NIAHSpec(4, 1.5)


def test_needle_formula_exhaustive_small_n():
    depths = sorted({i / 100 for i in range(101)} | {i / 7 for i in range(8)} | {1 / 3, 2 / 3})
    for n in range(1, 65):
        for d in depths:
            assert needle_index(n, d) == oracle_index(n, d), (n, d)
        for k in range(n):
            # every grid point k / (n - 1) lands on index k
            d = k / (n - 1) if n > 1 else 0.0
            assert needle_index(n, d) == k


def test_needle_index_distribution_10k():
    rng = random.Random(0)
    for seed in range(10_000):
        n = rng.randint(1, 64)
        d = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, rng.random()])
        inst = gen_niah(NIAHSpec(n, d, rng.randrange(4), seed=seed, image_size=SIDE))
        idx = oracle_index(n, d)
        assert inst.record.meta["needle_index"] == idx
        colored = [i for i, f in enumerate(inst.record.images) if any(o["color"] != "gray" for o in f["objects"])]
        assert colored == [idx]


def test_niah_sequence_is_video():
    vocab = Vocabulary()
    inst = gen_niah(NIAHSpec(5, 0.5, image_size=SIDE))
    ids = inst.sequence(vocab, 4).render(vocab)
    assert ids.count(vocab.frame_sep) == 4 and ids[0] == vocab.vid_open


def test_oracle_perfect_on_all_grids():
    g = niah_grid(OracleRunner(), trials=5, image_size=SIDE)
    assert all(a == 1.0 for a in g.accuracies())
    g = icl_grid(OracleRunner(), trials=10, image_size=SIDE)
    assert g.axes["shots"] == [1, 2, 4, 5]
    assert all(a == 1.0 for a in g.accuracies())
    g = icl_grid(OracleRunner(), relation="same color", shots=(0, 1, 4), trials=10, image_size=SIDE)
    assert all(a == 1.0 for a in g.accuracies())
    g = sweep_frames(OracleRunner(), [1, 2, 8, 64], needle_video(64, image_size=SIDE), trials=10)
    assert all(a == 1.0 for a in g.accuracies())


def test_random_runner_within_three_sigma():
    trials = 400
    g = niah_grid(RandomRunner(1), haystacks=(2, 8), depths=(0.0, 1.0), trials=trials, image_size=SIDE)
    for a in g.accuracies():
        assert abs(a - 0.25) <= 3 * binomial_sigma(0.25, trials)
    g = icl_grid(RandomRunner(2), shots=(0, 4), trials=trials, image_size=SIDE)
    for a in g.accuracies():
        assert abs(a - 0.5) <= 3 * binomial_sigma(0.5, trials)


def test_score_grid_deterministic_and_marks_failures():
    gen = icl_generator(image_size=SIDE)
    a = score_grid(RandomRunner(5), gen, {"shots": [0, 2]}, 20, seed=3)
    b = score_grid(RandomRunner(5), gen, {"shots": [0, 2]}, 20, seed=3)
    assert a.rows() == b.rows()

    def flaky(inst: EvalInstance) -> str:
        if len(inst.record.images) > 2:
            raise RuntimeError("too many images")
        return inst.answer

    g = score_grid(flaky, gen, {"shots": [0, 2]}, 5, seed=0)
    assert g.cell(shots=0).accuracy == 1.0
    bad = g.cell(shots=2)
    assert not bad.valid and math.isnan(bad.accuracy) and "too many images" in bad.error


def test_icl_examples():
    zero = gen_icl_matching("same shape", 0, 4, SIDE)
    assert zero.k == 0 and len(zero.to_record().images) == 2
    inst = gen_icl_matching("same color", 3, 1, SIDE)
    assert inst.label == relation_holds("same color", *inst.query)
    ev = inst.to_eval()
    assert ev.labels == YES_NO and OracleRunner()(ev) == ev.answer
    # the relation never appears in the rendered text
    assert "shape" not in " ".join(ev.record.texts) + ev.record.question
    assert "color" not in " ".join(ev.record.texts) + ev.record.question


def test_icl_query_shared_across_shots():
    for seed in range(20):
        q = [gen_icl_matching("same shape", k, seed, SIDE).query for k in (0, 1, 4)]
        assert q[0] == q[1] == q[2]


def test_icl_support_label_balance():
    yes = total = 0
    for seed in range(1000):
        inst = gen_icl_matching("same shape", 4, seed, SIDE)
        labels = [lab for _, _, lab in inst.supports]
        assert sum(labels) == 2
        for a, b, lab in inst.supports:
            assert relation_holds("same shape", a, b) == lab
        yes += sum(labels)
        total += len(labels)
    assert Fraction(yes, total) == Fraction(1, 2)


def test_uniform_sample():
    assert uniform_sample(64, 8) == list(range(0, 64, 8))
    assert uniform_sample(10, 20) == list(range(10))
    assert uniform_sample(10, 3) == [0, 3, 6]


def test_exhaustive_runner_complete_at_full_length():
    g = sweep_frames(ExhaustiveRunner(0), [64], needle_video(64, image_size=SIDE), trials=50)
    assert g.accuracies() == [1.0]


def test_frame_sweep_threshold_step():
    counts = [1, 2, 4, 8, 16, 32, 64]
    trials = 300
    g = sweep_frames(ExhaustiveRunner(0), counts, needle_video(64, needle_at=8, image_size=SIDE), trials=trials)
    _, acc = g.series("frames")
    for c, a in zip(counts, acc):
        if c >= 8:
            assert a == 1.0, c
        else:
            assert abs(a - 0.25) <= 3 * binomial_sigma(0.25, trials), c


def test_frame_sweep_rejects_unsorted():
    with pytest.raises(ValueError):
        sweep_frames(OracleRunner(), [8, 4])


def test_grid_outputs(tmp_path):
    g = niah_grid(OracleRunner(), haystacks=(2,), depths=(0.0, 1.0), trials=2, image_size=SIDE)
    g.write_csv(tmp_path / "g.csv")
    g.write_heatmap(tmp_path / "g.dat", "haystack", "depth")
    assert (tmp_path / "g.csv").read_text().splitlines()[0].startswith("haystack,depth,accuracy")
    assert (tmp_path / "g.dat").read_text().splitlines()[1:] == ["2 0.0 1.0", "2 1.0 1.0"]
