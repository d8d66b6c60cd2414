import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from longllava.tensor import CHECK_DTYPE, Rng, ShapeError, gradcheck
from longllava.vision import (
    EncoderConfig,
    Image,
    PatchGrid,
    Projector,
    VisionEncoder,
    encode,
    image_features,
    pool1d,
    pool2d,
    project,
    read_raster,
    segment_image,
    upsample,
    write_raster,
)


def rand_image(seed, h=96, w=96):
    return Image(np.random.default_rng(seed).random((h, w, 3), dtype=np.float32))


def rand_grid(seed, side=24, d=8, dtype=torch.float32):
    return PatchGrid(Rng(seed, "grid").normal((side * side, d), dtype=dtype), side)


@pytest.fixture(scope="module")
def encoder():
    return VisionEncoder(EncoderConfig(d_vision=16, n_layers=1, n_heads=2))


def test_token_counts_at_defaults(encoder):
    grid = encode(rand_image(0), encoder)
    assert grid.n_tokens == 576 and grid.side == 24
    pooled = pool2d(grid, 2)
    assert pooled.n_tokens == 144 and pooled.as_map().shape[:2] == (12, 12)
    assert pool1d(grid, 4).shape[0] == 144
    assert image_features(rand_image(0), encoder).shape == (144, 16)


def test_encode_deterministic(encoder):
    img = rand_image(1)
    assert torch.equal(encode(img, encoder).tokens, encode(Image(img.pixels.copy()), encoder).tokens)
    again = VisionEncoder(EncoderConfig(d_vision=16, n_layers=1, n_heads=2))
    assert torch.equal(encode(img, again).tokens, encode(img, encoder).tokens)


def test_constant_image_patch_embeddings_identical(encoder):
    e = encoder.embed_patches(Image.constant(96, 96, (0.2, 0.7, 0.4)))
    assert torch.equal(e, e[:1].expand_as(e))


def test_encode_rejects_wrong_size(encoder):
    with pytest.raises(ShapeError):
        encode(rand_image(0, 64, 64), encoder)


def test_pool2d_examples():
    const = PatchGrid(torch.full((16, 3), 2.5), 4)
    assert torch.equal(pool2d(const).tokens, torch.full((4, 3), 2.5))
    a, b, c, d = (torch.tensor([float(i), 10.0 * i]) for i in range(1, 5))
    single = pool2d(PatchGrid(torch.stack([a, b, c, d]), 2))
    torch.testing.assert_close(single.tokens[0], (a + b + c + d) / 4)
    with pytest.raises(ShapeError):
        pool2d(PatchGrid(torch.zeros(9, 2), 3), 2)


def test_pool1d_examples():
    const = PatchGrid(torch.full((576, 2), -1.0), 24)
    assert torch.equal(pool1d(const), torch.full((144, 2), -1.0))


def test_pool2d_and_pool1d_differ_on_blocky_grid():
    # every 2x2 block constant, neighbouring blocks different
    side = 4
    block_vals = torch.arange(4.0).reshape(2, 2)
    m = block_vals.repeat_interleave(2, 0).repeat_interleave(2, 1)
    grid = PatchGrid(m.reshape(-1, 1), side)
    p2 = pool2d(grid).tokens.flatten()
    p1 = pool1d(grid).flatten()
    assert torch.equal(p2, torch.tensor([0.0, 1.0, 2.0, 3.0]))
    assert not torch.equal(p1, p2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_pool_up_pool_idempotent(seed, side_half):
    grid = rand_grid(seed, 2 * side_half, 3, CHECK_DTYPE)
    once = pool2d(grid)
    torch.testing.assert_close(pool2d(upsample(once)).tokens, once.tokens, atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_pool2d_commutes_with_channel_affine(seed):
    rng = Rng(seed, "affine")
    grid = rand_grid(seed, 8, 4, CHECK_DTYPE)
    scale, shift = rng.normal((4,), dtype=CHECK_DTYPE), rng.normal((4,), dtype=CHECK_DTYPE)
    lhs = pool2d(PatchGrid(grid.tokens * scale + shift, 8)).tokens
    rhs = pool2d(grid).tokens * scale + shift
    torch.testing.assert_close(lhs, rhs, atol=1e-12, rtol=0)


def test_project_zero_and_permutation():
    proj = Projector(8, 6, seed=1)
    for lin in (proj.fc1, proj.fc2):
        torch.nn.init.zeros_(lin.bias)
    assert torch.equal(project(torch.zeros(3, 8), proj), torch.zeros(3, 6))
    x = Rng(2).normal((5, 8))
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(project(x[perm], proj), project(x, proj)[perm], atol=0, rtol=0)
    with pytest.raises(ShapeError):
        project(torch.zeros(2, 7), proj)


def test_project_gradcheck():
    proj = Projector(4, 3, d_hidden=5, seed=0, dtype=CHECK_DTYPE)
    x = Rng(3).normal((6, 4), dtype=CHECK_DTYPE)
    x.requires_grad_(True)
    w = Rng(4).normal((6, 3), dtype=CHECK_DTYPE)
    params = [x] + list(proj.parameters())
    assert gradcheck(lambda: (project(x, proj) * w).sum(), params) <= 1e-4


def test_segment_examples():
    one = segment_image(rand_image(0, 32, 32), 32)
    assert len(one.subimages) == 1 and (one.n_rows, one.n_cols) == (1, 1)
    six = segment_image(rand_image(1, 64, 96), 32)
    assert len(six.subimages) == 6 and (six.n_rows, six.n_cols) == (2, 3)
    assert six.row_splits == [3, 6]
    assert six.main.height == six.main.width == 32


@pytest.mark.parametrize("h,w,tile", [(96, 96, 96), (96, 72, 24), (100, 70, 32), (768 // 8, 1024 // 8, 336 // 8)])
def test_segment_count_is_ceil_product(h, w, tile):
    seg = segment_image(rand_image(0, h, w), tile)
    assert len(seg.subimages) == math.ceil(h / tile) * math.ceil(w / tile)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(3, 16), st.integers(0, 1000))
def test_segment_partitions_padded_canvas(h, w, tile, seed):
    img = rand_image(seed, h, w)
    seg = segment_image(img, tile)
    rows = [np.concatenate([s.pixels for s in seg.subimages[r * seg.n_cols:(r + 1) * seg.n_cols]], axis=1)
            for r in range(seg.n_rows)]
    canvas = np.concatenate(rows, axis=0)
    assert canvas.shape == (seg.n_rows * tile, seg.n_cols * tile, 3)
    np.testing.assert_array_equal(canvas[:h, :w], img.pixels)
    assert not canvas[h:].any() and not canvas[:, w:].any()


def test_raster_round_trip(tmp_path):
    img = rand_image(5, 7, 9)
    p = tmp_path / "x.llr"
    write_raster(img, p)
    back = read_raster(p)
    np.testing.assert_array_equal(back.pixels, img.pixels)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_raster(p)
