import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiendmae.errors import BadDim, BadRatio, IndexOutOfRange, IndivisibleDims, ShapeMismatch
from hiendmae.tokenizer import (MaskPlan, PatchGrid, gather_visible, n_visible, patchify, pos_embed_3d,
                                sample_mask, scatter_full, unpatchify)
from hiendmae.volume_io import Volume


@pytest.mark.parametrize("patch,n", [(12, 512), (16, 216)])
def test_token_counts_at_96(patch, n):
    tokens, grid = patchify(Volume(np.zeros((96, 96, 96), np.float32)), patch)
    assert tokens.shape == (n, patch**3)
    assert grid.n_tokens == n


def test_constant_volume_gives_identical_rows():
    tokens, _ = patchify(Volume(np.full((8, 8, 8), 0.3)), 4)
    assert np.all(tokens == tokens[0])


def test_indivisible():
    with pytest.raises(IndivisibleDims):
        patchify(Volume(np.zeros((8, 8, 9))), 4)


def test_patch_order_row_major():
    data = np.arange(4 * 4 * 4, dtype=np.float32).reshape(4, 4, 4)
    tokens, grid = patchify(Volume(data), 2)
    assert grid.grid == (2, 2, 2)
    # token 1 is grid cell (0, 0, 1); its first voxel is data[0, 0, 2]
    assert tokens[1, 0] == data[0, 0, 2]
    # within a patch, w is fastest
    assert tokens[0].tolist() == data[:2, :2, :2].ravel().tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.tuples(*[st.integers(1, 3)] * 3), st.integers(0, 1000))
def test_unpatchify_inverts_patchify(p, g, seed):
    dims = tuple(p * x for x in g)
    v = Volume(np.random.default_rng(seed).random(dims))
    tokens, grid = patchify(v, p)
    assert unpatchify(tokens, grid, v.spacing_mm) == v


def test_unpatchify_zero_and_single_token():
    grid = PatchGrid(2, (1, 1, 1))
    assert np.all(unpatchify(np.zeros((1, 8)), grid).data == 0)
    tok = np.arange(8, dtype=np.float32)[None]
    assert np.array_equal(unpatchify(tok, grid).data, tok.reshape(2, 2, 2))


def test_unpatchify_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        unpatchify(np.zeros((3, 8)), PatchGrid(2, (1, 1, 2)))


def test_mask_counts_full_scale_setting():
    plan = sample_mask(512, 0.75, np.random.default_rng(0))
    assert plan.n_visible == 128 and plan.masked_idx.size == 384


def test_mask_gamma_zero():
    plan = sample_mask(8, 0.0, np.random.default_rng(0))
    assert plan.visible_idx.tolist() == list(range(8)) and plan.masked_idx.size == 0


def test_mask_deterministic():
    assert sample_mask(64, 0.5, np.random.default_rng(3)) == sample_mask(64, 0.5, np.random.default_rng(3))


@pytest.mark.parametrize("gamma", [-0.1, 1.0, 1.5])
def test_bad_ratio(gamma):
    with pytest.raises(BadRatio):
        sample_mask(8, gamma, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.floats(0.0, 0.999), st.integers(0, 2**31 - 1))
def test_partition_property(n, gamma, seed):
    plan = sample_mask(n, gamma, np.random.default_rng(seed))
    vis, msk = plan.visible_idx, plan.masked_idx
    assert np.all(np.diff(vis) > 0) and np.all(np.diff(msk) > 0)
    assert np.array_equal(np.sort(np.concatenate([vis, msk])), np.arange(n))
    assert vis.size == n - int(np.floor(gamma * n)) >= 1


def test_mask_is_uniform_over_tokens():
    counts = np.zeros(16)
    rng = np.random.default_rng(0)
    for _ in range(4000):
        counts[sample_mask(16, 0.75, rng).visible_idx] += 1
    # each token is visible with probability 1/4: 1000 +- ~27 (1 sd)
    assert np.all(np.abs(counts - 1000) < 150)


def test_n_visible_floor():
    assert n_visible(10, 0.25) == 8
    assert n_visible(3, 0.99) == 1


def test_pos_embed_origin():
    table = pos_embed_3d(PatchGrid(2, (2, 2, 2)), 12)
    assert np.all(table[0, 0::2] == 0.0) and np.all(table[0, 1::2] == 1.0)


def test_pos_embed_axis_separability():
    grid = PatchGrid(2, (3, 3, 3))
    table = pos_embed_3d(grid, 18)
    a, b = 4, 5  # (0,1,1) and (0,1,2) differ only in w
    assert np.array_equal(table[a, :12], table[b, :12])
    assert not np.array_equal(table[a, 12:], table[b, 12:])


def test_pos_embed_frequencies():
    table = pos_embed_3d(PatchGrid(1, (1, 1, 3)), 12)
    # w block, k = 1: omega = 10000^(-2/4)
    assert table[2, 8 + 2] == pytest.approx(np.sin(2 * 10000 ** -0.5))
    assert table[2, 8 + 3] == pytest.approx(np.cos(2 * 10000 ** -0.5))


@pytest.mark.parametrize("grid,dim", [((4, 4, 4), 6), ((4, 4, 4), 96), ((6, 5, 7), 48), ((2, 3, 9), 12)])
def test_pos_embed_bounded_and_injective(grid, dim):
    table = pos_embed_3d(PatchGrid(1, grid), dim)
    assert np.all(np.abs(table) <= 1.0)
    for i, j in itertools.combinations(range(len(table)), 2):
        assert not np.array_equal(table[i], table[j])


@pytest.mark.parametrize("dim", [0, 4, 8, 13])
def test_pos_embed_bad_dim(dim):
    with pytest.raises(BadDim):
        pos_embed_3d(PatchGrid(1, (2, 2, 2)), dim)


def test_gather_identity_at_gamma_zero():
    t = np.random.default_rng(0).random((6, 3))
    assert np.array_equal(gather_visible(t, MaskPlan.full(6)), t)


def test_scatter_example():
    plan = MaskPlan.from_visible([0, 2], 4)
    out = scatter_full(np.array([[1], [3]]), np.array([9]), plan)
    assert out.tolist() == [[1], [9], [3], [9]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gather_then_scatter_keeps_visible(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((20, 4))
    plan = sample_mask(20, 0.6, rng)
    out = scatter_full(gather_visible(t, plan), np.full(4, -1.0), plan)
    assert np.array_equal(out[plan.visible_idx], t[plan.visible_idx])
    assert np.all(out[plan.masked_idx] == -1.0)


def test_gather_scatter_index_errors():
    plan = MaskPlan.from_visible([0, 2], 4)
    with pytest.raises(IndexOutOfRange):
        gather_visible(np.zeros((5, 1)), plan)
    with pytest.raises(IndexOutOfRange):
        scatter_full(np.zeros((3, 1)), np.zeros(1), plan)
    with pytest.raises(IndexOutOfRange):
        MaskPlan.from_visible([0, 4], 4)
