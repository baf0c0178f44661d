import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiendmae.decoder import DecoderConfig
from hiendmae.diagnostics import (MAC_CONVENTION, SpectrumReport, attention_map, bench_decoder, count_macs,
                                  cross_block_macs, effective_rank, macs_table, read_pgm, self_block_macs,
                                  singular_values, spectrum_sweep, write_attention_csv, write_attention_pgms,
                                  write_rows_csv, write_spectra_csv)
from hiendmae.encoder import EncoderConfig
from hiendmae.errors import IndexOutOfRange, NonFinite, ZeroMatrix
from hiendmae.model import MaskedAutoencoder
from hiendmae.volume_io import Volume

FULL_ENC = EncoderConfig(patch_size=12, embed_dim=1536, depth=12, heads=16, tap_layers=(3, 6, 9))
FULL_DEC = DecoderConfig(dec_dim=528, heads=16, n_self=2, n_cross=3)


def _power_iteration_eigs(s: np.ndarray, iters: int = 5000) -> list[float]:
    """Eigenvalues of a symmetric PSD matrix by power iteration with Hotelling deflation."""
    s = s.copy()
    out = []
    rng = np.random.default_rng(0)
    for _ in range(s.shape[0]):
        v = rng.normal(size=s.shape[0])
        lam = 0.0
        for _ in range(iters):
            w = s @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
            new = float(v @ s @ v)
            if abs(new - lam) <= 1e-15 * max(abs(new), 1.0):
                lam = new
                break
            lam = new
        out.append(lam)
        s = s - lam * np.outer(v, v)
    return sorted(out, reverse=True)


def test_svd_diag():
    assert singular_values(np.diag([3.0, 1.0])).tolist() == [3.0, 1.0]


def test_svd_orthogonal():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    assert np.allclose(singular_values(q), 1.0, atol=1e-12)


def test_svd_against_power_iteration_oracle():
    a = np.random.default_rng(42).normal(size=(5, 4))
    sigma = singular_values(a)
    eigs = _power_iteration_eigs(a.T @ a)
    assert np.allclose(sigma**2, eigs, rtol=0, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_svd_matches_lapack(m, n, seed):
    a = np.random.default_rng(seed).normal(size=(m, n))
    ref = np.linalg.svd(a, compute_uv=False)
    got = singular_values(a)
    assert got.shape == (min(m, n),)
    assert np.allclose(got, ref, rtol=1e-9, atol=1e-12 * ref[0])
    assert np.all(np.diff(got) <= 0)


def test_svd_small_values_zeroed():
    a = np.outer(np.arange(1.0, 5.0), np.arange(1.0, 4.0))
    s = singular_values(a)
    assert s[0] > 0 and np.all(s[1:] == 0.0)


def test_svd_non_finite():
    with pytest.raises(NonFinite):
        singular_values(np.array([[1.0, np.nan]]))


def test_effective_rank_rank_one():
    assert effective_rank(np.outer([1.0, 2.0, 3.0], [4.0, 5.0])) == 0.0


@pytest.mark.parametrize("k", [1, 2, 3, 5, 8])
def test_effective_rank_equal_values(k):
    assert effective_rank(np.eye(k) * 2.5) == pytest.approx(math.log(k), abs=1e-9)


def test_effective_rank_two_point():
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert expected == pytest.approx(0.562335, abs=1e-6)
    assert effective_rank(np.diag([3.0, 1.0])) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.booleans())
def test_effective_rank_scale_invariant_and_bounded(seed, c, negate):
    a = np.random.default_rng(seed).normal(size=(7, 4))
    c = -c if negate else c
    rho = effective_rank(a)
    assert abs(effective_rank(c * a) - rho) <= 1e-9
    assert 0.0 <= rho <= math.log(4) + 1e-12


def test_effective_rank_zero_matrix():
    with pytest.raises(ZeroMatrix):
        effective_rank(np.zeros((3, 3)))


def test_spectrum_report_normalised():
    r = SpectrumReport.of(1, np.random.default_rng(0).normal(size=(6, 4)))
    assert abs(r.sigma_norm.sum() - 1.0) <= 1e-9
    assert 0 <= r.effective_rank <= math.log(4)


SMALL_ENC = EncoderConfig(patch_size=4, embed_dim=24, depth=3, heads=2, tap_layers=(1, 2, 3))
SMALL_DEC = DecoderConfig(dec_dim=12, heads=2, n_self=1, n_cross=3)


def _model():
    return MaskedAutoencoder(SMALL_ENC, SMALL_DEC, seed=0)


def _probe(seed=0, dims=(8, 8, 12)):
    return Volume(np.random.default_rng(seed).random(dims))


@pytest.mark.parametrize("mask_ratio", [0.0, 0.5])
def test_spectrum_sweep_counts_and_bounds(tmp_path, mask_ratio):
    rows = spectrum_sweep(_model(), [_probe(0), _probe(1)], mask_ratio=mask_ratio)
    assert len(rows) == 2 * SMALL_ENC.depth
    m = 12 - int(mask_ratio * 12)
    for vol, r in rows:
        assert r.shape == (m, SMALL_ENC.embed_dim)
        assert 0.0 <= r.effective_rank <= math.log(min(r.shape)) + 1e-12
    write_spectra_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("volume,layer,rows,cols,effective_rank")
    assert len(lines) == 1 + len(rows)


def test_attention_map_normalised_and_grid_shaped(tmp_path):
    model = _model()
    for layer in range(1, SMALL_ENC.depth + 1):
        amap, grid = attention_map(model, _probe(), query=5, layer=layer)
        assert amap.shape == (2, 2, 3) == grid.grid
        assert abs(amap.sum() - 1.0) <= 1e-5
    write_attention_csv(amap, tmp_path / "a.csv")
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 13


def test_head_mean_is_mean_of_heads():
    model = _model()
    heads = [attention_map(model, _probe(), 3, 2, head=h)[0] for h in range(SMALL_ENC.heads)]
    mean, _ = attention_map(model, _probe(), 3, 2)
    assert np.allclose(mean, np.mean(heads, axis=0), atol=1e-12)


def test_single_token_map_is_one():
    amap, _ = attention_map(_model(), _probe(dims=(4, 4, 4)), 0, 1)
    assert amap.shape == (1, 1, 1) and amap[0, 0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("kw", [dict(query=12, layer=1), dict(query=0, layer=0), dict(query=0, layer=4),
                                dict(query=0, layer=1, head=2)])
def test_attention_map_index_errors(kw):
    with pytest.raises(IndexOutOfRange):
        attention_map(_model(), _probe(), **kw)


def test_pgm_slices(tmp_path):
    amap, _ = attention_map(_model(), _probe(), 0, 1)
    paths = write_attention_pgms(amap, tmp_path / "attn", 1)
    assert [p.name for p in paths] == [f"attn_layer1_slice{k}.pgm" for k in range(2)]
    imgs = np.stack([read_pgm(p) for p in paths]).astype(np.float64)
    assert imgs.shape == amap.shape and imgs.max() == 255
    # undoing the max-scaling recovers a probability row up to 8-bit quantisation
    recovered = imgs / 255.0 * amap.max()
    assert abs(recovered.sum() - 1.0) <= amap.size * 0.5 / 255.0 * amap.max()


# ---------------------------------------------------------------- MAC model


def test_cross_similarity_example():
    r = count_macs(FULL_ENC, FULL_DEC, 512, 0.75)
    assert r.n_visible == 128
    assert r.cross_similarity == 512 * 128 * 528 == 34_603_008


@pytest.mark.parametrize("gamma,ratio", [(0.5, Fraction(1, 2)), (0.75, Fraction(1, 4))])
def test_similarity_ratio_exact(gamma, ratio):
    r = count_macs(FULL_ENC, FULL_DEC, 512, gamma)
    r0 = count_macs(FULL_ENC, FULL_DEC, 512, 0.0)
    assert r.similarity_ratio == ratio == 1 - Fraction(gamma)
    assert Fraction(r.cross_similarity, r0.cross_similarity) == ratio


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2048), st.data(), st.integers(1, 1024), st.sampled_from([1.0, 2.0, 4.0]))
def test_self_minus_cross_closed_form(n, data, d, ratio):
    m = data.draw(st.integers(1, n))
    diff = self_block_macs(n, d, ratio).total - cross_block_macs(n, m, d, ratio).total
    assert diff == 2 * d * (n - m) * (d + n)
    assert (diff > 0) == (m < n)


def test_formula_terms():
    n, m, d = 10, 4, 6
    s = self_block_macs(n, d, 4.0)
    assert s.total == 4 * n * d * d + 2 * n * n * d + 2 * 4 * n * d * d
    c = cross_block_macs(n, m, d, 4.0)
    assert c.total == 2 * n * d * d + 2 * m * d * d + 2 * n * m * d + 2 * 4 * n * d * d
    assert cross_block_macs(n, m, d, 4.0, kv_dim=9).projections == 2 * n * d * d + 2 * m * 9 * d


def test_gamma_zero_same_per_block_counts_at_equal_width():
    enc = EncoderConfig(patch_size=4, embed_dim=48, depth=2, heads=2, tap_layers=(1, 2))
    dec = DecoderConfig(dec_dim=48, heads=2, n_self=1, n_cross=2)
    r = count_macs(enc, dec, 64, 0.0)
    assert [b.total for b in r.decoder_blocks] == [b.total for b in r.baseline_blocks]
    assert r.decoder_total == r.baseline_total


def test_baseline_exceeds_dense_when_masked():
    enc = EncoderConfig(patch_size=4, embed_dim=48, depth=2, heads=2, tap_layers=(1, 2))
    dec = DecoderConfig(dec_dim=48, heads=2, n_self=1, n_cross=2)
    for gamma in (0.25, 0.5, 0.9):
        r = count_macs(enc, dec, 64, gamma)
        assert r.baseline_total > r.decoder_total


def test_full_widths_monotone_in_cross_stages():
    totals = []
    for b in range(4):
        dec = DecoderConfig(dec_dim=528, heads=16, n_self=5 - b, n_cross=b)
        totals.append(count_macs(FULL_ENC, dec, 512, 0.75).decoder_total)
    assert all(x > y for x, y in zip(totals, totals[1:]))


def test_encoder_cost_depends_on_visible_count():
    costs = [count_macs(FULL_ENC, FULL_DEC, 512, g).encoder_total for g in (0.0, 0.25, 0.5, 0.75)]
    assert all(x > y for x, y in zip(costs, costs[1:]))


def test_totals_are_sums_of_parts():
    r = count_macs(FULL_ENC, FULL_DEC, 512, 0.75)
    for b in r.decoder_blocks + r.encoder_blocks:
        assert b.total == b.projections + b.logits + b.attn_value + b.ffn
        assert isinstance(b.total, int)
    assert r.decoder_total == r.decoder_input + r.head + sum(b.total for b in r.decoder_blocks)


def test_macs_table_rows(tmp_path):
    rows = macs_table([count_macs(FULL_ENC, FULL_DEC, 512, g) for g in (0.75, 0.0)])
    assert rows[0]["similarity_ratio"] == "1/4" and rows[0]["ratio_vs_gamma0"] == "1/4"
    write_rows_csv(rows, tmp_path / "f.csv", comment=MAC_CONVENTION)
    text = (tmp_path / "f.csv").read_text().splitlines()
    assert text[0] == f"# {MAC_CONVENTION}" and text[1].startswith("gamma,N,M")


def test_bench_rows():
    enc = EncoderConfig(patch_size=2, embed_dim=12, depth=2, heads=2, tap_layers=(1, 2))
    dec = DecoderConfig(dec_dim=12, heads=2, n_self=1, n_cross=2)
    rows = bench_decoder(enc, dec, (2, 2, 4), [0.5, 0.75], reps=3, warmup=1)
    assert [(r["variant"], r["gamma"]) for r in rows] == [
        ("mae_baseline", 0.5), ("hiend", 0.5), ("mae_baseline", 0.75), ("hiend", 0.75)]
    assert all(r["threads"] == 1 and r["reps"] == 3 and r["median_s"] > 0 for r in rows)
    assert rows[3]["M"] == 4 and rows[3]["N"] == 16
