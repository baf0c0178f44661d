"""Representation and cost diagnostics.

* singular spectra and effective rank of per-layer value matrices
* query-token attention maps laid out on the patch grid
* an exact multiply-accumulate (MAC) model of encoder and decoders
* a single-threaded wall-clock benchmark of the two decoders

MAC convention: one multiply-add is one MAC; norms, softmax, activations,
residual adds and bias adds are not counted.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from hiendmae import autodiff as ad
from hiendmae.autodiff import Tensor
from hiendmae.decoder import BaselineDecoder, DecoderConfig, DenseDecoder
from hiendmae.encoder import EncoderConfig, EncoderTaps
from hiendmae.errors import IndexOutOfRange, NonFinite, ZeroMatrix
from hiendmae.model import MaskedAutoencoder
from hiendmae.tokenizer import MaskPlan, PatchGrid, n_visible, patchify, sample_mask
from hiendmae.volume_io import Volume

MAC_CONVENTION = "1 MAC = 1 multiply-add; norms, softmax, activations and additions uncounted"
SVD_TOL = 1e-10
SVD_ZERO = 1e-12


# ---------------------------------------------------------------- spectra


def _round_robin(n: int):
    """Pairings for one Jacobi sweep: n-1 rounds of disjoint column pairs (n even)."""
    players = list(range(n))
    for _ in range(n - 1):
        yield np.array(players[: n // 2]), np.array(players[n // 2:][::-1])
        players = [players[0], players[-1], *players[1:-1]]


def singular_values(a: np.ndarray, tol: float = SVD_TOL, max_sweeps: int = 60) -> np.ndarray:
    """Singular values, descending, by one-sided cyclic Jacobi.

    Rotations are chosen to diagonalise the Gram matrix of the narrower
    side (Hestenes' method), applied to the columns themselves so small
    singular values keep full relative accuracy. Iteration stops once
    every column pair is orthogonal to ``tol`` relative to its norms.
    Values below ``1e-12 * sigma_max`` are reported as exactly 0.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFinite("matrix has NaN or Inf entries")
    u = a if a.shape[0] >= a.shape[1] else a.T
    u = u.copy()
    k = u.shape[1]
    if k % 2:
        u = np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)
    n = u.shape[1]
    if n >= 2:
        for _ in range(max_sweeps):
            rotated = False
            for p, q in _round_robin(n):
                up, uq = u[:, p], u[:, q]
                alpha = (up * up).sum(axis=0)
                beta = (uq * uq).sum(axis=0)
                gamma = (up * uq).sum(axis=0)
                act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                act &= (alpha > 0) & (beta > 0)
                if not act.any():
                    continue
                rotated = True
                g = np.where(act, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(zeta == 0, 1.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(act, c, 1.0)
                s = np.where(act, s, 0.0)
                u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
            if not rotated:
                break
    sigma = np.sqrt((u * u).sum(axis=0))[:k]
    sigma = np.sort(sigma)[::-1]
    if sigma.size and sigma[0] > 0:
        sigma[sigma < SVD_ZERO * sigma[0]] = 0.0
    return sigma


def effective_rank(a: np.ndarray | None = None, *, sigma: np.ndarray | None = None) -> float:
    """Entropy (natural log) of the normalised singular values."""
    if sigma is None:
        sigma = singular_values(a)
    total = float(np.sum(sigma))
    if total <= 0:
        raise ZeroMatrix("effective rank is undefined for a zero matrix")
    p = sigma[sigma > 0] / total
    return float(-np.sum(p * np.log(p))) + 0.0  # no -0.0 for a single mass point


@dataclass
class SpectrumReport:
    layer: int
    sigma: np.ndarray
    sigma_norm: np.ndarray
    effective_rank: float
    shape: tuple[int, int]

    @classmethod
    def of(cls, layer: int, a: np.ndarray) -> "SpectrumReport":
        sigma = singular_values(a)
        total = sigma.sum()
        if total <= 0:
            raise ZeroMatrix(f"layer {layer}: value matrix is zero")
        return cls(layer, sigma, sigma / total, effective_rank(sigma=sigma), tuple(a.shape))


def layer_values(model: MaskedAutoencoder, volume: Volume, plan: MaskPlan | None = None) -> list[dict]:
    """Forward one volume through the encoder, returning per-block attention records."""
    tokens, grid = patchify(volume, model.patch_size)
    plan = plan or MaskPlan.full(grid.n_tokens)
    records: list[dict] = []
    with ad.no_grad():
        model.encode(tokens.astype(ad.get_dtype()), plan, grid, records)
    return records


def spectrum_sweep(model: MaskedAutoencoder, probes: Sequence[Volume], mask_ratio: float = 0.0,
                   seed: int = 0) -> list[tuple[int, SpectrumReport]]:
    """Spectrum of every encoder layer's value matrix (tokens x dim) for every probe."""
    rng = np.random.default_rng(seed)
    out = []
    for i, vol in enumerate(probes):
        _, grid = patchify(vol, model.patch_size)
        plan = sample_mask(grid.n_tokens, mask_ratio, rng)
        for layer, rec in enumerate(layer_values(model, vol, plan), start=1):
            out.append((i, SpectrumReport.of(layer, rec["values"])))
    return out


def write_spectra_csv(rows: list[tuple[int, SpectrumReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume", "layer", "rows", "cols", "effective_rank", "max_effective_rank", "singular_values"])
        for vol, r in rows:
            w.writerow([vol, r.layer, r.shape[0], r.shape[1], repr(r.effective_rank),
                        repr(math.log(min(r.shape))), " ".join(repr(float(s)) for s in r.sigma)])


# ---------------------------------------------------------------- attention maps


def attention_map(model: MaskedAutoencoder, volume: Volume, query: int, layer: int,
                  head: int | None = None) -> tuple[np.ndarray, PatchGrid]:
    """Attention of one query token over all tokens at an encoder layer (1-based).

    ``head=None`` averages the heads. All tokens are visible. Returns a
    (Gd, Gh, Gw) array that sums to one.
    """
    tokens, grid = patchify(volume, model.patch_size)
    if not 0 <= query < grid.n_tokens:
        raise IndexOutOfRange(f"query {query} outside [0, {grid.n_tokens})")
    if not 1 <= layer <= model.enc_cfg.depth:
        raise IndexOutOfRange(f"layer {layer} outside [1, {model.enc_cfg.depth}]")
    if head is not None and not 0 <= head < model.enc_cfg.heads:
        raise IndexOutOfRange(f"head {head} outside [0, {model.enc_cfg.heads})")
    records = layer_values(model, volume)
    attn = records[layer - 1]["attn"].astype(np.float64)
    row = attn[:, query, :].mean(axis=0) if head is None else attn[head, query, :]
    return row.reshape(grid.grid), grid


def write_attention_csv(amap: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "d", "h", "w", "probability"])
        for token, (idx, val) in enumerate(np.ndenumerate(amap)):
            w.writerow([token, *idx, repr(float(val))])


def write_pgm(img: np.ndarray, path) -> None:
    """8-bit binary PGM (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def write_attention_pgms(amap: np.ndarray, prefix, layer: int) -> list[Path]:
    """One image per depth slice, scaled so the map maximum is 255."""
    peak = float(amap.max())
    scaled = np.zeros_like(amap) if peak <= 0 else np.rint(amap / peak * 255.0)
    paths = []
    for k in range(amap.shape[0]):
        p = Path(f"{prefix}_layer{layer}_slice{k}.pgm")
        write_pgm(scaled[k], p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- MAC model


def _ffn_hidden(d: int, ratio: float) -> int:
    return int(round(d * ratio))


@dataclass(frozen=True)
class BlockMacs:
    kind: str
    n_query: int
    n_key: int
    projections: int
    logits: int
    attn_value: int
    ffn: int

    @property
    def total(self) -> int:
        return self.projections + self.logits + self.attn_value + self.ffn


def self_block_macs(n: int, d: int, ffn_ratio: float = 4.0) -> BlockMacs:
    return BlockMacs("self", n, n, 4 * n * d * d, n * n * d, n * n * d, 2 * n * d * _ffn_hidden(d, ffn_ratio))


def cross_block_macs(n: int, m: int, d: int, ffn_ratio: float = 4.0, kv_dim: int | None = None) -> BlockMacs:
    """Queries and output projection over N tokens, keys and values over M visible ones."""
    e = d if kv_dim is None else kv_dim
    return BlockMacs("cross", n, m, 2 * n * d * d + 2 * m * e * d, n * m * d, n * m * d,
                     2 * n * d * _ffn_hidden(d, ffn_ratio))


@dataclass
class MacReport:
    n_tokens: int
    n_visible: int
    gamma: float
    encoder_embed: int
    encoder_blocks: list[BlockMacs]
    decoder_input: int
    decoder_blocks: list[BlockMacs]
    baseline_blocks: list[BlockMacs]
    head: int
    dec_dim: int
    convention: str = MAC_CONVENTION

    @property
    def encoder_total(self) -> int:
        return self.encoder_embed + sum(b.total for b in self.encoder_blocks)

    @property
    def decoder_total(self) -> int:
        return self.decoder_input + sum(b.total for b in self.decoder_blocks) + self.head

    @property
    def baseline_total(self) -> int:
        return self.decoder_input + sum(b.total for b in self.baseline_blocks) + self.head

    @property
    def cross_similarity(self) -> int:
        """QK^T MACs of one cross stage (N x M)."""
        crosses = [b.logits for b in self.decoder_blocks if b.kind == "cross"]
        return crosses[0] if crosses else cross_similarity_macs(self.n_tokens, self.n_visible, self.dec_dim)

    @property
    def self_similarity(self) -> int:
        """QK^T MACs of one full self-attention block (N x N)."""
        return self.n_tokens * self.n_tokens * self.dec_dim

    @property
    def similarity_ratio(self) -> Fraction:
        return Fraction(self.cross_similarity, self.self_similarity)


def cross_similarity_macs(n: int, m: int, d: int) -> int:
    return n * m * d


def count_macs(enc: EncoderConfig, dec: DecoderConfig, n_tokens: int, gamma: float) -> MacReport:
    """Closed-form MAC counts; the encoder runs on M = N - floor(gamma N) tokens."""
    m = n_visible(n_tokens, gamma)
    e, d, p3 = enc.embed_dim, dec.dec_dim, enc.patch_size**3
    enc_blocks = [self_block_macs(m, e, enc.ffn_ratio) for _ in range(enc.depth)]
    dec_blocks = [self_block_macs(n_tokens, d, dec.ffn_ratio) for _ in range(dec.n_self)]
    dec_blocks += [cross_block_macs(n_tokens, m, d, dec.ffn_ratio, kv_dim=e) for _ in range(dec.n_cross)]
    base_blocks = [self_block_macs(n_tokens, d, dec.ffn_ratio) for _ in range(dec.depth)]
    return MacReport(n_tokens, m, gamma, m * p3 * e, enc_blocks, m * e * d, dec_blocks, base_blocks,
                     n_tokens * d * p3, d)


def macs_table(reports: Sequence[MacReport]) -> list[dict]:
    ref = next((r for r in reports if r.n_visible == r.n_tokens), None)
    rows = []
    for r in reports:
        row = {
            "gamma": r.gamma, "N": r.n_tokens, "M": r.n_visible,
            "encoder_macs": r.encoder_total, "decoder_macs": r.decoder_total,
            "baseline_decoder_macs": r.baseline_total,
            "cross_similarity_macs": r.cross_similarity, "self_similarity_macs": r.self_similarity,
            "similarity_ratio": str(r.similarity_ratio),
        }
        if ref is not None:
            row["ratio_vs_gamma0"] = str(Fraction(r.cross_similarity, ref.cross_similarity))
        rows.append(row)
    return rows


# ---------------------------------------------------------------- benchmark


def _median(xs):
    return float(np.median(np.asarray(xs)))


def _random_taps(enc: EncoderConfig, m: int, rng) -> EncoderTaps:
    taps = {l: Tensor(rng.standard_normal((m, enc.embed_dim))) for l in enc.tap_layers}
    final = Tensor(rng.standard_normal((m, enc.embed_dim)))
    return EncoderTaps(taps, final, final)


def bench_decoder(enc: EncoderConfig, dec: DecoderConfig, grid: tuple[int, int, int],
                  gammas: Sequence[float], reps: int = 20, warmup: int = 3, seed: int = 0,
                  threads: int = 1) -> list[dict]:
    """Median forward wall-clock of the dense decoder and the baseline at each mask ratio.

    Both decoders share widths and total depth. Encoder taps are random
    (the encoder is not timed). Repetitions are interleaved across all
    (variant, ratio) cases so slow drift in machine load hits every case
    alike instead of biasing whichever ran last.
    """
    rng = np.random.default_rng(seed)
    pgrid = PatchGrid(enc.patch_size, tuple(grid))
    dense = DenseDecoder(enc, dec, np.random.default_rng(seed))
    base = BaselineDecoder(enc, dec, np.random.default_rng(seed))
    cases = []
    for gamma in gammas:
        plan = sample_mask(pgrid.n_tokens, gamma, rng)
        taps = _random_taps(enc, plan.n_visible, rng)
        for name, decoder in (("mae_baseline", base), ("hiend", dense)):
            cases.append((name, gamma, decoder, taps, plan, []))
    with threadpool_limits(limits=threads), ad.precision(32), ad.no_grad():
        for _ in range(warmup):
            for _, _, decoder, taps, plan, _ in cases:
                decoder(taps, plan, pgrid)
        for _ in range(reps):
            for _, _, decoder, taps, plan, times in cases:
                t0 = time.perf_counter()
                decoder(taps, plan, pgrid)
                times.append(time.perf_counter() - t0)
    return [{"variant": name, "gamma": gamma, "N": pgrid.n_tokens, "M": plan.n_visible,
             "median_s": _median(times), "min_s": float(min(times)), "reps": reps, "threads": threads}
            for name, gamma, _, _, plan, times in cases]


def write_rows_csv(rows: list[dict], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
