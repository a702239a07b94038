"""Two-dimensional bidirectional retention over patch tokens.

Tokens live on an ``Hp x Wp`` grid. Queries and keys are rotated per token by
phases proportional to its row (first half of the channel pairs) and column
(second half); scores are masked by ``gamma ** manhattan_distance`` and mixed
into values with no softmax and no per-row normalisation.

Score convention: for complex-paired channels the score is the Hermitian
product ``Re sum_c (q_n e^{i phi_n})_c * conj((k_m e^{i phi_m})_c)``, i.e. the
key enters through its conjugate ``conj(k_m) e^{-i phi_m}``. In real
arithmetic this is the plain dot product of q and k after each is rotated by
its own phase, which is what :func:`retention_parallel` computes. The
recurrent oracle evaluates the complex form token by token.
"""
from __future__ import annotations

import cmath
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .tensor import (
    Tensor,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    rotate_pairs,
    swap_last,
    transpose,
)

THETA_BASE = 10000.0


@dataclass
class TokenGrid:
    tokens: Tensor
    coords: np.ndarray  # [N, 2] int64, row-major
    grid: tuple[int, int]

    def __post_init__(self):
        hp, wp = self.grid
        if self.coords.shape != (hp * wp, 2):
            raise ShapeError(f"TokenGrid: {self.coords.shape[0]} coords for a {hp}x{wp} grid")


@dataclass
class PatchEmbedding:
    E: Tensor  # [P*P*C, D_model]
    patch_size: int
    bias: Tensor | None = None


@dataclass
class RetentionHeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    gamma: float
    theta_freqs: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")
        d_head = self.w_q.shape[1]
        if d_head % 4:
            raise ParameterError(f"head dim {d_head} must be divisible by 4")

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1]


@dataclass
class RetentionBlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    heads: list[RetentionHeadParams]
    w_out: Tensor
    out_gain: Tensor
    out_bias: Tensor
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None
    ff1_w: Tensor | None = None
    ff1_b: Tensor | None = None
    ff2_w: Tensor | None = None
    ff2_b: Tensor | None = None


def head_gamma(h: int) -> float:
    """Per-head decay ``1 - 2**(-5 - h)``: 0.96875, 0.984375, ..."""
    return 1.0 - 2.0 ** (-5 - h)


def theta_frequencies(d_head: int, base: float = THETA_BASE) -> np.ndarray:
    if d_head % 4:
        raise ParameterError(f"head dim {d_head} must be divisible by 4")
    d = np.arange(d_head // 4, dtype=np.float64)
    return base ** (-4.0 * d / d_head)


@lru_cache(maxsize=64)
def grid_coords(hp: int, wp: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    c = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1).astype(np.int64)
    c.setflags(write=False)
    return c


def patch_count(h: int, w: int, p: int) -> int:
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} must divide feature map {h}x{w}")
    return (h * w) // (p * p)


def patchify(feature_map: Tensor, p: int) -> tuple[Tensor, np.ndarray]:
    """Split ``[B,C,H,W]`` into ``[B, N, C*P*P]`` row-major patches.

    Within a patch the flattened order is channel-major: index ``c*P*P + py*P + px``.
    """
    B, C, H, W = feature_map.shape
    if p < 1:
        raise ShapeError(f"patchify: patch size must be >= 1, got {p}")
    if H % p:
        raise ShapeError(f"patchify: patch size {p} does not divide height (dim 2) = {H}")
    if W % p:
        raise ShapeError(f"patchify: patch size {p} does not divide width (dim 3) = {W}")
    hp, wp = H // p, W // p
    x = reshape(feature_map, (B, C, hp, p, wp, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (B, hp * wp, C * p * p)), grid_coords(hp, wp)


def unpatchify(tokens: Tensor, p: int, channels: int, grid: tuple[int, int]) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    B, N, F = tokens.shape
    hp, wp = grid
    if N != hp * wp or F != channels * p * p:
        raise ShapeError(f"unpatchify: tokens {tokens.shape} do not fit grid {grid} x C={channels}, P={p}")
    x = reshape(tokens, (B, hp, wp, channels, p, p))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (B, channels, hp * p, wp * p))


def embed(patches: Tensor, emb: PatchEmbedding) -> Tensor:
    if patches.shape[-1] != emb.E.shape[0]:
        raise ShapeError(
            f"embed: patch vector length (dim -1) = {patches.shape[-1]} but E has {emb.E.shape[0]} rows"
        )
    x = matmul(patches, emb.E)
    return x if emb.bias is None else x + emb.bias


def build_decay_mask(coords: np.ndarray, gamma: float) -> Tensor:
    if not 0.0 < gamma <= 1.0:
        raise ParameterError(f"build_decay_mask: gamma must lie in (0, 1], got {gamma}")
    return Tensor(kernels.decay_mask(np.asarray(coords, dtype=np.int64), float(gamma)))


@lru_cache(maxsize=64)
def _cached_mask(hp: int, wp: int, gamma: float) -> np.ndarray:
    m = kernels.decay_mask(grid_coords(hp, wp), gamma)
    m.setflags(write=False)
    return m


def rotation_angles(coords: np.ndarray, theta_freqs: np.ndarray) -> np.ndarray:
    """``[N, D_head/2]`` angles: x-rotation pairs first, then y-rotation pairs."""
    c = np.asarray(coords, dtype=np.float64)
    return np.concatenate([c[:, :1] * theta_freqs[None, :], c[:, 1:2] * theta_freqs[None, :]], axis=1)


def apply_rotation(projected: Tensor, coords: np.ndarray, theta_freqs: np.ndarray, conjugate: bool = False) -> Tensor:
    """Multiply each channel pair, read as a complex number, by ``e^{+-i angle}``."""
    d = projected.shape[-1]
    if d % 4:
        raise ParameterError(f"apply_rotation: head dim {d} must be divisible by 4")
    if theta_freqs.shape != (d // 4,):
        raise ShapeError(f"apply_rotation: expected {d // 4} base angles, got {theta_freqs.shape}")
    ang = rotation_angles(coords, theta_freqs)
    if conjugate:
        ang = -ang
    return rotate_pairs(projected, np.cos(ang), np.sin(ang))


def retention_parallel(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """``((Q K^T) * D) V`` with no softmax and no normalisation."""
    n = q.shape[-2]
    if k.shape != q.shape:
        raise ShapeError(f"retention_parallel: K shape {k.shape} != Q shape {q.shape}")
    if v.shape[:-1] != q.shape[:-1]:
        raise ShapeError(f"retention_parallel: V token dims {v.shape[:-1]} != Q token dims {q.shape[:-1]}")
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    if mask.shape != (n, n):
        raise ShapeError(f"retention_parallel: mask shape {mask.shape} != ({n}, {n})")
    scores = matmul(q, swap_last(k))
    return matmul(scores * mask, v)


def retention_head(x: Tensor, head: RetentionHeadParams, coords: np.ndarray, mask=None) -> Tensor:
    q = apply_rotation(matmul(x, head.w_q), coords, head.theta_freqs)
    k = apply_rotation(matmul(x, head.w_k), coords, head.theta_freqs)
    v = matmul(x, head.w_v)
    if mask is None:
        mask = build_decay_mask(coords, head.gamma)
    return retention_parallel(q, k, v, mask)


def retention_recurrent_oracle(x: Tensor, head: RetentionHeadParams, coords: np.ndarray) -> np.ndarray:
    """Token-by-token bidirectional retention with complex arithmetic.

    Shares no code with the parallel path: projections, phases, decay and the
    sum over all tokens are plain scalar loops. Small N only.
    """
    X = x.data
    Wq, Wk, Wv = head.w_q.data, head.w_k.data, head.w_v.data
    B, N, Dm = X.shape
    Dh = Wq.shape[1]
    pairs = Dh // 2
    quarter = Dh // 4
    theta = [float(t) for t in head.theta_freqs]
    pts = [(int(a), int(b)) for a, b in coords]

    def project(row, W):
        return [sum(row[i] * W[i, j] for i in range(Dm)) for j in range(W.shape[1])]

    def phase(n, c, sign):
        xn, yn = pts[n]
        ang = xn * theta[c] if c < quarter else yn * theta[c - quarter]
        return cmath.exp(sign * 1j * ang)

    out = np.zeros((B, N, Wv.shape[1]))
    for b in range(B):
        qs, ks, vs = [], [], []
        for n in range(N):
            row = X[b, n]
            qr, kr = project(row, Wq), project(row, Wk)
            vs.append(project(row, Wv))
            qs.append([complex(qr[2 * c], qr[2 * c + 1]) * phase(n, c, +1) for c in range(pairs)])
            # conj(k) rotated by the conjugate phase: the daggered key term
            ks.append([complex(kr[2 * c], -kr[2 * c + 1]) * phase(n, c, -1) for c in range(pairs)])
        for n in range(N):
            xn, yn = pts[n]
            acc = [0.0] * Wv.shape[1]
            for m in range(N):
                xm, ym = pts[m]
                decay = head.gamma ** (abs(xn - xm) + abs(yn - ym))
                score = sum(qs[n][c] * ks[m][c] for c in range(pairs)).real
                w = decay * score
                for j in range(Wv.shape[1]):
                    acc[j] += w * vs[m][j]
            out[b, n] = acc
    return out


def multi_head_retention(
    x: Tensor,
    heads: list[RetentionHeadParams],
    w_out: Tensor,
    coords: np.ndarray,
    out_gain: Tensor | None = None,
    out_bias: Tensor | None = None,
    grid: tuple[int, int] | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Per-head retention, concatenation, output projection, then layer norm."""
    d_model = x.shape[-1]
    total = sum(h.d_head for h in heads)
    if total != d_model:
        raise ShapeError(f"multi_head_retention: head dims sum to {total}, D_model = {d_model}")
    if w_out.shape != (d_model, d_model):
        raise ShapeError(f"multi_head_retention: W_out shape {w_out.shape} != ({d_model}, {d_model})")
    outs = []
    for h in heads:
        mask = _cached_mask(grid[0], grid[1], h.gamma) if grid is not None else None
        outs.append(retention_head(x, h, coords, mask))
    y = matmul(concat(outs, axis=-1), w_out)
    if out_gain is None:
        out_gain = Tensor(np.ones(d_model))
    if out_bias is None:
        out_bias = Tensor(np.zeros(d_model))
    return layer_norm(y, out_gain, out_bias, eps)


def retention_block(x: Tensor, p: RetentionBlockParams, coords: np.ndarray, grid: tuple[int, int] | None = None) -> Tensor:
    """Pre-norm residual retention followed by an optional position-wise feedforward."""
    h = layer_norm(x, p.ln1_gain, p.ln1_bias)
    x = x + multi_head_retention(h, p.heads, p.w_out, coords, p.out_gain, p.out_bias, grid)
    if p.ff1_w is None:
        return x
    h = layer_norm(x, p.ln2_gain, p.ln2_bias)
    h = relu(matmul(h, p.ff1_w) + p.ff1_b)
    return x + (matmul(h, p.ff2_w) + p.ff2_b)
