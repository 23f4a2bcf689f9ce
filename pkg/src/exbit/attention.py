"""Masked cross-domain correspondence and reliability-adaptive aggregation.

The correspondence between source and exemplar features is a centered-cosine
attention matrix. Negative scores are unreliable matches and get zeroed by a
parameter-free ReLU mask; the surviving scores drive a sharp softmax warp of
the exemplar value features, while a complementary gate routes modulated
query features into the positions that found no reliable match. A stack of
these blocks refines the correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, matmul, softmax
from .layers import (AdaConvBlock, ConvLayer, Module, SpadeModulation, pono_rows,
                     positional_encoding)


@dataclass
class CorrespondenceMap:
    """One block's attention state, kept for losses and visualization.

    raw: centered-cosine scores in [-1, 1], HW×HW
    masked: relu(raw)
    warped_weights: row-stochastic softmax of alpha * masked
    """
    raw: Tensor
    masked: Tensor
    warped_weights: Tensor
    alpha: float
    grid_hw: tuple[int, int]


def grid_to_rows(x: Tensor) -> Tensor:
    """C×H×W -> HW×C (row-major over positions)."""
    c, h, w = x.shape
    return x.transpose((1, 2, 0)).reshape((h * w, c))


def rows_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """HW×C -> C×H×W."""
    c = x.shape[1]
    return x.reshape((h, w, c)).transpose((2, 0, 1))


def cosine_attention(q: Tensor, k: Tensor, floor: float = 1e-8) -> Tensor:
    """Centered-cosine matching scores between all query and key positions.

    Each position vector is centered by its own channel mean before the
    cosine; a zero-norm centered vector scores 0 against everything
    (denominator floored).
    """
    qc = q - q.mean(axes=1, keepdims=True)
    kc = k - k.mean(axes=1, keepdims=True)
    nq = (qc * qc).sum(axes=1, keepdims=True).sqrt()
    nk = (kc * kc).sum(axes=1, keepdims=True).sqrt()
    denom = matmul(nq, nk.transpose((1, 0))).clamp(lo=floor)
    return matmul(qc, kc.transpose((1, 0))) / denom


def mask_correspondence(a: Tensor) -> Tensor:
    """Keep reliable (positive) scores, zero the rest. No learnable parameters."""
    return a.relu()


def warp_values(masked: Tensor, v: Tensor, alpha: float = 100.0) -> tuple[Tensor, Tensor]:
    """Warp exemplar value features by the sharpened masked correspondence.

    Returns (warped features HW×C, row-stochastic weights HW×HW). A fully
    masked-out row degrades to the uniform average of V.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    weights = softmax(masked * alpha, axis=1)
    return matmul(weights, v), weights


def uncorrelated_select(masked: Tensor, q_norm: Tensor, clamp_coeff: bool = True) -> Tensor:
    """Gate modulated query features into positions lacking reliable matches.

    The gate is 1 - (row mass of the masked correspondence), clamped to
    [0, 1]: fully matched rows contribute nothing, fully unmatched rows pass
    q_norm through unchanged.
    """
    coeff = 1.0 - masked.sum(axes=1, keepdims=True)
    if clamp_coeff:
        coeff = coeff.clamp(lo=0.0, hi=1.0)
    return coeff * q_norm


def aggregate(x_cor: Tensor, x_uncor: Tensor, q: Tensor) -> Tensor:
    """Fuse warped, gated and raw query features, position-normalized."""
    return pono_rows(x_cor + x_uncor + q)


class MatBlock(Module):
    """One masked-attention translation block.

    Projects the query side and the exemplar side through fresh 1×1 convs,
    computes the masked correspondence, warps values, gates modulated query
    features into unmatched regions, aggregates with PONO, and finishes with
    an adaptive conv block plus residual.
    """

    def __init__(self, channels, cond_ch, rng, alpha: float = 100.0,
                 dwise_k: int = 3, use_mask: bool = True, clamp_coeff: bool = True):
        super().__init__()
        self.alpha = alpha
        self.use_mask = use_mask
        self.clamp_coeff = clamp_coeff
        self.proj_q = ConvLayer(channels, channels, 1, rng)
        self.proj_k = ConvLayer(channels, channels, 1, rng)
        self.proj_v = ConvLayer(channels, channels, 1, rng)
        self.spade = SpadeModulation(channels, cond_ch, rng)
        self.adaconv = AdaConvBlock(channels, rng, k=dwise_k)

    def __call__(self, x_q: Tensor, y_kv: Tensor, cond: Tensor) -> tuple[Tensor, CorrespondenceMap]:
        _, h, w = x_q.shape
        q_grid = self.proj_q(x_q)
        q = grid_to_rows(q_grid)
        k = grid_to_rows(self.proj_k(y_kv))
        v = grid_to_rows(self.proj_v(y_kv))

        raw = cosine_attention(q, k)
        masked = mask_correspondence(raw) if self.use_mask else raw
        x_cor, weights = warp_values(masked, v, self.alpha)
        q_norm = grid_to_rows(self.spade(q_grid, cond))
        x_uncor = uncorrelated_select(masked, q_norm, self.clamp_coeff)
        x_agg = rows_to_grid(aggregate(x_cor, x_uncor, q), h, w)
        x_mat = self.adaconv(x_agg) + x_agg
        return x_mat, CorrespondenceMap(raw, masked, weights, self.alpha, (h, w))


class MatStack(Module):
    """A stack of translation blocks sharing one positional encoding.

    The encoding is added to both feature grids once, before the first
    block's projections; each block re-projects the exemplar features to
    fresh keys/values and consumes the previous block's output as queries.
    """

    def __init__(self, channels, cond_ch, rng, n_blocks: int = 3, alpha: float = 100.0,
                 dwise_k: int = 3, use_mask: bool = True, clamp_coeff: bool = True):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"need at least one block, got {n_blocks}")
        self.channels = channels
        self.blocks = [MatBlock(channels, cond_ch, rng, alpha, dwise_k, use_mask, clamp_coeff)
                       for _ in range(n_blocks)]

    def __call__(self, x_a_feat: Tensor, y_b_feat: Tensor,
                 cond: Tensor) -> tuple[Tensor, list[CorrespondenceMap]]:
        _, h, w = x_a_feat.shape
        pe = positional_encoding(h, w, self.channels)
        x = x_a_feat + pe
        y = y_b_feat + pe
        maps = []
        for block in self.blocks:
            x, cmap = block(x, y, cond)
            maps.append(cmap)
        return x, maps


def export_correspondence(cmap: CorrespondenceMap, query_index: int,
                          which: str = "masked") -> np.ndarray:
    """Reshape one query row of the correspondence to H×W and min-max
    normalize to [0, 1] (degenerate range maps to all zeros)."""
    h, w = cmap.grid_hw
    source = {"raw": cmap.raw, "masked": cmap.masked, "warped": cmap.warped_weights}
    if which not in source:
        raise ValueError(f"unknown view {which!r}")
    rows = source[which].data
    if not 0 <= query_index < rows.shape[0]:
        raise ValueError(f"query index {query_index} out of range [0, {rows.shape[0]})")
    row = rows[query_index].reshape(h, w)
    lo, hi = row.min(), row.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return (row - lo) / (hi - lo)
