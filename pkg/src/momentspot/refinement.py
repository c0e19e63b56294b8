"""Convolutional feature projection, query-aware clip refinement, and the
alignment loss tying refined clips to the query."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat, conv1d, div, dropout, matmul, maximum,
                       mul, relu, reshape, sqrt, square, sub, transpose, tsum)
from .config import ConfigError
from .losses import one_minus_cosine


@dataclass
class ConvLayer:
    weight: Tensor  # (kernel, C_in, C_out)
    bias: Tensor    # (C_out,)


@dataclass
class ProjectionParams:
    layers: list  # of ConvLayer


def _row_mask(t, mask):
    """Zero masked rows; identity when mask is None or all-true."""
    if mask is None:
        return t
    m = np.asarray(mask, dtype=bool)
    if m.all():
        return t
    return mul(t, Tensor(m.astype(t.data.dtype)[:, None]))


def project(x, params, input_dropout=0.0, train=False, rng=None, mask=None):
    """Stacked same-padding conv1d + ReLU mapping raw features (L, d_in) -> (L, d).

    Input dropout runs before the first conv at train time only. Masked rows
    are zeroed before and after every conv so padded tokens cannot leak into
    their neighbors through the kernel support.
    """
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    d_in = params.layers[0].weight.data.shape[1]
    if t.data.ndim != 2 or t.data.shape[1] != d_in:
        raise ConfigError(f"projection input shape {t.data.shape} does not match d_in={d_in}")
    t = dropout(t, input_dropout, rng=rng, train=train)
    for layer in params.layers:
        t = _row_mask(t, mask)
        t = relu(conv1d(t, layer.weight, layer.bias))
        t = _row_mask(t, mask)
    return t


def masked_mean_pool(t, mask=None):
    """Mean over unmasked rows, kept as shape (1, d)."""
    if mask is None:
        return t.mean(axis=0, keepdims=True)
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ValueError("masked_mean_pool over an empty (fully masked) sequence")
    picked = mul(t, Tensor(m.astype(t.data.dtype)[:, None]))
    return mul(tsum(picked, axis=0, keepdims=True), 1.0 / count)


def refine(v_bar, t_bar, conv, n_max, text_mask=None, clip_mask=None):
    """Fuse per-clip query correspondence and the pooled query into each clip.

    Concatenates [v_bar | v_bar @ t_bar^T (zero-padded to n_max) | v_bar @ pooled^T
    | pooled row-broadcast] and projects back to width d with a same-padding conv.
    """
    length, d = v_bar.data.shape
    n_tok = t_bar.data.shape[0]
    if n_tok > n_max:
        raise ConfigError(f"{n_tok} text tokens exceed n_max={n_max}")
    if text_mask is not None and not np.asarray(text_mask, dtype=bool).any():
        raise ValueError("refine() with a fully masked (empty) query")
    t_masked = _row_mask(t_bar, text_mask)
    corr = matmul(v_bar, transpose(t_masked))  # (L, N)
    if n_max > n_tok:
        pad = Tensor(np.zeros((length, n_max - n_tok), dtype=v_bar.data.dtype))
        corr = concat([corr, pad], axis=1)
    pooled = masked_mean_pool(t_bar, text_mask)          # (1, d)
    clip_query = matmul(v_bar, transpose(pooled))        # (L, 1)
    ones = Tensor(np.ones((length, 1), dtype=v_bar.data.dtype))
    pooled_rows = matmul(ones, pooled)                   # (L, d)
    stacked = concat([v_bar, corr, clip_query, pooled_rows], axis=1)
    stacked = _row_mask(stacked, clip_mask)
    out = conv1d(stacked, conv.weight, conv.bias)
    return _row_mask(out, clip_mask)


def clip_query_cosines(t_bar, v_r, text_mask=None):
    """Cosine between the pooled query and every refined clip, as a rank-1 tensor.

    Zero-norm rows (e.g. masked clips zeroed upstream) yield cosine 0 exactly.
    """
    pooled = masked_mean_pool(t_bar, text_mask)
    dots = reshape(matmul(v_r, transpose(pooled)), (v_r.data.shape[0],))
    row_norms = sqrt(tsum(square(v_r), axis=1))
    pooled_norm = sqrt(tsum(square(pooled)))
    denom = maximum(mul(row_norms, pooled_norm), 1e-30)
    return div(dots, denom)


def alignment_loss(t_bar, v_r, gt_saliency, text_mask=None, clip_mask=None, flags=None):
    """1 - cosine between (normalized) predicted and gt per-clip query alignment.

    gt_saliency holds the normalized (level/4) per-clip values. Masked clips
    are excluded from both vectors; a zero-norm side gives loss 1, flagged.
    """
    pred = clip_query_cosines(t_bar, v_r, text_mask=text_mask)
    gt = np.asarray(gt_saliency, dtype=pred.data.dtype)
    if gt.shape != pred.data.shape:
        raise ValueError(f"gt saliency shape {gt.shape} does not match clip count {pred.data.shape}")
    if clip_mask is not None:
        m = np.asarray(clip_mask, dtype=bool)
        gt = gt * m
        pred = mul(pred, Tensor(m.astype(pred.data.dtype)))
    return one_minus_cosine(pred, Tensor(gt), flags=flags)
