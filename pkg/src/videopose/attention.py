"""Spatial and temporal attention derived from pose features.

Two small heads read the pose feature vector h*: one emits a logit per
spatial cell of the visual feature map, the other a logit per frame.  The
sigmoid/softmax weights are inflated to a common m x n x t_c shape and
multiplied together (the coupled form), or applied in two separate residual
streams (the dissociated baseline).
"""

from __future__ import annotations

import numpy as np

from .diffcore import (
    ShapeError,
    Tensor,
    add,
    broadcast_mul,
    concat,
    matmul,
    reshape,
    sigmoid,
    softmax_lastdim,
    tanh,
    transpose,
)


def latent_vectors(h_star: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """z_r = W_z_r tanh(W_h_r h* + b_h_r) + b_z_r for the two heads.

    params holds spatial.{w_h,b_h,w_z,b_z} and temporal.{...}; z1 has one
    entry per spatial cell, z2 one per frame.
    """
    if h_star.ndim != 1:
        raise ShapeError(f"latent_vectors: h* must be a vector, got {h_star.shape}")
    out = []
    for head in ("spatial", "temporal"):
        hidden = tanh(add(matmul(params[f"{head}.w_h"], h_star), params[f"{head}.b_h"]))
        out.append(add(matmul(params[f"{head}.w_z"], hidden), params[f"{head}.b_z"]))
    return out[0], out[1]


def attention_weights(z1: Tensor, z2: Tensor, m: int, n: int) -> tuple[Tensor, Tensor]:
    """A_S = sigmoid(z1) as an m x n grid; A_T = softmax(z2)."""
    if z1.size != m * n:
        raise ShapeError(f"attention_weights: z1 has {z1.size} entries for a {m}x{n} grid")
    a_s = reshape(sigmoid(z1), (m, n))
    a_t = softmax_lastdim(z2)
    return a_s, a_t


def couple(a_s: Tensor, a_t: Tensor) -> Tensor:
    """Inflate both weight arrays to m x n x t_c and take their product.

    Each output cell is the single product A_S[i,j] * A_T[t], so the
    factorization is exact.
    """
    m, n = a_s.shape
    t_c = a_t.shape[0]
    col = reshape(a_s, (m, n, 1))
    inflated_s = concat([col] * t_c, axis=2)
    return broadcast_mul(inflated_s, a_t, axes=(2,))


def modulate(f: Tensor, a_st: Tensor) -> Tensor:
    """f' = A_ST * f + f, with the weights broadcast over channels."""
    t_c, m, n, _ = f.shape
    if a_st.shape != (m, n, t_c):
        raise ShapeError(f"modulate: weights {a_st.shape} do not match feature map {f.shape}")
    w = transpose(a_st, (2, 0, 1))
    return add(broadcast_mul(f, w, axes=(0, 1, 2)), f)


def dissociated_modulate(f: Tensor, a_s: Tensor, a_t: Tensor) -> Tensor:
    """Two-stream baseline: spatial and temporal weights applied separately.

    Each stream keeps its own residual; the streams are concatenated along
    the channel axis, doubling c.
    """
    t_c, m, n, _ = f.shape
    if a_s.shape != (m, n):
        raise ShapeError(f"dissociated_modulate: spatial weights {a_s.shape} vs map {f.shape}")
    if a_t.shape != (t_c,):
        raise ShapeError(f"dissociated_modulate: temporal weights {a_t.shape} vs map {f.shape}")
    stream_s = add(broadcast_mul(f, a_s, axes=(1, 2)), f)
    stream_t = add(broadcast_mul(f, a_t, axes=(0,)), f)
    return concat([stream_s, stream_t], axis=3)


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D array with corner alignment.

    Corner alignment makes the identity resize exact, so inference at the
    training extent reproduces the training attention bit for bit.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    if (out_h, out_w) == (h, w):
        return grid.copy()
    rows = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def attention_param_shapes(feature_width: int, d_a: int, m: int, n: int, t_c: int) -> dict:
    """Shapes for both attention heads, in creation order."""
    shapes = {}
    for head, width in (("spatial", m * n), ("temporal", t_c)):
        shapes[f"{head}.w_h"] = (d_a, feature_width)
        shapes[f"{head}.b_h"] = (d_a,)
        shapes[f"{head}.w_z"] = (width, d_a)
        shapes[f"{head}.b_z"] = (width,)
    return shapes
