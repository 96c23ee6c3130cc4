"""Shared video-pose embedding space and its alignment losses.

The time-pooled visual vector and the latent spatial attention vector are
projected by two matrices into one space, normalized onto the unit
hypersphere with an epsilon-stabilized norm, and compared.  The projection
matrices live under a unit Frobenius norm constraint enforced after each
optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ShapeError,
    Tensor,
    add,
    clip_min,
    elementwise_mul,
    l2_normalize_eps,
    log,
    matmul,
    reshape,
    softmax_lastdim,
    sub,
    sum_axis,
)

NORM_EPS = 1e-12
PROB_FLOOR = 1e-8

EMBEDDING_LOSS_KINDS = ("ne", "kl_fp", "kl_pf", "kl_bi")


@dataclass
class EmbeddedPair:
    f_e: Tensor
    p_e: Tensor
    f_e_hat: Tensor
    p_e_hat: Tensor


def spatial_pool(f: Tensor) -> Tensor:
    """Sum the feature map over time and flatten row-major to length m*n*c."""
    if f.ndim != 4:
        raise ShapeError(f"spatial_pool: expected (t_c, m, n, c), got {f.shape}")
    pooled = sum_axis(f, axis=0)
    return reshape(pooled, (pooled.size,))


def hypersphere_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    return l2_normalize_eps(v, eps)


def project(f_s: Tensor, z1: Tensor, t_v: Tensor, t_p: Tensor) -> EmbeddedPair:
    """f_e = T_v f_s and P_e = T_p z1, with their unit-hypersphere images."""
    f_e = matmul(t_v, f_s)
    p_e = matmul(t_p, z1)
    return EmbeddedPair(
        f_e=f_e,
        p_e=p_e,
        f_e_hat=hypersphere_normalize(f_e),
        p_e_hat=hypersphere_normalize(p_e),
    )


def embedding_loss_ne(pair: EmbeddedPair) -> Tensor:
    """Squared Euclidean distance between the unit embeddings, in [0, 4]."""
    d = sub(pair.f_e_hat, pair.p_e_hat)
    return sum_axis(elementwise_mul(d, d))


def _as_distribution(v: Tensor) -> Tensor:
    # softmax over embedding coordinates, floored away from zero
    return clip_min(softmax_lastdim(v), PROB_FLOOR)


def _kl(p: Tensor, q: Tensor) -> Tensor:
    return sum_axis(elementwise_mul(p, sub(log(p), log(q))))


def embedding_loss_kl(pair: EmbeddedPair, direction: str) -> Tensor:
    """KL divergence between the embeddings read as distributions.

    direction: 'kl_fp' measures D(f_e || P_e), 'kl_pf' the reverse, 'kl_bi'
    their sum.  Raw (pre-normalization) embeddings pass through a softmax
    with a probability floor before the divergence.
    """
    p_f = _as_distribution(pair.f_e)
    p_p = _as_distribution(pair.p_e)
    if direction == "kl_fp":
        return _kl(p_f, p_p)
    if direction == "kl_pf":
        return _kl(p_p, p_f)
    if direction == "kl_bi":
        return add(_kl(p_f, p_p), _kl(p_p, p_f))
    raise ValueError(f"unknown KL direction {direction!r}")


def embedding_loss(pair: EmbeddedPair, kind: str) -> Tensor:
    if kind == "ne":
        return embedding_loss_ne(pair)
    if kind in ("kl_fp", "kl_pf", "kl_bi"):
        return embedding_loss_kl(pair, kind)
    raise ValueError(f"unknown embedding loss kind {kind!r}")


def enforce_norm_constraint(t_v: Tensor, t_p: Tensor) -> tuple[Tensor, Tensor]:
    """Rescale both projection matrices to unit Frobenius norm."""
    out = []
    for name, t in (("T_v", t_v), ("T_p", t_p)):
        norm = float(np.linalg.norm(t.data))
        if norm == 0.0:
            raise ValueError(f"cannot normalize zero matrix {name}")
        out.append(Tensor(t.data / norm, requires_grad=t.requires_grad))
    return out[0], out[1]
