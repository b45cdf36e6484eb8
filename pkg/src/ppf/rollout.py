"""Attention rollout and the top-K foreground-preserving token mask.

These run on plain arrays outside the gradient tape: picking the top-K
tokens is a hard selection with no useful derivative. All functions accept
an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def rollout_step(prev: np.ndarray, attn: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """One rollout update: ``norm(I + attn) @ prev``.

    ``attn`` is the head-averaged attention of the layer. With
    ``renormalize`` each row of ``I + attn`` is divided by its sum so the
    rollout stays row-stochastic; without it the raw ``I + attn`` is used.
    """
    prev = np.asarray(prev, dtype=np.float64)
    attn = np.asarray(attn, dtype=np.float64)
    if prev.shape[-2:] != attn.shape[-2:] or attn.shape[-1] != attn.shape[-2]:
        raise ValueError(f"rollout_step: shapes {prev.shape} and {attn.shape} do not agree")
    aug = attn + np.eye(attn.shape[-1])
    if renormalize:
        aug = aug / aug.sum(axis=-1, keepdims=True)
    return aug @ prev


def rollout(attentions, renormalize: bool = True) -> np.ndarray:
    """Rollout through a sequence of head-averaged attention matrices.

    An empty sequence is not allowed; the caller must know ``n``. Use
    ``np.eye(n)`` directly for the zero-layer case.
    """
    attentions = list(attentions)
    if not attentions:
        raise ValueError("rollout needs at least one attention matrix")
    first = np.asarray(attentions[0])
    r = np.broadcast_to(np.eye(first.shape[-1]), first.shape).copy()
    for a in attentions:
        r = rollout_step(r, a, renormalize)
    return r


def class_token_scores(rollout_matrix: np.ndarray) -> np.ndarray:
    """Influence of each image token on the class token (row 0, columns 1..)."""
    return np.asarray(rollout_matrix)[..., 0, 1:]


@dataclass(frozen=True)
class FPMask:
    keep: np.ndarray      # bool [..., n-1]
    k: int
    scores: np.ndarray    # float [..., n-1]

    @property
    def gamma(self) -> np.ndarray:
        return self.keep.astype(np.float64)


def build_fp_mask(scores: np.ndarray, k: int) -> FPMask:
    """Keep the ``k`` highest-scoring tokens; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return FPMask(keep=keep, k=k, scores=scores)
