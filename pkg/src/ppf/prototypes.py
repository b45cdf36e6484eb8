"""Global and local prototype banks with log-distance similarity.

Each prototype belongs to exactly one class. The per-branch FC heads are
fixed 0/1 class-membership matrices, so a class's points are the plain sum
of its own prototypes' pooled similarities. They never enter the
optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-4


def log_similarity(dist2):
    """``log((d2 + 1) / (d2 + eps))`` for squared distances (array or Tensor)."""
    if isinstance(dist2, Tensor):
        return ad.log(ad.div(dist2 + 1.0, dist2 + EPS))
    dist2 = np.asarray(dist2, dtype=np.float64)
    return np.log((dist2 + 1.0) / (dist2 + EPS))


def similarity(token, prototype) -> Tensor:
    """Similarity between one token vector and one prototype vector."""
    token, prototype = ad.as_tensor(token), ad.as_tensor(prototype)
    if token.shape != prototype.shape:
        raise ad.ShapeError(f"similarity: shapes {token.shape} and {prototype.shape}")
    diff = token - prototype
    return log_similarity(ad.tsum(diff * diff))


def similarity_map(tokens: Tensor, protos: Tensor) -> Tensor:
    """Similarities of every token with every prototype.

    ``tokens`` is ``(B, N, d)`` and ``protos`` is ``(m, d)``; the result is
    ``(B, m, N)``. Squared distances are taken from explicit differences so
    a token equal to a prototype scores exactly ``log(1/eps)``.
    """
    b, n, d = tokens.shape
    m = protos.shape[0]
    diff = ad.reshape(tokens, (b, 1, n, d)) - ad.reshape(protos, (1, m, 1, d))
    return log_similarity(ad.tsum(diff * diff, axis=-1))


@dataclass
class PrototypeBank:
    global_protos: Tensor   # (m_g, d)
    local_protos: Tensor    # (m_l, d)
    global_class: np.ndarray  # (m_g,) owning class ids
    local_class: np.ndarray   # (m_l,)
    n_classes: int

    @classmethod
    def create(cls, n_classes: int, per_class_global: int, per_class_local: int,
               dim: int, rng: np.random.Generator) -> "PrototypeBank":
        """Uniform [0, 1) vectors, prototypes assigned to classes in blocks."""
        g = Tensor(rng.random((n_classes * per_class_global, dim)), requires_grad=True)
        loc = Tensor(rng.random((n_classes * per_class_local, dim)), requires_grad=True)
        return cls(g, loc, np.repeat(np.arange(n_classes), per_class_global),
                   np.repeat(np.arange(n_classes), per_class_local), n_classes)

    @property
    def m_global(self) -> int:
        return self.global_protos.shape[0]

    @property
    def m_local(self) -> int:
        return self.local_protos.shape[0]

    def fc_global(self) -> np.ndarray:
        return class_identity_fc(self.global_class, self.n_classes)

    def fc_local(self) -> np.ndarray:
        return class_identity_fc(self.local_class, self.n_classes)


def class_identity_fc(owner: np.ndarray, n_classes: int) -> np.ndarray:
    """``(C, m)`` weights: 1 from each prototype to its class, 0 elsewhere."""
    owner = np.asarray(owner)
    return (owner[None, :] == np.arange(n_classes)[:, None]).astype(np.float64)


@dataclass
class LocalResult:
    sim: Tensor      # (B, m_l, N) unmasked similarity maps
    pooled: Tensor   # (B, m_l) max over preserved positions
    logits: Tensor   # (B, C)


def local_branch(tokens: Tensor, keep, protos: Tensor, fc: np.ndarray) -> LocalResult:
    """Similarity maps for every local prototype, pooled over kept tokens only."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != tokens.shape[:2]:
        raise ValueError(f"mask shape {keep.shape} does not match tokens {tokens.shape[:2]}")
    if not keep.any(axis=-1).all():
        raise ValueError("local_branch: a sample has an all-zero foreground mask")
    sim = similarity_map(tokens, protos)
    pooled = ad.masked_max(sim, keep[:, None, :], axis=-1)
    return LocalResult(sim, pooled, ad.matmul(pooled, Tensor(fc.T)))


def global_branch(cls_tok: Tensor, protos: Tensor, fc: np.ndarray):
    """Class-token similarity to each global prototype and the branch logits."""
    b, d = cls_tok.shape
    scores = similarity_map(ad.reshape(cls_tok, (b, 1, d)), protos)
    scores = ad.reshape(scores, (b, protos.shape[0]))
    return scores, ad.matmul(scores, Tensor(fc.T))


def fuse(z_global, z_local, lambda_global: float, lambda_local: float):
    """Weighted sum of the two branch logits."""
    zg, zl = ad.as_tensor(z_global), ad.as_tensor(z_local)
    if zg.shape != zl.shape:
        raise ad.ShapeError(f"fuse: logit shapes {zg.shape} and {zl.shape} differ")
    return zg * lambda_global + zl * lambda_local
