"""Weighted Gaussian fits of similarity maps and the concentration penalties.

A similarity map over a ``g x g`` token grid is treated as a weighted point
cloud: position ``(row, col)`` of each kept token carries its similarity as
weight. The fitted centre is the weighted mean; the spread is the weighted
scatter divided by ``sum(weights) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Fits whose weight sum minus one falls at or below this are skipped in the loss.
DENOM_FLOOR = 1e-6


class DegenerateFitError(ValueError):
    def __init__(self, weight_sum: float):
        super().__init__(f"weight sum {weight_sum!r} leaves no positive denominator")
        self.weight_sum = weight_sum


def grid_positions(g: int) -> np.ndarray:
    """``(g*g, 2)`` integer (row, col) coordinates in row-major token order."""
    r, c = np.divmod(np.arange(g * g), g)
    return np.stack([r, c], axis=1).astype(np.float64)


@dataclass
class Fits:
    mu: Tensor          # (..., 2)
    cov: Tensor         # (..., 2, 2)
    weight: np.ndarray  # (...,) sum of kept similarities
    valid: np.ndarray   # (...,) bool, weight - 1 > DENOM_FLOOR

    @property
    def trace(self) -> np.ndarray:
        return np.trace(self.cov.data, axis1=-2, axis2=-1)


def fit_gaussians(sim: Tensor, keep, positions: np.ndarray) -> Fits:
    """Vectorised fits of ``sim[..., N]`` maps under a boolean ``keep[..., N]``.

    Degenerate maps (weight sum too close to 1) get a covariance computed
    with denominator 1 and ``valid=False``; callers must skip them.
    """
    sim = ad.as_tensor(sim)
    lead = sim.shape[:-1]
    n = sim.shape[-1]
    gamma = np.broadcast_to(np.asarray(keep, dtype=np.float64), sim.shape)
    w = sim * gamma
    total = ad.tsum(w, axis=-1)
    wd = total.data
    valid = wd - 1.0 > DENOM_FLOOR

    flat = ad.reshape(w, (-1, 1, n))
    mu = ad.reshape(ad.matmul(flat, positions), lead + (2,))
    mu = mu / ad.reshape(total, lead + (1,))

    ones = (1,) * len(lead)
    rows = Tensor(positions[:, 0].reshape(ones + (n,)))
    cols = Tensor(positions[:, 1].reshape(ones + (n,)))
    dr = rows - mu[..., 0:1]
    dc = cols - mu[..., 1:2]
    denom = (total - 1.0) * valid + (1.0 - valid)
    srr = ad.tsum(w * dr * dr, axis=-1) / denom
    src = ad.tsum(w * dr * dc, axis=-1) / denom
    scc = ad.tsum(w * dc * dc, axis=-1) / denom
    parts = [ad.reshape(t, lead + (1,)) for t in (srr, src, src, scc)]
    cov = ad.reshape(ad.concat(parts, axis=-1), lead + (2, 2))
    return Fits(mu, cov, wd, valid)


@dataclass
class GaussianFit:
    mu: Tensor   # (2,)
    cov: Tensor  # (2, 2)


def fit_gaussian(sim, keep) -> GaussianFit:
    """Fit one ``g x g`` (or flattened, square-length) similarity map.

    Raises :class:`DegenerateFitError` when the kept weights sum to 1 or less.
    """
    sim = ad.as_tensor(sim)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != sim.shape:
        raise ValueError(f"mask shape {keep.shape} does not match map {sim.shape}")
    n = sim.data.size
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"map of {n} cells is not a square grid")
    flat = ad.reshape(sim, (1, n))
    wsum = float((sim.data * keep).sum())
    if wsum - 1.0 <= 0.0:
        raise DegenerateFitError(wsum)
    f = fit_gaussians(flat, keep.reshape(1, n), grid_positions(g))
    return GaussianFit(f.mu[0], f.cov[0])


def ppc_mu(mus, t_mu: float) -> Tensor:
    """Hinge on squared distances between all ordered pairs of centres.

    ``mus`` is ``(m, 2)``; the sum over ``i != j`` is divided by ``m*m``.
    """
    mus = ad.as_tensor(mus)
    m = mus.shape[0]
    diff = ad.reshape(mus, (m, 1, 2)) - ad.reshape(mus, (1, m, 2))
    d2 = ad.tsum(diff * diff, axis=-1)
    off = 1.0 - np.eye(m)
    return ad.tsum(ad.relu(t_mu - d2) * off) * (1.0 / (m * m))


def ppc_sigma(cov, t_sigma: float) -> Tensor:
    """Trace of the elementwise hinge ``max(0, cov - t_sigma)``."""
    cov = ad.as_tensor(cov)
    diag = cov[..., [0, 1], [0, 1]]
    return ad.tsum(ad.relu(diag - t_sigma), axis=-1)


@dataclass(frozen=True)
class PPCConfig:
    lambda_mu: float = 0.5
    lambda_sigma: float = 0.1
    t_mu: float = 2.0
    t_sigma: float = 1.0

    def __post_init__(self):
        for k in ("lambda_mu", "lambda_sigma", "t_mu", "t_sigma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")


def batch_ppc(fits: Fits, own: np.ndarray, cfg: PPCConfig):
    """Both penalties over a batch, each sample using its own-class prototypes.

    ``fits`` covers ``(B, m)`` sample/prototype pairs and ``own[b, i]`` marks
    prototypes of sample ``b``'s label. Returns ``(loss_mu, loss_sigma)``:
    the centre term averaged over samples, the spread term averaged over
    every own-class (sample, prototype) pair.
    """
    own = np.asarray(own, dtype=bool)
    b, m = own.shape
    m_c = own.sum(axis=1).astype(np.float64)

    mu = fits.mu
    diff = ad.reshape(mu, (b, m, 1, 2)) - ad.reshape(mu, (b, 1, m, 2))
    d2 = ad.tsum(diff * diff, axis=-1)
    pair = own[:, :, None] & own[:, None, :] & ~np.eye(m, dtype=bool)[None]
    pair_w = pair / np.maximum(m_c, 1.0)[:, None, None] ** 2
    loss_mu = ad.tsum(ad.relu(cfg.t_mu - d2) * pair_w) * (1.0 / b)

    diag = fits.cov[..., [0, 1], [0, 1]]
    per_fit = ad.tsum(ad.relu(diag - cfg.t_sigma), axis=-1)
    sig_w = (own & fits.valid) / max(m_c.sum(), 1.0)
    loss_sigma = ad.tsum(per_fit * sig_w)
    return loss_mu, loss_sigma


def total_loss(logits, labels, fits: Fits | None, own, cfg: PPCConfig):
    """Cross-entropy plus weighted concentration terms.

    Returns ``(loss, terms)`` where ``terms`` maps ``ce``, ``ppc_mu`` and
    ``ppc_sigma`` to their scalar Tensors.
    """
    labels = np.asarray(labels)
    logits = ad.as_tensor(logits)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    ce = ad.cross_entropy(logits, labels)
    terms = {"ce": ce}
    loss = ce
    if fits is not None and (cfg.lambda_mu > 0 or cfg.lambda_sigma > 0):
        l_mu, l_sigma = batch_ppc(fits, own, cfg)
        terms["ppc_mu"], terms["ppc_sigma"] = l_mu, l_sigma
        loss = loss + l_mu * cfg.lambda_mu + l_sigma * cfg.lambda_sigma
    return loss, terms
