"""Prototype classifier on top of the masked ViT encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .concentration import Fits, fit_gaussians, grid_positions
from .prototypes import PrototypeBank, fuse, global_branch, local_branch
from .rollout import FPMask


@dataclass
class ModelOutput:
    z_global: Tensor
    z_local: Tensor
    z_total: Tensor
    global_scores: Tensor   # (B, m_g)
    local_sim: Tensor       # (B, m_l, N)
    local_pooled: Tensor    # (B, m_l)
    mask: FPMask
    attention: list[np.ndarray]

    def logits(self, branch: str = "total") -> Tensor:
        return {"global": self.z_global, "local": self.z_local,
                "total": self.z_total}[branch]


class PrototypeViT:
    """ViT encoder with a global (class-token) and a local (image-token)
    prototype branch and fixed class-membership FC heads."""

    def __init__(self, cfg: vit.ViTConfig, bank: PrototypeBank, params: dict[str, Tensor],
                 k: int, lambda_global: float = 0.5, lambda_local: float = 0.5,
                 rollout_renormalize: bool = True):
        if not 1 <= k <= cfg.n_patches:
            raise ValueError(f"K must lie in [1, {cfg.n_patches}], got {k}")
        self.cfg = cfg
        self.bank = bank
        self.params = params
        self.k = k
        self.lambda_global = lambda_global
        self.lambda_local = lambda_local
        self.rollout_renormalize = rollout_renormalize
        self.fc_global = bank.fc_global()
        self.fc_local = bank.fc_local()
        self.positions = grid_positions(cfg.grid)

    @classmethod
    def create(cls, cfg: vit.ViTConfig, per_class_global: int, per_class_local: int,
               k: int, rng: np.random.Generator, **kw) -> "PrototypeViT":
        params = vit.init_params(cfg, rng)
        bank = PrototypeBank.create(cfg.n_classes, per_class_global, per_class_local,
                                    cfg.embed_dim, rng)
        return cls(cfg, bank, params, k, **kw)

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors in a stable order. The FC heads are not included."""
        out = dict(self.params)
        out["protos.global"] = self.bank.global_protos
        out["protos.local"] = self.bank.local_protos
        return out

    def forward(self, images, mask_policy="rollout") -> ModelOutput:
        enc = vit.forward(images, self.params, self.cfg, self.k, mask_policy,
                          self.rollout_renormalize)
        # Prototypes live in the unit cube, so features are squashed into it too.
        cls_feat, tok_feat = ad.sigmoid(enc.cls), ad.sigmoid(enc.tokens)
        g_scores, z_g = global_branch(cls_feat, self.bank.global_protos, self.fc_global)
        loc = local_branch(tok_feat, enc.mask.keep, self.bank.local_protos, self.fc_local)
        z_c = fuse(z_g, loc.logits, self.lambda_global, self.lambda_local)
        return ModelOutput(z_g, loc.logits, z_c, g_scores, loc.sim, loc.pooled,
                           enc.mask, enc.attention)

    def fits(self, out: ModelOutput) -> Fits:
        """Gaussian fits of every local similarity map under the sample's mask."""
        return fit_gaussians(out.local_sim, out.mask.keep[:, None, :], self.positions)

    def own_class(self, labels) -> np.ndarray:
        """``(B, m_l)`` flags of local prototypes owned by each sample's label."""
        return self.bank.local_class[None, :] == np.asarray(labels)[:, None]

    def predict(self, images, branch: str = "total", batch_size: int = 256) -> np.ndarray:
        preds = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                out = self.forward(images[i:i + batch_size])
                preds.append(out.logits(branch).data.argmax(axis=1))
        return np.concatenate(preds)
