"""Interpretable prototype-part classification on a small vision transformer."""

from .autodiff import Tensor, backward, no_grad
from .concentration import PPCConfig, fit_gaussian, ppc_mu, ppc_sigma, total_loss
from .data import Dataset, generate, load_dataset, load_pgm_ppm, synthetic_split
from .model import PrototypeViT
from .rollout import build_fp_mask, class_token_scores, rollout, rollout_step
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .vit import ViTConfig

__version__ = "0.1.0"
