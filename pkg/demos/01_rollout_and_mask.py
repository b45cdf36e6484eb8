"""
Which tokens survive the last layer
===================================

A freshly initialised encoder already produces attention, so we can follow
how rollout ranks the image tokens and which ones the top-K mask keeps.
"""

import numpy as np

from ppf import autodiff as ad
from ppf import vit
from ppf.data import generate
from ppf.rollout import class_token_scores, rollout

cfg = vit.ViTConfig(image_size=32, patch_size=4, depth=3, heads=2, embed_dim=32)
params = vit.init_params(cfg, np.random.default_rng(0))
sample = generate(seed=7, n_samples=1)[0]

with ad.no_grad():
    enc = vit.forward(sample.image[None], params, cfg, k=24)

# rollout of the unmasked layers, read off at the class-token row
scores = class_token_scores(rollout(enc.attention[:-1]))[0]
print("rollout scores, 8x8 grid:")
print(np.array2string(scores.reshape(cfg.grid, cfg.grid), precision=4))

# the mask keeps the 24 highest scores
print("kept tokens:")
print(enc.mask.keep[0].reshape(cfg.grid, cfg.grid).astype(int))

# last-layer attention: dropped columns are exactly zero
last = enc.attention[-1][0]
dropped = np.flatnonzero(~enc.mask.keep[0]) + 1
print("mass on dropped columns:", last[:, dropped].sum())
print("row sums:", np.unique(np.round(last.sum(axis=1), 12)))

# how much of the foreground the mask covers (foreground share per patch)
fg = sample.fg_mask.reshape(cfg.grid, 4, cfg.grid, 4).mean(axis=(1, 3)).ravel()
print("foreground share of kept patches  :", fg[enc.mask.keep[0]].mean().round(3))
print("foreground share of dropped patches:", fg[~enc.mask.keep[0]].mean().round(3))
