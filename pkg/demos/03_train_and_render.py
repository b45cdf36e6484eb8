"""
A short training run end to end
===============================

Trains a reduced model for a few epochs, compares the three branches and
writes a heatmap of the strongest local prototype. The full reference run
is ``ppf train --config configs/synthetic4.cfg --out runs/ref``.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from ppf.data import synthetic_split
from ppf.train import evaluate, load_config, train
from ppf.viz import render_prototype, write_render

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "synthetic4.cfg")
cfg = replace(cfg, epochs=4, n_train=400, n_test=100)
train_set, test_set = synthetic_split(cfg.seed, cfg.n_train, cfg.n_test)

state, lines = train(cfg, train_set, log=print)

for branch in ("global", "local", "total"):
    r = evaluate(state.model, test_set, branch)
    print(f"{branch:>6}: acc {r['accuracy']:.3f}")
print(f"mean trace {r['tr_sigma']:.3f}, foreground share {r['concentration']:.3f}")

out = Path(tempfile.mkdtemp()) / "render"
render, sidecar, info = render_prototype(state.model, test_set.images[0], rank=1)
write_render(render, out, sidecar)
print(f"prototype {info['prototype']} of class {info['class']}, bbox {render.bbox}")
print("wrote", *sorted(p.name for p in out.iterdir()))
