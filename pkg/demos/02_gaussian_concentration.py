"""
Fitting a Gaussian to a similarity map
======================================

Each local prototype produces a similarity value per token. Treating the
map as weights on grid positions gives a centre and a spread; the two
penalties push centres of one class apart and shrink the spreads.
"""

import numpy as np

from ppf.concentration import fit_gaussian, ppc_mu, ppc_sigma

g = 8
rows, cols = np.mgrid[0:g, 0:g]

# a compact blob and a diffuse one
tight = 6.0 * np.exp(-((rows - 2) ** 2 + (cols - 5) ** 2) / 2.0)
loose = 1.5 * np.exp(-((rows - 5) ** 2 + (cols - 3) ** 2) / 18.0)
keep = np.ones((g, g), bool)

fits = [fit_gaussian(m, keep) for m in (tight, loose)]
for name, f in zip(("tight", "loose"), fits):
    print(f"{name}: centre {f.mu.data.round(3)}  trace {np.trace(f.cov.data):.3f}")

# spread penalty: only the part of each variance above the threshold counts
for name, f in zip(("tight", "loose"), fits):
    print(f"{name}: spread penalty {ppc_sigma(f.cov, t_sigma=1.0).item():.3f}")

# centre penalty: pairs closer than sqrt(t_mu) are pushed apart
centres = np.stack([f.mu.data for f in fits])
print("centre penalty, far apart :", ppc_mu(centres, t_mu=2.0).item())
print("centre penalty, same place:", ppc_mu(centres[[0, 0]], t_mu=2.0).item())

# masking a position out removes it from the fit entirely
keep[2, 5] = False
print("tight centre without its peak:", fit_gaussian(tight, keep).mu.data.round(3))
