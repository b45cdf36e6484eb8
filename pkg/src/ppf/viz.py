"""Heatmaps and top-5% bounding boxes for local prototype activations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_pnm

TOP_FRACTION = 0.05


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a ``(g_r, g_c)`` map.

    The four corners of the output coincide with the four corner cells of
    the input, so every input value is reproduced exactly on the sample
    lattice and output values never leave ``[min, max]`` of the input.
    """
    grid = np.asarray(grid, dtype=np.float64)
    gr, gc = grid.shape
    if height < gr or width < gc:
        raise ValueError(f"target {height}x{width} is smaller than source {gr}x{gc}")

    def coords(n_out, n_in):
        if n_in == 1 or n_out == 1:
            return np.zeros(n_out, dtype=int), np.zeros(n_out)
        # integer arithmetic so output pixels that sit on input cells hit them exactly
        i0, rem = np.divmod(np.arange(n_out) * (n_in - 1), n_out - 1)
        return i0, rem / (n_out - 1)

    r0, fr = coords(height, gr)
    c0, fc = coords(width, gc)
    r1 = np.minimum(r0 + 1, gr - 1)
    c1 = np.minimum(c0 + 1, gc - 1)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    out = top * (1 - fr[:, None]) + bot * fr[:, None]
    # convex weights; the clip only removes rounding spill past the source range
    return np.clip(out, grid.min(), grid.max())


def top_threshold(values: np.ndarray, fraction: float = TOP_FRACTION) -> float:
    """Value at ascending index ``ceil((1 - fraction) * k) - 1`` over ``k`` entries."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    idx = max(math.ceil(round((1.0 - fraction) * flat.size, 9)) - 1, 0)
    return float(flat[idx])


def top_region(values: np.ndarray, fraction: float = TOP_FRACTION) -> np.ndarray:
    return values >= top_threshold(values, fraction)


def bounding_box(region: np.ndarray) -> tuple[int, int, int, int]:
    """(row_min, col_min, row_max, col_max), inclusive, of a boolean region."""
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def concentration_ratio(sim_grid: np.ndarray, fg_mask: np.ndarray) -> float:
    """Share of the top-5% upsampled similarity mass lying on the foreground."""
    up = upsample_bilinear(sim_grid, *fg_mask.shape)
    top = top_region(up)
    mass = up[top].sum()
    return float(up[top & fg_mask].sum() / mass) if mass > 0 else 0.0


def _colormap() -> np.ndarray:
    """256-entry blue -> cyan -> yellow -> red table, piecewise linear."""
    t = np.linspace(0.0, 1.0, 256)
    knots = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    r = np.interp(t, knots, [0.0, 0.0, 1.0, 1.0])
    g = np.interp(t, knots, [0.0, 1.0, 1.0, 0.0])
    b = np.interp(t, knots, [1.0, 1.0, 0.0, 0.0])
    return np.round(np.stack([r, g, b], axis=1) * 255.0) / 255.0


COLORMAP = _colormap()


def colorize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    return COLORMAP[np.round(scaled * 255.0).astype(int)]


def draw_box(image: np.ndarray, box, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    r0, c0, r1, c1 = box
    col = np.asarray(color)
    out[r0, c0:c1 + 1] = col
    out[r1, c0:c1 + 1] = col
    out[r0:r1 + 1, c0] = col
    out[r0:r1 + 1, c1] = col
    return out


@dataclass
class HeatmapRender:
    source: np.ndarray     # (g, g) similarity map
    upsampled: np.ndarray  # (H, W)
    overlay: np.ndarray    # (H, W, 3)
    boxed: np.ndarray      # (H, W, 3)
    bbox: tuple[int, int, int, int]


def render_heatmap(image: np.ndarray, sim_grid: np.ndarray, alpha: float = 0.5) -> HeatmapRender:
    h, w = image.shape[:2]
    up = upsample_bilinear(sim_grid, h, w)
    box = bounding_box(top_region(up))
    overlay = alpha * colorize(up) + (1.0 - alpha) * image
    return HeatmapRender(np.asarray(sim_grid), up, overlay, draw_box(image, box), box)


def write_render(render: HeatmapRender, out_dir, sidecar: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pnm(out / "heatmap.ppm", render.overlay)
    write_pnm(out / "bbox.ppm", render.boxed)
    (out / "render.txt").write_text(sidecar)


def _grid_text(arr: np.ndarray, fmt: str) -> str:
    return "\n".join(" ".join(fmt.format(v) for v in row) for row in arr)


def render_prototype(model, image: np.ndarray, rank: int = 1):
    """Heatmap of the ``rank``-th most activated local prototype of the
    predicted class. Returns ``(render, sidecar_text, info)``."""
    from . import autodiff as ad
    from .concentration import DegenerateFitError, fit_gaussian

    cfg = model.cfg
    g = cfg.grid
    with ad.no_grad():
        out = model.forward(image[None])
    pred = int(out.z_total.data[0].argmax())
    owned = np.flatnonzero(model.bank.local_class == pred)
    if not 1 <= rank <= len(owned):
        raise ValueError(f"rank must lie in [1, {len(owned)}] for class {pred}")
    pooled = out.local_pooled.data[0]
    order = owned[np.argsort(-pooled[owned], kind="stable")]
    proto = int(order[rank - 1])
    grid = out.local_sim.data[0, proto].reshape(g, g)
    keep = out.mask.keep[0].reshape(g, g)
    render = render_heatmap(image, grid)

    lines = [f"predicted_class={pred}", f"prototype={proto}", f"rank={rank}",
             f"pooled_score={pooled[proto]:.6f}"]
    try:
        fit = fit_gaussian(grid, keep)
        mu, cov = fit.mu.data, fit.cov.data
        lines.append(f"mu={mu[0]:.6f} {mu[1]:.6f}")
        lines.append(f"sigma={cov[0, 0]:.6f} {cov[0, 1]:.6f} {cov[1, 0]:.6f} {cov[1, 1]:.6f}")
    except DegenerateFitError as e:
        mu = cov = None
        lines.append(f"fit=degenerate weight_sum={e.weight_sum:.6f}")
    r0, c0, r1, c1 = render.bbox
    lines.append(f"bbox={r0} {c0} {r1} {c1}")
    lines.append("similarity:")
    lines.append(_grid_text(grid, "{:.4f}"))
    lines.append("gamma:")
    lines.append(_grid_text(keep.astype(int), "{:d}"))
    info = {"class": pred, "prototype": proto, "pooled": float(pooled[proto]),
            "mu": mu, "cov": cov, "order": order}
    return render, "\n".join(lines) + "\n", info
