"""Synthetic foreground/background images and binary PGM/PPM I/O.

Each synthetic class is a fixed shape split into two differently textured
parts, dropped at a random position and scale onto smooth grey noise. The
exact foreground mask is kept alongside every image.

Dataset directory layout::

    images/00000.ppm   RGB image
    masks/00000.pgm    foreground mask (0 or 255), optional
    labels.txt         "<index> <class>" per line
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import FormatError

# --------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, image: np.ndarray):
    """Write an ``(H, W)`` array as P5 or an ``(H, W, 3)`` array as P6.

    Values in ``[0, 1]`` are rounded to 8 bits.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as PGM/PPM")
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


_WS = b" \t\r\n"


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    while pos < len(buf):
        if buf[pos] in _WS:
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header", start)
    return buf[start:pos], start, pos


def parse_pnm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes (maxval 255) to ``(H, W, C)`` floats in [0, 1]."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError("bad magic, expected P5 or P6", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid {what} {tok!r}", start)
        fields.append((int(tok), start))
    (w, _), (h, _), (maxval, mpos) = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", mpos)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("missing whitespace after header", pos)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}",
                          len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, channels).astype(np.float64) / 255.0


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_pnm(f.read())


@dataclass
class Sample:
    image: np.ndarray              # (H, W, C) in [0, 1]
    label: int | None = None
    fg_mask: np.ndarray | None = None  # (H, W) bool


def load_pgm_ppm(path, channels: int = 3) -> Sample:
    """Read an external image; greyscale is replicated to ``channels``."""
    img = read_pnm(path)
    if img.shape[2] != channels:
        if img.shape[2] == 1:
            img = np.repeat(img, channels, axis=2)
        else:
            raise ValueError(f"{path}: has {img.shape[2]} channels, model expects {channels}")
    return Sample(img)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray                # (N, H, W, C)
    labels: np.ndarray                # (N,)
    fg_masks: np.ndarray | None = None  # (N, H, W) bool

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        m = None if self.fg_masks is None else self.fg_masks[i]
        return Sample(self.images[i], int(self.labels[i]), m)

    def subset(self, idx) -> "Dataset":
        m = None if self.fg_masks is None else self.fg_masks[idx]
        return Dataset(self.images[idx], self.labels[idx], m)


def save_dataset(ds: Dataset, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.fg_masks is not None:
        (root / "masks").mkdir(exist_ok=True)
    lines = []
    for i in range(len(ds)):
        write_pnm(root / "images" / f"{i:05d}.ppm", ds.images[i])
        if ds.fg_masks is not None:
            write_pnm(root / "masks" / f"{i:05d}.pgm", ds.fg_masks[i].astype(np.float64))
        lines.append(f"{i} {int(ds.labels[i])}\n")
    (root / "labels.txt").write_text("".join(lines))


def load_dataset(root) -> Dataset:
    root = Path(root)
    pairs = []
    for lineno, line in enumerate((root / "labels.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        m = re.fullmatch(r"\s*(\d+)\s+(\d+)\s*", line)
        if m is None:
            raise ValueError(f"{root / 'labels.txt'}:{lineno}: expected '<index> <class>'")
        pairs.append((int(m.group(1)), int(m.group(2))))
    images, masks, labels = [], [], []
    have_masks = (root / "masks").is_dir()
    for idx, label in pairs:
        images.append(read_pnm(root / "images" / f"{idx:05d}.ppm"))
        if have_masks:
            masks.append(read_pnm(root / "masks" / f"{idx:05d}.pgm")[..., 0] > 0.5)
        labels.append(label)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   np.stack(masks) if have_masks else None)


# --------------------------------------------------------------------------
# synthetic generator

# Each template: (shape name, split rule, part-A color, part-A texture,
# part-B color, part-B texture).
TEMPLATES = [
    ("disk", "top", (0.90, 0.15, 0.10), "solid", (0.95, 0.85, 0.10), "hstripes"),
    ("square", "left", (0.10, 0.70, 0.20), "solid", (0.15, 0.30, 0.95), "checker"),
    ("triangle", "top", (0.85, 0.15, 0.85), "vstripes", (0.10, 0.85, 0.85), "solid"),
    ("plus", "hbar", (1.00, 0.55, 0.00), "solid", (0.45, 0.10, 0.70), "hstripes"),
    ("diamond", "left", (0.05, 0.05, 0.05), "checker", (0.95, 0.95, 0.95), "solid"),
    ("ring", "top", (0.60, 0.30, 0.05), "hstripes", (0.20, 0.90, 0.40), "vstripes"),
    ("tee", "top", (0.95, 0.50, 0.60), "solid", (0.05, 0.40, 0.45), "checker"),
    ("ellipse", "left", (0.55, 0.80, 0.05), "vstripes", (0.70, 0.05, 0.25), "solid"),
]


def _shape_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership on normalised coordinates; u is down, v is right, both in [-1, 1]."""
    au, av = np.abs(u), np.abs(v)
    if name == "disk":
        return u * u + v * v <= 1.0
    if name == "square":
        return (au <= 0.85) & (av <= 0.85)
    if name == "triangle":
        return (u <= 0.9) & (av <= (u + 1.0) / 1.9 * 0.95)
    if name == "plus":
        return ((au <= 0.35) & (av <= 1.0)) | ((av <= 0.35) & (au <= 1.0))
    if name == "diamond":
        return au + av <= 1.0
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if name == "tee":
        return ((u <= -0.4) & (u >= -1.0) & (av <= 1.0)) | ((av <= 0.35) & (au <= 1.0))
    if name == "ellipse":
        return (u / 0.65) ** 2 + v * v <= 1.0
    raise KeyError(name)


def _part_a(split: str, u, v) -> np.ndarray:
    if split == "top":
        return u < 0
    if split == "left":
        return v < 0
    if split == "hbar":
        return np.abs(u) <= 0.35
    raise KeyError(split)


def _texture(kind: str, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if kind == "solid":
        return np.ones(rows.shape)
    if kind == "hstripes":
        return np.where((rows // 2) % 2 == 0, 1.0, 0.55)
    if kind == "vstripes":
        return np.where((cols // 2) % 2 == 0, 1.0, 0.55)
    if kind == "checker":
        return np.where(((rows // 2) + (cols // 2)) % 2 == 0, 1.0, 0.55)
    raise KeyError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth grey noise: a coarse random grid bilinearly upsampled, plus grain."""
    coarse = rng.random((5, 5, 1)) * 0.5 + 0.25
    tint = 1.0 + rng.normal(0.0, 0.06, (5, 5, 3))
    coarse = coarse * tint
    t = np.linspace(0.0, 4.0, size)
    i0 = np.minimum(t.astype(int), 3)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[:, :, None]) + coarse[i0 + 1] * f[:, :, None]
    out = rows[:, i0] * (1 - f.T[:, :, None]) + rows[:, i0 + 1] * f.T[:, :, None]
    out = out + rng.normal(0.0, 0.03, out.shape)
    return np.clip(out, 0.0, 1.0)


def render_object(template: int, rng: np.random.Generator, size: int,
                  min_frac=0.10, max_frac=0.60):
    """Place one object; returns (image, fg_mask). Scale/position are redrawn
    until the foreground fraction lies within ``[min_frac, max_frac]``."""
    name, split, col_a, tex_a, col_b, tex_b = TEMPLATES[template]
    img = _background(rng, size)
    rr, cc = np.mgrid[0:size, 0:size]
    for _ in range(100):
        extent = rng.uniform(0.40, 0.75) * size
        top = rng.uniform(0.0, size - extent)
        left = rng.uniform(0.0, size - extent)
        u = (rr + 0.5 - top) / extent * 2.0 - 1.0
        v = (cc + 0.5 - left) / extent * 2.0 - 1.0
        mask = _shape_mask(name, u, v) & (np.abs(u) <= 1) & (np.abs(v) <= 1)
        frac = mask.mean()
        if min_frac <= frac <= max_frac:
            break
    else:  # pragma: no cover - the scale range makes this unreachable
        raise RuntimeError("could not place object within the area bounds")
    part_a = _part_a(split, u, v)
    shade_a = _texture(tex_a, rr, cc)[..., None] * np.asarray(col_a)
    shade_b = _texture(tex_b, rr, cc)[..., None] * np.asarray(col_b)
    fg = np.where(part_a[..., None], shade_a, shade_b)
    fg = fg + rng.normal(0.0, 0.03, fg.shape)
    img = np.where(mask[..., None], fg, img)
    return np.clip(img, 0.0, 1.0), mask


def generate(seed, n_samples: int, n_classes: int = 4, image_size: int = 32) -> Dataset:
    """Balanced synthetic dataset; byte-identical for equal arguments."""
    if n_classes > len(TEMPLATES):
        raise ValueError(f"at most {len(TEMPLATES)} classes available, asked for {n_classes}")
    if n_classes < 1 or n_samples < 1:
        raise ValueError("need at least one class and one sample")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    images = np.empty((n_samples, image_size, image_size, 3))
    masks = np.empty((n_samples, image_size, image_size), dtype=bool)
    for i, c in enumerate(labels):
        images[i], masks[i] = render_object(int(c), rng, image_size)
    return Dataset(images, labels.astype(np.int64), masks)


def synthetic_split(seed: int, n_train: int, n_test: int, n_classes: int = 4,
                    image_size: int = 32) -> tuple[Dataset, Dataset]:
    """Independent train and test sets drawn from child streams of ``seed``."""
    s_train, s_test = np.random.SeedSequence(seed).spawn(2)
    return (generate(s_train, n_train, n_classes, image_size),
            generate(s_test, n_test, n_classes, image_size))

