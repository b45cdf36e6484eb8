"""Training loop, AdamW, cosine schedule, checkpoints and evaluation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .concentration import PPCConfig, total_loss
from .data import Dataset
from .model import PrototypeViT
from .tensorio import (FormatError, Reader, pack_string, pack_tensor, pack_u32_array,
                       read_tensor, read_u32_array)
from .viz import concentration_ratio
from .vit import ViTConfig

CKPT_MAGIC = b"PPFK"
CKPT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    lambda_g: float = 0.5
    lambda_l: float = 0.5
    lambda_mu: float = 0.5
    lambda_sigma: float = 0.1
    t_mu: float = 2.0
    t_sigma: float = 1.0
    k: int = 24
    protos_global_per_class: int = 2
    protos_local_per_class: int = 4
    rollout_renormalize: bool = True
    image_size: int = 32
    patch_size: int = 4
    depth: int = 3
    heads: int = 2
    embed_dim: int = 32
    mlp_ratio: float = 2.0
    n_classes: int = 4
    n_train: int = 2000
    n_test: int = 400

    def vit(self) -> ViTConfig:
        return ViTConfig(self.image_size, self.patch_size, self.depth, self.heads,
                         self.embed_dim, self.mlp_ratio, self.n_classes)

    def ppc(self) -> PPCConfig:
        return PPCConfig(self.lambda_mu, self.lambda_sigma, self.t_mu, self.t_sigma)

    def to_lines(self) -> list[str]:
        return [f"{k}={_fmt(v)}" for k, v in asdict(self).items()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    return float(raw)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_from_pairs(pairs, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for key, raw in pairs:
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, _FIELD_TYPES[key], raw)
    return replace(base or TrainConfig(), **values)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        pairs.append((key.strip(), raw))
    try:
        return config_from_pairs(pairs, base)
    except ValueError as e:
        raise ValueError(f"config: {e}") from None


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _decays(name: str, arr: np.ndarray) -> bool:
    # Matrices of linear layers only; embeddings, norms, biases and prototypes are exempt.
    return arr.ndim == 2 and name.endswith(".w") and not name.startswith("protos")


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, ad.Tensor], weight_decay=0.05,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            data = p.data
            if self.weight_decay and _decays(name, data):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``
    (0 disables). Returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: PrototypeViT
    opt: AdamW
    rng: np.random.Generator   # shuffling stream
    epoch: int = 0             # completed epochs


def build_model(cfg: TrainConfig, rng: np.random.Generator) -> PrototypeViT:
    return PrototypeViT.create(
        cfg.vit(), cfg.protos_global_per_class, cfg.protos_local_per_class, cfg.k, rng,
        lambda_global=cfg.lambda_g, lambda_local=cfg.lambda_l,
        rollout_renormalize=cfg.rollout_renormalize)


def init_state(cfg: TrainConfig) -> TrainState:
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(cfg, np.random.default_rng(init_seq))
    opt = AdamW(model.named_parameters(), cfg.weight_decay, (cfg.beta1, cfg.beta2),
                cfg.adam_eps)
    return TrainState(cfg, model, opt, np.random.default_rng(shuffle_seq))


def train_step(state: TrainState, images, labels, lr: float) -> dict:
    model, cfg = state.model, state.cfg
    with ad.new_tape():
        out = model.forward(images)
        fits = model.fits(out)
        own = model.own_class(labels)
        loss, terms = total_loss(out.z_total, labels, fits, own, cfg.ppc())
        for name, t in terms.items():
            if not np.isfinite(t.data):
                raise NonFiniteLossError(f"non-finite {name} term ({float(t.data)!r})")
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(f"non-finite total loss ({float(loss.data)!r})")
        state.opt.zero_grad()
        ad.backward(loss)
    gnorm = clip_grad_norm(list(state.opt.params.values()), cfg.grad_clip)
    state.opt.step(lr)
    sel = own & fits.valid
    return {
        "loss": float(loss.data),
        "correct": int((out.z_total.data.argmax(axis=1) == labels).sum()),
        "tr_sum": float(fits.trace[sel].sum()),
        "tr_count": int(sel.sum()),
        "grad_norm": gnorm,
    }


def format_metrics(epoch: int, m: dict) -> str:
    return (f"epoch={epoch} loss={m['loss']:.8f} acc={m['acc']:.8f} "
            f"tr_sigma={m['tr_sigma']:.8f}")


def train_epoch(state: TrainState, data: Dataset) -> dict:
    cfg = state.cfg
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    perm = state.rng.permutation(n)
    loss_sum = correct = tr_sum = tr_count = 0.0
    for s in range(steps_per_epoch):
        idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
        lr = cosine_lr(cfg.base_lr, state.epoch * steps_per_epoch + s, total_steps)
        r = train_step(state, data.images[idx], data.labels[idx], lr)
        loss_sum += r["loss"] * len(idx)
        correct += r["correct"]
        tr_sum += r["tr_sum"]
        tr_count += r["tr_count"]
    state.epoch += 1
    return {"loss": loss_sum / n, "acc": correct / n,
            "tr_sigma": tr_sum / tr_count if tr_count else float("nan")}


def train(cfg: TrainConfig, data: Dataset, state: TrainState | None = None,
          until_epoch: int | None = None, log=None) -> tuple[TrainState, list[str]]:
    """Run (or resume) training up to ``until_epoch`` (default ``cfg.epochs``).

    Returns the final state and the metric lines written this call. ``log``
    may be a callable receiving each line.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    state = state or init_state(cfg)
    stop = cfg.epochs if until_epoch is None else until_epoch
    lines = []
    while state.epoch < stop:
        m = train_epoch(state, data)
        line = format_metrics(state.epoch, m)
        lines.append(line)
        if log is not None:
            log(line)
    return state, lines


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(state: TrainState, path):
    Path(path).write_bytes(checkpoint_bytes(state))


def checkpoint_bytes(state: TrainState) -> bytes:
    header = state.cfg.to_lines() + [
        f"_epoch={state.epoch}",
        f"_adam_t={state.opt.t}",
        "_rng=" + json.dumps(state.rng.bit_generator.state, sort_keys=True),
    ]
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header))]
    out += [pack_string(line) for line in header]
    model = state.model
    records: list[tuple[str, int, bytes]] = []
    for name, p in model.named_parameters().items():
        records.append((name, 0, pack_tensor(p.data)))
    records.append(("protos.global.class", 1, pack_u32_array(model.bank.global_class)))
    records.append(("protos.local.class", 1, pack_u32_array(model.bank.local_class)))
    records.append(("fc.global", 0, pack_tensor(model.fc_global)))
    records.append(("fc.local", 0, pack_tensor(model.fc_local)))
    for name in model.named_parameters():
        records.append(("adam.m." + name, 0, pack_tensor(state.opt.m[name])))
        records.append(("adam.v." + name, 0, pack_tensor(state.opt.v[name])))
    out.append(struct.pack("<I", len(records)))
    for name, kind, payload in records:
        out += [pack_string(name), bytes([kind]), payload]
    return b"".join(out)


def parse_checkpoint(buf: bytes) -> TrainState:
    r = Reader(buf)
    if r.take(4, "checkpoint magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.u32("checkpoint version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    n_lines = r.u32("header line count")
    pairs, meta = [], {}
    for _ in range(n_lines):
        pos = r.pos
        line = r.string("header line")
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}", pos)
        k, v = line.split("=", 1)
        if k.startswith("_"):
            meta[k] = v
        else:
            pairs.append((k, v))
    try:
        cfg = config_from_pairs(pairs)
    except ValueError as e:
        raise FormatError(f"bad config echo: {e}", 8) from None

    n_rec = r.u32("record count")
    tensors, arrays = {}, {}
    for _ in range(n_rec):
        name = r.string("record name")
        kpos = r.pos
        kind = r.u8("record kind")
        if kind == 0:
            tensors[name] = read_tensor(r)
        elif kind == 1:
            arrays[name] = read_u32_array(r)
        else:
            raise FormatError(f"unknown record kind {kind}", kpos)
    if not r.at_end():
        raise FormatError("trailing bytes after last record", r.pos)

    state = init_state(cfg)
    model = state.model
    for name, p in model.named_parameters().items():
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}", r.pos)
        if tensors[name].shape != p.shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, "
                              f"expected {p.shape}", r.pos)
        p.data = tensors[name]
        state.opt.m[name] = tensors.get("adam.m." + name, np.zeros(p.shape))
        state.opt.v[name] = tensors.get("adam.v." + name, np.zeros(p.shape))
    bank = model.bank
    bank.global_class = arrays.get("protos.global.class", bank.global_class)
    bank.local_class = arrays.get("protos.local.class", bank.local_class)
    model.fc_global = bank.fc_global()
    model.fc_local = bank.fc_local()
    state.epoch = int(meta.get("_epoch", 0))
    state.opt.t = int(meta.get("_adam_t", 0))
    if "_rng" in meta:
        state.rng.bit_generator.state = json.loads(meta["_rng"])
    return state


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------


def evaluate(model: PrototypeViT, data: Dataset, branch: str = "total",
             batch_size: int = 200) -> dict:
    """Accuracy of one branch plus concentration statistics on own-class
    local prototypes.

    ``tr_sigma`` is the mean fitted-spread trace over non-degenerate fits;
    ``concentration`` is the mean share of top-5% similarity mass inside the
    ground-truth foreground (``nan`` when the data has no masks);
    ``proto_tr`` / ``proto_min_dmu2`` are per-local-prototype means.
    """
    if branch not in ("global", "local", "total"):
        raise ValueError(f"unknown branch {branch!r}")
    g = model.cfg.grid
    m_l = model.bank.m_local
    correct = 0
    tr_sum = tr_n = 0.0
    conc = []
    proto_tr = np.zeros(m_l)
    proto_tr_n = np.zeros(m_l)
    proto_dmu = np.zeros(m_l)
    proto_dmu_n = np.zeros(m_l)
    same = model.bank.local_class[:, None] == model.bank.local_class[None, :]
    same &= ~np.eye(m_l, dtype=bool)
    with ad.no_grad():
        for i in range(0, len(data), batch_size):
            images = data.images[i:i + batch_size]
            labels = data.labels[i:i + batch_size]
            out = model.forward(images)
            correct += int((out.logits(branch).data.argmax(axis=1) == labels).sum())
            fits = model.fits(out)
            own = model.own_class(labels)
            sel = own & fits.valid
            tr = fits.trace
            tr_sum += tr[sel].sum()
            tr_n += sel.sum()
            proto_tr += np.where(sel, tr, 0.0).sum(axis=0)
            proto_tr_n += sel.sum(axis=0)
            mu = fits.mu.data
            d2 = ((mu[:, :, None, :] - mu[:, None, :, :]) ** 2).sum(-1)
            d2 = np.where(same[None], d2, np.inf).min(axis=2)
            finite = np.isfinite(d2)
            proto_dmu += np.where(finite, d2, 0.0).sum(axis=0)
            proto_dmu_n += finite.sum(axis=0)
            if data.fg_masks is not None:
                sim = out.local_sim.data.reshape(len(labels), m_l, g, g)
                for b in range(len(labels)):
                    for j in np.flatnonzero(own[b]):
                        conc.append(concentration_ratio(sim[b, j], data.fg_masks[i + b]))
    with np.errstate(invalid="ignore", divide="ignore"):
        return {
            "branch": branch,
            "accuracy": correct / len(data),
            "tr_sigma": tr_sum / tr_n if tr_n else float("nan"),
            "concentration": float(np.mean(conc)) if conc else float("nan"),
            "proto_tr": proto_tr / proto_tr_n,
            "proto_min_dmu2": proto_dmu / proto_dmu_n,
        }
