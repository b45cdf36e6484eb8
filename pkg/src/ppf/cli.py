"""``ppf`` command line: train, eval, rollout, visualize, inspect."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import load_dataset, load_pgm_ppm, save_dataset, synthetic_split
from .rollout import class_token_scores, rollout
from .train import evaluate, load_checkpoint, load_config, save_checkpoint, train
from .viz import render_prototype, write_render


def _load_image(path, model) -> np.ndarray:
    img = load_pgm_ppm(path, model.cfg.in_chans).image
    size = model.cfg.image_size
    if img.shape[:2] != (size, size):
        raise SystemExit(f"error: {path} is {img.shape[1]}x{img.shape[0]}, model expects "
                         f"{size}x{size}")
    return img


def cmd_train(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        train_set = load_dataset(args.data)
    else:
        train_set, test_set = synthetic_split(cfg.seed, cfg.n_train, cfg.n_test,
                                              cfg.n_classes, cfg.image_size)
        save_dataset(test_set, out / "test")
    state = load_checkpoint(args.resume) if args.resume else None
    with open(out / "metrics.log", "a", encoding="utf-8") as log:
        def emit(line):
            log.write(line + "\n")
            log.flush()
            print(line)
        state, _ = train(cfg, train_set, state=state, log=emit)
    save_checkpoint(state, out / "checkpoint.ppfk")
    print(f"wrote {out / 'checkpoint.ppfk'}")


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    r = evaluate(state.model, data, args.branch)
    print(f"branch={r['branch']} accuracy={r['accuracy']:.4f} n={len(data)}")
    print(f"mean_tr_sigma={r['tr_sigma']:.4f} concentration={r['concentration']:.4f}")
    print("prototype class tr_sigma min_dmu2")
    for i, (tr, d) in enumerate(zip(r["proto_tr"], r["proto_min_dmu2"])):
        print(f"{i:9d} {state.model.bank.local_class[i]:5d} {tr:8.4f} {d:8.4f}")


def cmd_rollout(args):
    model = load_checkpoint(args.ckpt).model
    img = _load_image(args.image, model)
    with ad.no_grad():
        out = model.forward(img[None])
    g = model.cfg.grid
    attn = [a[0] for a in out.attention[:-1]]
    scores = class_token_scores(rollout(attn, model.rollout_renormalize)) if attn \
        else np.zeros(g * g)
    print(f"class-token rollout scores ({g}x{g}):")
    for row in scores.reshape(g, g):
        print(" ".join(f"{v:.5f}" for v in row))
    print(f"foreground mask (K={model.k}):")
    for row in out.mask.keep[0].reshape(g, g):
        print(" ".join(str(int(v)) for v in row))


def cmd_visualize(args):
    model = load_checkpoint(args.ckpt).model
    img = _load_image(args.image, model)
    render, sidecar, _ = render_prototype(model, img, args.rank)
    write_render(render, args.out, sidecar)
    sys.stdout.write(sidecar)


def cmd_inspect(args):
    model = load_checkpoint(args.ckpt).model
    bank = model.bank
    print(f"classes={bank.n_classes} global={bank.m_global} local={bank.m_local} "
          f"K={model.k} lambda_g={model.lambda_global} lambda_l={model.lambda_local}")
    if not args.image:
        for c in range(bank.n_classes):
            print(f"class {c}: global {np.flatnonzero(bank.global_class == c).tolist()} "
                  f"local {np.flatnonzero(bank.local_class == c).tolist()}")
        return
    img = _load_image(args.image, model)
    with ad.no_grad():
        out = model.forward(img[None])
    branches = [("global", bank.global_class, out.global_scores.data[0], out.z_global.data[0]),
                ("local", bank.local_class, out.local_pooled.data[0], out.z_local.data[0])]
    for name, owner, scores, z in branches:
        print(f"[{name} branch]")
        for c in range(bank.n_classes):
            own = np.flatnonzero(owner == c)
            parts = " + ".join(f"p{j}:{scores[j]:.3f}" for j in own)
            print(f"  class {c}: {parts} = {z[c]:.3f} points")
    zc = out.z_total.data[0]
    print("[total]")
    for c in range(bank.n_classes):
        print(f"  class {c}: {model.lambda_global} * {out.z_global.data[0, c]:.3f} + "
              f"{model.lambda_local} * {out.z_local.data[0, c]:.3f} = {zc[c]:.3f}")
    print(f"prediction: class {int(zc.argmax())}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppf", description="Train, evaluate and inspect the prototype classifier.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic data or a dataset directory")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (default: synthetic data from config)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and concentration metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--branch", choices=("global", "local", "total"), default="total")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="print rollout scores and the foreground mask")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.set_defaults(func=cmd_rollout)

    v = sub.add_parser("visualize", help="write heatmap and bounding-box images")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--rank", type=int, default=1)
    v.add_argument("--out", default=".")
    v.set_defaults(func=cmd_visualize)

    i = sub.add_parser("inspect", help="per-class prototype score tables")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
