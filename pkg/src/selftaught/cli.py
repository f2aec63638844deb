"""Command line entry point: ``selftaught <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from .config import ABLATION_ROWS, TrainConfig
from .data import ConfigError, export_collection, generate_synthetic_domain, resolve_domain, synthetic_split

log = logging.getLogger("selftaught")


def _add_config_flags(p: argparse.ArgumentParser, rename: dict[str, str | None] | None = None) -> None:
    """One flag per TrainConfig field; ``rename`` maps a field to another flag name (None drops it)."""
    rename = rename or {}
    p.add_argument("--config", type=Path, help="YAML file with TrainConfig keys")
    g = p.add_argument_group("config overrides")
    hints = typing.get_type_hints(TrainConfig)
    fields = []
    for f in dataclasses.fields(TrainConfig):
        flag = rename.get(f.name, "--" + f.name.replace("_", "-"))
        if flag is None:
            continue
        dest = flag[2:].replace("-", "_")
        fields.append((f.name, dest))
        tp = hints[f.name]
        if tp is bool:
            g.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
            continue
        base = next((t for t in typing.get_args(tp) if t is not type(None)), tp)
        g.add_argument(flag, dest=dest, type=base, default=None, metavar=base.__name__.upper())
    p.set_defaults(config_fields=fields)


def _config_from(args, base: TrainConfig | None = None) -> TrainConfig:
    """Precedence: command-line flags > --config file > ``base`` (e.g. a checkpoint's config) > defaults."""
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = base or TrainConfig()
    over = {k: getattr(args, d) for k, d in getattr(args, "config_fields", []) if getattr(args, d) is not None}
    return cfg.replace(**over)


def _checkpoint_config(args) -> TrainConfig:
    from .backbone import read_checkpoint

    base = None
    if getattr(args, "checkpoint", None):
        _, manifest, _ = read_checkpoint(args.checkpoint)
        if "config" in manifest:
            base = TrainConfig.from_dict(manifest["config"])
    return _config_from(args, base)


def _model_for(args, cfg):
    from .trainer import build_model, load_model

    if getattr(args, "checkpoint", None):
        return load_model(args.checkpoint)[0]
    return build_model(cfg)


def _domain(args, cfg, split=None):
    name = args.domain or cfg.target
    return resolve_domain(name, split or args.split, cfg.image_size, cfg.images_per_class, cfg.data_seed,
                          cfg.shot + cfg.queries_per_class)


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config_from(args)
    summary = train(cfg, args.out, resume=args.resume, init_checkpoint=args.init_checkpoint, progress=True)
    summary.pop("trainer")
    print(json.dumps(summary, indent=1))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    cfg = _checkpoint_config(args)
    model = _model_for(args, cfg)
    coll = _domain(args, cfg)
    rep = evaluate(model, coll, cfg, args.episodes, seed=cfg.seed, domain_name=f"{args.domain or cfg.target}:{args.split}",
                   dump_embeddings=args.dump_embeddings)
    out = Path(args.out) if args.out else Path(f"eval_{args.domain or cfg.target}.json")
    rep.save(out)
    print(rep.summary())
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import sweep_alpha

    cfg = _checkpoint_config(args)
    model = _model_for(args, cfg)
    alphas = [int(a) for a in args.alphas.split(",")]
    reps = sweep_alpha(model, _domain(args, cfg), cfg, alphas, args.episodes, cfg.seed,
                       f"{args.domain or cfg.target}:{args.split}", args.out)
    for r in reps:
        print(f"alpha={r.alpha}: {r.summary()}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablate

    cfg = _config_from(args)
    rows = args.rows.split(",") if args.rows else None
    reps = ablate(cfg, args.out, rows, args.episodes)
    for name, r in reps.items():
        print(f"{name:>16}: {r.summary()}")
    return 0


def _heat_overlay(pixels, heat, box, gt=None):
    from PIL import Image, ImageDraw

    h = heat / heat.max() if heat.max() > 0 else heat
    rgb = pixels * 0.5 + 0.5 * np.stack([h, np.zeros_like(h), 1 - h], -1)
    im = Image.fromarray(np.clip(rgb * 255, 0, 255).astype(np.uint8))
    d = ImageDraw.Draw(im)
    if gt is not None:
        d.rectangle([gt.left, gt.top, gt.right - 1, gt.bottom - 1], outline=(0, 255, 0))
    if box is not None:
        d.rectangle([box.left, box.top, box.right - 1, box.bottom - 1], outline=(255, 255, 0))
    return im


def cmd_wsol_viz(args) -> int:
    from .data import stack_pixels
    from .wsol import localize_batch

    cfg = _checkpoint_config(args)
    model = _model_for(args, cfg)
    coll = _domain(args, cfg)
    imgs = [im for c in coll for im in coll[c][: max(1, args.n // len(coll) + 1)]][: args.n]
    located = localize_batch(model, stack_pixels(imgs), cfg.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (im, (act, box)) in enumerate(zip(imgs, located)):
        _heat_overlay(im.pixels, act.upsampled, box, im.gt_box).save(out / f"wsol_{i:03d}.png")
    print(f"wrote {len(imgs)} overlays to {out}")
    return 0


def cmd_expand_viz(args) -> int:
    from PIL import Image

    from .data import sample_episode, stack_pixels
    from .trainer import expand_support

    cfg = _checkpoint_config(args)
    model = _model_for(args, cfg)
    coll = _domain(args, cfg)
    ep = sample_episode(coll, cfg.way, cfg.shot, 1, cfg.seed)
    expanded, _ = expand_support(model, stack_pixels(ep.support), ep.support_labels, cfg,
                                 np.random.default_rng(cfg.seed))
    cols = max(len(v) for v in expanded.by_class.values())
    side = cfg.image_size
    grid = np.ones((len(expanded.by_class) * side, cols * side, 3), dtype=np.float32)
    for r, c in enumerate(sorted(expanded.by_class)):
        for k, idx in enumerate(expanded.by_class[c]):
            grid[r * side:(r + 1) * side, k * side:(k + 1) * side] = expanded.samples[idx].pixels
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((grid * 255).astype(np.uint8)).save(out)
    print(f"wrote {len(expanded)} expanded samples to {out}")
    return 0


def cmd_synth_export(args) -> int:
    classes = synthetic_split(args.split)
    coll = generate_synthetic_domain(args.seed, classes=classes, images_per_class=args.images_per_class,
                                     texture_family=args.family, image_size=args.image_size)
    out = export_collection(coll, args.out)
    print(f"wrote {coll.n_images()} images in {len(coll)} classes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selftaught", description="Self-taught cross-domain few-shot learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="episodic training on the source domain")
    _add_config_flags(s)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--resume", type=Path)
    s.add_argument("--init-checkpoint", type=Path, help="initial parameters (pretrained backbone)")
    s.set_defaults(func=cmd_train)

    def eval_like(name, func, help):
        s = sub.add_parser(name, help=help)
        _add_config_flags(s, {"episodes": None})
        s.add_argument("--checkpoint", type=Path)
        s.add_argument("--domain", help="synthA..synthD or a dataset directory (default: config target)")
        s.add_argument("--split", default="test")
        s.set_defaults(func=func)
        return s

    s = eval_like("eval", cmd_eval, "evaluate a checkpoint on a target domain")
    s.add_argument("--episodes", type=int)
    s.add_argument("--out", type=Path)
    s.add_argument("--dump-embeddings", type=Path, help="write query embeddings + labels (.npz)")

    s = eval_like("sweep-alpha", cmd_sweep, "evaluate over a list of inner-iteration counts")
    s.add_argument("--alphas", default="0,2,4,6,8")
    s.add_argument("--episodes", type=int)
    s.add_argument("--out", type=Path, default=Path("alpha_sweep"))

    s = sub.add_parser("ablate", help="train + evaluate the component grid")
    _add_config_flags(s, {"episodes": "--train-episodes"})
    s.add_argument("--rows", help=f"comma list from {','.join(ABLATION_ROWS)}")
    s.add_argument("--episodes", type=int, help="evaluation episodes per row")
    s.add_argument("--out", type=Path, default=Path("ablation"))
    s.set_defaults(func=cmd_ablate)

    s = eval_like("wsol-viz", cmd_wsol_viz, "write heatmap + box overlays")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--out", type=Path, default=Path("wsol_viz"))

    s = eval_like("expand-viz", cmd_expand_viz, "write the expanded support set of one episode as a grid")
    s.add_argument("--out", type=Path, default=Path("expanded.png"))

    s = sub.add_parser("synth-export", help="write a synthetic domain as <out>/<class>/*.png")
    s.add_argument("--family", default="A")
    s.add_argument("--split", default="train")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images-per-class", type=int, default=40)
    s.add_argument("--image-size", type=int, default=84)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError, ValueError, KeyError) as err:
        print(f"selftaught {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
