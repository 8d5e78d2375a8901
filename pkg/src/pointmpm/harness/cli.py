"""Command-line interface.

Subcommands: gen-data, train-dvae, pretrain, finetune, fewshot, gradcheck,
eval. Exit code 0 on success; on failure a single machine-readable line
`error=<Type> message="..."` goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import Config, ConfigError, PRESETS, preset
from .data import GenSpec, gen_synthetic, load_dataset, write_dataset
from .gradcheck import MODULE_TOLERANCE, run_gradchecks
from .training import (eval_checkpoint, fewshot, finetune_classify, pretrain,
                       train_dvae)


def _add_common(sp, data=False, ckpt=False, ckpt_required=False, out=False,
                out_required=False):
    sp.add_argument("--config", type=Path, default=None,
                    help="config file (key=value lines); default: the preset")
    sp.add_argument("--preset", default="desk", choices=sorted(PRESETS),
                    help="base config preset when --config is absent")
    sp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config key (repeatable)")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")
    if data:
        sp.add_argument("--data", type=Path, required=True,
                        help="dataset directory (containing manifest.txt) or manifest path")
    if ckpt:
        sp.add_argument("--ckpt", type=Path, required=ckpt_required,
                        help="input checkpoint path")
    if out:
        sp.add_argument("--out", type=Path, required=out_required,
                        help="output directory for checkpoints and metrics logs")


def _resolve_config(args) -> Config:
    cfg = preset(args.preset) if args.config is None else Config.from_file(args.config)
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    return cfg


def _ensure_out(args):
    if getattr(args, "out", None):
        args.out.mkdir(parents=True, exist_ok=True)
        return args.out
    return None


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _ensure_out(args)
    spec = GenSpec(classes=tuple(args.classes.split(",")),
                   train_per_class=args.train_per_class,
                   test_per_class=args.test_per_class,
                   n_points=cfg.n_points)
    ds = gen_synthetic(spec, cfg.seed)
    manifest = write_dataset(ds, out)
    print(f"manifest={manifest} clouds={len(ds)} classes={len(spec.classes)}")
    return 0


def cmd_train_dvae(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data)
    out = _ensure_out(args)
    _, records = train_dvae(cfg, ds, out_dir=out)
    last = records[-1]
    print(f"ckpt={out / 'dvae.ckpt'} epochs={len(records)} "
          f"recon={last['recon']} kl={last['kl']}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data)
    dvae_ckpt = load_checkpoint(args.ckpt)
    out = _ensure_out(args)
    _, records = pretrain(cfg, ds, dvae_ckpt, out_dir=out)
    last = records[-1]
    print(f"ckpt={out / 'pretrain.ckpt'} epochs={len(records)} "
          f"mpm={last['mpm']} omega={last['omega']}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    out = _ensure_out(args)
    _, records, acc = finetune_classify(cfg, ds, ckpt=ckpt, out_dir=out)
    print(f"ckpt={out / 'finetune.ckpt'} epochs={len(records)} accuracy={acc}")
    return 0


def cmd_fewshot(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    out = _ensure_out(args)
    mean, std, _ = fewshot(cfg, ds, ckpt, way=args.way, shot=args.shot,
                           episodes=args.episodes, query_per_class=args.query_per_class,
                           out_dir=out)
    print(f"way={args.way} shot={args.shot} episodes={args.episodes} "
          f"mean_accuracy={mean} std={std}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seed=_resolve_config(args).seed)
    worst = 0.0
    for name, err in results:
        status = "PASS" if err < MODULE_TOLERANCE else "FAIL"
        worst = max(worst, err)
        print(f"gradcheck {name} max_rel_err={err:.3e} {status}")
    if worst >= MODULE_TOLERANCE:
        print(f"gradcheck: worst {worst:.3e} exceeds {MODULE_TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    acc = eval_checkpoint(ckpt, ds)
    print(f"accuracy={acc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pointmpm",
        description="Masked point modeling with multi-choice token supervision at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic point-cloud dataset")
    _add_common(sp, out=True, out_required=True)
    sp.add_argument("--classes", default="sphere,cube,cylinder,torus",
                    help="comma-separated class names")
    sp.add_argument("--train-per-class", type=int, default=12)
    sp.add_argument("--test-per-class", type=int, default=8)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-dvae", help="train the dVAE tokenizer")
    _add_common(sp, data=True, out=True, out_required=True)
    sp.set_defaults(func=cmd_train_dvae)

    sp = sub.add_parser("pretrain", help="masked-patch pre-training (needs --ckpt from train-dvae)")
    _add_common(sp, data=True, ckpt=True, ckpt_required=True, out=True, out_required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="classification fine-tuning (--ckpt optional: from scratch without it)")
    _add_common(sp, data=True, ckpt=True, out=True, out_required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("fewshot", help="K-way m-shot episodes from a pre-trained checkpoint")
    _add_common(sp, data=True, ckpt=True, out=True)
    sp.add_argument("--way", type=int, default=2)
    sp.add_argument("--shot", type=int, default=10)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--query-per-class", type=int, default=20)
    sp.set_defaults(func=cmd_fewshot)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable component")
    _add_common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint on a dataset's test split")
    _add_common(sp, data=True, ckpt=True, ckpt_required=True)
    sp.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # one-line machine-readable failure
        msg = str(err).replace('"', "'").replace("\n", "; ")
        print(f'error={type(err).__name__} message="{msg}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
