"""Command-line entry point: ``rddlab <subcommand> --config cfg.yaml ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from . import segmodel as sm
from .config import ExperimentConfig, dump_config, load_config
from .synth import dump_dataset

log = logging.getLogger("rddlab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    return cfg


def _teacher(cfg: ExperimentConfig, path: str | None) -> Path:
    if path:
        return Path(path)
    default = Path(cfg.output_dir) / "teacher" / f"seed_{cfg.teacher_seed}" / "teacher.ckpt"
    if default.exists():
        return default
    log.info("no teacher checkpoint given; pretraining one at %s", default.parent)
    return harness.pretrain_teacher(cfg)


def _parse_values(axis: str, raw: str | None):
    if raw is None:
        return None
    items = [v.strip() for v in raw.split(",") if v.strip()]
    return items if axis == "mode" else [float(v) for v in items]


def cmd_pretrain_teacher(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.teacher_seed
    out = Path(cfg.output_dir) / "teacher" / f"seed_{seed}"
    ckpt = harness.pretrain_teacher(cfg, seed, out)
    dump_config(cfg, out / "resolved_config.yaml")
    print(ckpt)
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    teacher = _teacher(cfg, args.teacher)
    for seed in cfg.seeds:
        rec = harness.distill(cfg, teacher, args.method, seed)
        print(f"{args.method} seed={seed} final_miou={rec.final_miou:.4f} run_dir={rec.run_dir}")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    teacher = _teacher(cfg, args.teacher)
    methods = [m.strip() for m in args.methods.split(",")]
    res = harness.compare_methods(cfg, teacher, methods)
    for row in res["table"]:
        print(f"{row['value']:>12}  median={row['median_miou']:.4f}  "
              f"min={row['min_miou']:.4f}  max={row['max_miou']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    teacher = _teacher(cfg, args.teacher)
    axes = [a.strip() for a in args.grid.split(",") if a.strip()]
    if len(axes) != 1:
        raise SystemExit(f"--grid takes exactly one axis, got {axes}")
    axis = axes[0]
    res = harness.ablate(cfg, teacher, {axis: _parse_values(axis, args.values)})
    for row in res["table"]:
        print(f"{axis}={row['value']!s:>7}  median={row['median_miou']:.4f}  "
              f"min={row['min_miou']:.4f}  max={row['max_miou']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = sm.load_checkpoint(args.checkpoint, requires_grad=False)
    ev = harness.evaluate(params, cfg)
    out = {"miou": ev["miou"], "pixel_acc": ev["pixel_acc"], "iou": [float(v) for v in ev["iou"]]}
    print(json.dumps(out, indent=2))
    return 0


def cmd_export_maps(args) -> int:
    cfg = _config(args)
    samples = [int(s) for s in args.samples.split(",")]
    out = args.out or str(Path(cfg.output_dir) / "maps")
    stats = harness.export_maps(cfg, args.teacher, args.student, samples, out, args.split)
    for s in stats:
        print(f"{args.split}_{s['index']}: TFE mean={s['TFE']['mean']:.4f}  "
              f"TSE active={s['TSE']['active_fraction']:.4f}")
    return 0


def cmd_dump_data(args) -> int:
    cfg = _config(args)
    dump_dataset(cfg.scene, args.split, args.count, args.out or Path(cfg.output_dir) / "data")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rddlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if seed:
            p.add_argument("--seed", type=int, help="run a single seed")

    p = sub.add_parser("pretrain-teacher", help="train the dual-head teacher")
    common(p)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    common(p)
    p.add_argument("--method", default="rdd", choices=harness.METHODS)
    p.add_argument("--teacher", help="teacher checkpoint (pretrained on demand if omitted)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("compare", help="run several methods over all seeds and summarise")
    common(p)
    p.add_argument("--methods", default="baseline_ce,kd_only,rdd")
    p.add_argument("--teacher")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="one-axis grid over p, t or mode")
    common(p)
    p.add_argument("--grid", required=True, help="axis to vary: p, t or mode")
    p.add_argument("--values", help="comma-separated grid values (built-in grid if omitted)")
    p.add_argument("--teacher")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-maps", help="write difficulty/confidence maps for samples")
    common(p, seed=False)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--samples", default="0,1,2,3")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("dump-data", help="write synthetic samples as PNG/PGM")
    common(p, seed=False)
    p.add_argument("--split", default="train", choices=["train", "val"])
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(func=cmd_dump_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
