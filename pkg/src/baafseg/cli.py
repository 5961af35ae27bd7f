"""Command-line entry point: ``baafseg <command> [flags]``.

Machine-readable output is ``key=value`` lines on stdout; every run first echoes
its resolved config. Failures print one ``error: <kind>: <message>`` line to
stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .data import PointCloud, SceneSpec, gen_synthetic, load_cloud, make_crops, save_cloud
from .diagnostics import compactness_ok, diagnose
from .metrics import Scores, evaluate
from .train import load_checkpoint, train_loop


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)


def _echo(pairs: dict) -> None:
    for key, value in pairs.items():
        print(f"{key}={value}")


def _echo_config(model_cfg, train_cfg=None) -> None:
    for line in C.dump_config(model_cfg, train_cfg).splitlines():
        key, _, value = line.partition(" = ")
        print(f"config.{key}={value}")


def _load_configs(path: str | None) -> tuple[C.ModelConfig, C.TrainConfig]:
    if path is None:
        return C.ModelConfig(), C.TrainConfig()
    return C.parse_config(Path(path).read_text())


def _labeled(cloud: PointCloud, path) -> PointCloud:
    if cloud.labels is None:
        raise CliError(f"{path}: cloud has no labels")
    return cloud


def _score_lines(s: Scores) -> list[str]:
    lines = [f"oa={s.oa:.6f}", f"macc={s.macc:.6f}", f"miou={s.miou:.6f}"]
    lines += [f"iou_{c}={v:.6f}" for c, v in enumerate(s.iou)]
    return lines


def _write_report(path, lines: list[str]) -> None:
    if path:
        Path(path).write_text("\n".join(lines) + "\n")


def _crops(cloud: PointCloud, train_cfg: C.TrainConfig):
    return make_crops(cloud, train_cfg.crops, min(train_cfg.crop_size, len(cloud)), train_cfg.seed)


# ---------------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> None:
    spec = SceneSpec(num_points=args.points, num_classes=args.classes, seed=args.seed)
    _echo({"points": spec.num_points, "classes": spec.num_classes, "seed": spec.seed, "out": args.out})
    cloud = gen_synthetic(spec)
    save_cloud(cloud, args.out, args.format)
    _echo({"written": len(cloud)})


def cmd_train(args) -> None:
    model_cfg, train_cfg = _load_configs(args.config)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
        model_cfg = replace(model_cfg, seed=args.seed)
    cloud = _labeled(load_cloud(args.data, num_classes=model_cfg.num_classes), args.data)
    _echo_config(model_cfg, train_cfg)
    result = train_loop(model_cfg, train_cfg, _crops(cloud, train_cfg),
                        checkpoint=args.out_checkpoint, log_path=args.log)
    last = result.history[-1] if result.history else None
    _echo({"steps": result.steps, "checkpoint": args.out_checkpoint})
    if last:
        _echo({"final_loss": f"{last.loss:.6f}", "final_train_oa": f"{last.oa:.6f}"})


def cmd_eval(args) -> None:
    model, train_cfg = load_checkpoint(args.checkpoint)
    _echo_config(model.cfg, train_cfg)
    cloud = _labeled(load_cloud(args.data, num_classes=model.cfg.num_classes), args.data)
    pred = model.predict(cloud.positions, cloud.colors)
    lines = _score_lines(evaluate(cloud.labels, pred, model.cfg.num_classes))
    print("\n".join(lines))
    _write_report(args.report, lines)


def cmd_infer(args) -> None:
    model, train_cfg = load_checkpoint(args.checkpoint)
    _echo_config(model.cfg, train_cfg)
    cloud = load_cloud(getattr(args, "in"), num_classes=model.cfg.num_classes)
    pred = model.predict(cloud.positions, cloud.colors)
    Path(args.out_labels).write_text("".join(f"{int(p)}\n" for p in pred))
    _echo({"points": len(pred), "out_labels": args.out_labels})


def cmd_ablate(args) -> None:
    base, train_cfg = _load_configs(args.config)
    train_cfg = replace(train_cfg, epochs=args.epochs, seed=args.seed)
    base = replace(base, seed=args.seed)
    cloud = _labeled(load_cloud(args.data, num_classes=base.num_classes), args.data)
    crops = _crops(cloud, train_cfg)
    _echo_config(base, train_cfg)
    lines = ["variant oa miou"]
    for name in C.GRIDS[args.grid]:
        cfg = C.variant_config(name, base)
        model = train_loop(cfg, train_cfg, crops).model
        s = evaluate(cloud.labels, model.predict(cloud.positions, cloud.colors), cfg.num_classes)
        lines.append(f"{name} {s.oa:.6f} {s.miou:.6f}")
        print(f"ablate.{name}.oa={s.oa:.6f}")
        print(f"ablate.{name}.miou={s.miou:.6f}", flush=True)
    print("\n".join(lines))
    _write_report(args.report, lines)


def cmd_diagnose(args) -> None:
    model, train_cfg = load_checkpoint(args.checkpoint)
    _echo_config(model.cfg, train_cfg)
    cloud = load_cloud(args.data, num_classes=model.cfg.num_classes)
    rows = diagnose(model, cloud.positions, cloud.colors)
    lines = [r.line() for r in rows] + [f"compact={str(compactness_ok(rows)).lower()}"]
    print("\n".join(lines))
    _write_report(args.report, lines)


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="baafseg", description="Point-cloud semantic segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a labeled synthetic indoor scene")
    g.add_argument("--out", required=True, help="output cloud (.pcsb/.bin = binary, else text)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--format", choices=("text", "binary"), default=None, help="override suffix detection")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train on crops of one labeled cloud")
    t.add_argument("--config", help="key = value config file (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--log", help="per-epoch 'epoch, lr, loss, oa' lines")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--seed", type=int, help="override model and train seeds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="OA, mAcc, mIoU and per-class IoU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="one predicted label per input point")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", required=True)
    i.add_argument("--out-labels", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and score every variant of a grid")
    a.add_argument("--grid", required=True, choices=sorted(C.GRIDS))
    a.add_argument("--data", required=True)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--config", help="base config the variants modify")
    a.add_argument("--report")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="neighborhood compactness before and after offsets")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--report")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError, CliError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
