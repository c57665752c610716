"""Command-line entry point: ``sqcarve {fit,render,export-mesh,eval,synth}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sqcarve")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
RUN_CONFIG_NAME = "run_config.toml"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sqcarve", description="Fit dual-superquadric abstractions to multi-view images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="optimise a primitive scene against a dataset")
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--config", type=Path)
    f.add_argument("--seed", type=int)
    f.add_argument("--iters", type=int)
    f.add_argument("--primitives", type=_positive_int, help="initial primitive count (default 100)")
    f.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")

    r = sub.add_parser("render", help="render a checkpoint from dataset cameras")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--views", default="all", help="'all' or comma-separated view indices")
    r.add_argument("--data", type=Path, help="dataset with the cameras (default: recorded by fit)")
    r.add_argument("--samples", type=_positive_int, default=128)

    e = sub.add_parser("export-mesh", help="export an OBJ of the active primitives")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--res", type=int, default=32)

    v = sub.add_parser("eval", help="Chamfer distance and compactness against a GT mesh")
    v.add_argument("--mesh", required=True, type=Path)
    v.add_argument("--gt", required=True, type=Path)
    v.add_argument("--samples", type=_positive_int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", type=Path, help="write the EvalReport JSON here")

    s = sub.add_parser("synth", help="render a synthetic dataset from known primitives")
    s.add_argument("--spec", required=True, help="JSON primitive list or a preset name")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--views", type=int, default=26)
    s.add_argument("--res", type=_positive_int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-normals", action="store_true")
    return p


def _fit(args) -> None:
    from .dataio import RunConfig, load_config, load_dataset, serialize_config
    from .trainer import fit, load_checkpoint

    run = load_config(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "iterations": args.iters, "k_init": args.primitives}
    train = dataclasses.replace(run.train, **{k: v for k, v in overrides.items() if v is not None})
    run = dataclasses.replace(run, train=train, data=str(args.data), out=str(args.out))
    dataset = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / RUN_CONFIG_NAME).write_text(serialize_config(run))
    resume = None
    if args.resume:
        resume = load_checkpoint(args.out / "checkpoint.json")
    result = fit(dataset, run.train, args.out, resume=resume)
    print(f"fit done: {result.scene.iteration} iterations, K={result.scene.num_primitives}, skipped={result.skipped_steps}")


def _parse_views(text: str, n: int) -> list[int]:
    if text == "all":
        return list(range(n))
    try:
        idx = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"--views must be 'all' or comma-separated integers, got {text!r}") from None
    bad = [i for i in idx if not 0 <= i < n]
    if bad or not idx:
        raise ValueError(f"view indices out of range 0..{n - 1}: {bad}")
    return idx


def _render(args) -> None:
    from .dataio import load_config, load_dataset
    from .render import normals_to_camera, render_image, save_mask, save_normals, save_rgb
    from .trainer import load_checkpoint

    scene = load_checkpoint(args.ckpt)
    data = args.data
    if data is None:
        cfg_path = args.ckpt.parent / RUN_CONFIG_NAME
        if not cfg_path.is_file():
            raise ValueError("no --data given and no run_config.toml next to the checkpoint")
        data = Path(load_config(cfg_path).data)
    dataset = load_dataset(data)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in _parse_views(args.views, len(dataset)):
        v = dataset.views[i]
        buf = render_image(scene, v.camera, n_samples=args.samples)
        save_rgb(args.out / f"{v.name}_rgb.png", buf.rgb)
        save_mask(args.out / f"{v.name}_mask.png", buf.mask)
        n = normals_to_camera(buf.normal, v.camera)
        save_normals(args.out / f"{v.name}_normal.png", n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12))
    print(f"rendered to {args.out}")


def _export(args) -> None:
    from .mesh import export_scene
    from .trainer import load_checkpoint

    if not 0.0 <= args.threshold <= 1.0:
        raise ValueError("--threshold must lie in [0, 1]")
    if args.res < 3:
        raise ValueError("--res must be >= 3")
    scene = load_checkpoint(args.ckpt)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    stats = export_scene(scene, args.threshold, args.res, args.out)
    print(f"exported {stats.num_primitives} primitives: V={stats.V} F={stats.F}")


def _eval(args) -> None:
    from .evaluation import evaluate_files

    for p in (args.mesh, args.gt):
        if not p.is_file():
            raise ValueError(f"mesh file not found: {p}")
    report = evaluate_files(args.mesh, args.gt, args.samples, args.seed)
    if args.report:
        report.save(args.report)
    print(report.summary())


def _synth(args) -> None:
    from .dataio import synth_dataset

    if args.views < 2:
        raise ValueError("--views must be >= 2")
    out = synth_dataset(args.spec, args.views, args.res, args.seed, args.out, with_normals=not args.no_normals)
    print(f"wrote {args.views} views to {out}")


COMMANDS = {"fit": _fit, "render": _render, "export-mesh": _export, "eval": _eval, "synth": _synth}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
