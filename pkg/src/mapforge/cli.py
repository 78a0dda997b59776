"""``mapforge`` command line.

Exit codes: 0 success, 2 unreadable/unwritable/malformed file (argparse
usage errors also exit 2), 3 inputs inconsistent with each other (scene ids,
capacity, dimensions), 4 optimization diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mapforge import attnbench, plotting
from mapforge.errors import CapacityExceeded, DivergenceDetected, GenerationFailed, ShapeMismatch
from mapforge.fit import FitConfig, ablate_modeling, ablate_one2many, ablation_config, fit_scene, to_predictions
from mapforge.metric import DEFAULT_THRESHOLDS, evaluate
from mapforge.raster import BEVGridSpec, Camera, project_to_pv, rasterize_bev, write_pgm
from mapforge.serialization import (
    FormatError,
    atomic_write,
    load_predictions,
    load_scene,
    load_scenes,
    save_predictions,
    save_scene,
)
from mapforge.synthetic import SceneRecipe, gen_scene

log = logging.getLogger("mapforge")

EXIT_OK, EXIT_IO, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _emit(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def _recipe_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene recipe")
    g.add_argument("--crossings", type=int, default=2)
    g.add_argument("--dividers", type=int, default=4)
    g.add_argument("--boundaries", type=int, default=2)
    g.add_argument("--centerlines", type=int, default=0)
    g.add_argument("--n-points", type=int, default=20)
    g.add_argument("--dim", type=int, choices=(2, 3), default=2)


def _recipe(a) -> SceneRecipe:
    return SceneRecipe(
        seed=a.seed,
        crossings=a.crossings,
        dividers=a.dividers,
        boundaries=a.boundaries,
        centerlines=a.centerlines,
        n_points=a.n_points,
        dim=a.dim,
    )


# ------------------------------------------------------------------ gen


def cmd_gen(a) -> int:
    out = Path(a.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create {out}: {exc}")
    base = _recipe(a)
    for i in range(a.scenes):
        scene = gen_scene(base.with_seed(a.seed + i))
        save_scene(out / f"scene_{a.seed + i:04d}.json", scene)
    print(f"wrote {a.scenes} scene(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ eval


def _format_table(res, thresholds) -> str:
    head = ["class"] + [f"AP@{t:g}" for t in thresholds] + ["mean"]
    lines = ["  ".join(f"{h:>13}" for h in head)]
    for cls, aps in res.per_threshold.items():
        vals = [aps[t] for t in res.thresholds] + [res.per_class[cls]]
        lines.append(f"{cls:>13}  " + "  ".join(f"{v:13.4f}" for v in vals))
    m = "nan" if np.isnan(res.mAP) else f"{res.mAP:.4f}"
    lines.append(f"{'mAP':>13}  {m:>13}")
    return "\n".join(lines) + "\n"


def cmd_eval(a) -> int:
    gts = load_scenes(a.gt)
    preds = load_predictions(a.pred)
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise CommandError(EXIT_MISMATCH, f"prediction scene ids not in ground truth: {', '.join(extra)}")
    flat = [p for sid in sorted(preds) for p in preds[sid]]
    res = evaluate(flat, {sid: list(s.elements) for sid, s in gts.items()}, a.thresholds)
    doc = json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n"
    sys.stdout.write(_format_table(res, res.thresholds))
    sys.stdout.write(doc)
    if a.json_out:
        atomic_write(a.json_out, doc)
    return EXIT_OK


# ------------------------------------------------------------------ fit


def cmd_fit(a) -> int:
    path = Path(a.gt)
    scene = load_scene(path)
    if len(scene) == 0:
        raise CommandError(EXIT_MISMATCH, "ground-truth scene has no elements to fit")
    if len({el.n for el in scene.elements}) != 1:
        raise CommandError(EXIT_MISMATCH, "all elements must have the same number of points")
    if len(scene) > a.queries:
        raise CommandError(EXIT_MISMATCH, f"{len(scene)} elements exceed {a.queries} query slots")
    if a.one2many_k and a.one2many_t < a.one2many_k * len(scene):
        raise CommandError(EXIT_MISMATCH, f"T={a.one2many_t} cannot hold K={a.one2many_k} x {len(scene)} targets")
    cfg = FitConfig(
        mode=a.mode,
        n_queries=a.queries,
        one2many_k=a.one2many_k,
        one2many_t=a.one2many_t if a.one2many_k else 0,
        lr=a.lr,
        iterations=a.iters,
        seed=a.seed,
        eval_every=a.eval_every,
        order_jitter=a.order_jitter,
    )
    trace = fit_scene(scene, cfg)
    if a.trace_out:
        _emit(a.trace_out, trace.to_csv())
    if a.pred_out:
        preds = to_predictions(trace.params.logits, trace.params.points, scene, path.stem)
        save_predictions(a.pred_out, {path.stem: preds})
    if a.figure_out:
        plotting.save_png(plotting.trace_figure(trace.rows, trace.snapshots, cfg.mode), a.figure_out)
    print(f"final mAP {trace.final_map:.4f} after {cfg.iterations} iterations ({cfg.mode})")
    return EXIT_OK


# ------------------------------------------------------------------ raster


def cmd_raster(a) -> int:
    scene = load_scene(a.gt)
    if a.bev:
        mask = rasterize_bev(scene, BEVGridSpec(scene.range, a.cell_size), a.line_width, a.fill)
    else:
        cam = Camera.front(
            fx=a.fx, width=a.width, height=a.height, height_m=a.cam_height, pitch_deg=a.pitch
        )
        mask = project_to_pv(scene, cam, a.line_width_px)
    write_pgm(a.out, mask)
    print(f"wrote {mask.shape[1]}x{mask.shape[0]} mask with {int(mask.sum())} foreground cells to {a.out}")
    return EXIT_OK


# ------------------------------------------------------------------ bench


def cmd_bench_attn(a) -> int:
    rows = attnbench.bench(a.ns, a.nv, a.d, a.reps, a.seed)
    _emit(a.out, attnbench.to_csv(rows, timing=not a.no_timing))
    if a.figure_out:
        plotting.save_png(plotting.bench_figure(rows), a.figure_out)
    return EXIT_OK


# ------------------------------------------------------------------ plot


def cmd_plot(a) -> int:
    scene = None
    sid = a.scene_id
    if a.gt:
        scene = load_scene(a.gt)
        sid = sid or Path(a.gt).stem
    preds = []
    if a.pred:
        by_scene = load_predictions(a.pred)
        if sid is None and len(by_scene) > 1:
            raise CommandError(EXIT_MISMATCH, "prediction file holds several scenes; pass --scene-id")
        if sid is None:
            preds = next(iter(by_scene.values()), [])
        elif by_scene and sid not in by_scene:
            raise CommandError(EXIT_MISMATCH, f"scene {sid!r} not in prediction file")
        else:
            preds = by_scene.get(sid, [])
    preds = [p for p in preds if p.score >= a.min_score]
    plotting.plot_scene_svg(scene, preds, a.out)
    return EXIT_OK


# ------------------------------------------------------------------ ablations


def cmd_ablate_modeling(a) -> int:
    seeds = range(a.seed, a.seed + a.seeds)
    overrides = dict(iterations=a.iters, lr=a.lr, eval_every=max(a.iters, 1))
    report = ablate_modeling(
        _recipe(a),
        seeds,
        ablation_config(mode="permutation_equivalent", **overrides),
        ablation_config(mode="fixed_order", **overrides),
    )
    summary = report.summary()
    if a.out:
        atomic_write(a.out, report.to_csv())
    if a.figure_out:
        groups = {c: v for c, v in summary["class_mean"].items()}
        groups["mAP"] = summary["mean_mAP"]
        plotting.save_png(plotting.bar_figure(groups, title="modeling ablation"), a.figure_out)
    sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate_one2many(a) -> int:
    if len(a.k) != len(a.t):
        raise CommandError(EXIT_MISMATCH, "--k and --t need the same number of entries")
    seeds = range(a.seed, a.seed + a.seeds)
    cfg = FitConfig(iterations=a.iters, lr=a.lr, eval_every=a.eval_every)
    report = ablate_one2many(_recipe(a), a.k, a.t, seeds, cfg, a.target_fraction)
    summary = report.summary()
    if a.out:
        atomic_write(a.out, report.to_csv())
    if a.figure_out:
        groups = {
            f"K={k}, T={t}": {"iterations to target": report.mean_iters(k)} for k, t in zip(report.ks, report.ts)
        }
        plotting.save_png(plotting.bar_figure(groups, ylabel="iterations"), a.figure_out)
    sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=1)
    _recipe_args(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="Chamfer AP of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="scene file or directory of scene files")
    e.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS)
    e.add_argument("--json-out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit", help="fit free query slots to a scene by gradient descent")
    f.add_argument("--gt", required=True)
    f.add_argument("--mode", default="perm_equiv", choices=("perm_equiv", "fixed_order", "permutation_equivalent"))
    f.add_argument("--queries", type=int, default=50)
    f.add_argument("--one2many-k", type=int, default=6)
    f.add_argument("--one2many-t", type=int, default=300)
    f.add_argument("--lr", type=float, default=FitConfig.lr)
    f.add_argument("--iters", type=int, default=FitConfig.iterations)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--eval-every", type=int, default=10)
    f.add_argument("--order-jitter", action="store_true", help="redraw each GT's stored order every iteration")
    f.add_argument("--trace-out")
    f.add_argument("--pred-out")
    f.add_argument("--figure-out", help="PNG of loss and mAP curves")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("raster", help="render a BEV or perspective mask as PGM")
    r.add_argument("--gt", required=True)
    view = r.add_mutually_exclusive_group(required=True)
    view.add_argument("--bev", action="store_true")
    view.add_argument("--pv", action="store_true")
    r.add_argument("--cell-size", type=float, default=0.3)
    r.add_argument("--line-width", type=float, default=None, help="BEV line width in metres")
    r.add_argument("--fill", action="store_true", help="fill closed polygons in BEV")
    r.add_argument("--fx", type=float, default=400.0)
    r.add_argument("--width", type=int, default=640)
    r.add_argument("--height", type=int, default=360)
    r.add_argument("--cam-height", type=float, default=1.5)
    r.add_argument("--pitch", type=float, default=0.0)
    r.add_argument("--line-width-px", type=float, default=2.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_raster)

    b = sub.add_parser("bench-attn", help="vanilla vs decoupled attention cost table")
    b.add_argument("--ns", type=_ints, default=(50, 75, 100, 125, 150))
    b.add_argument("--nv", type=int, default=20)
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-timing", action="store_true", help="leave the wall-time column empty")
    b.add_argument("--out", default="-")
    b.add_argument("--figure-out")
    b.set_defaults(func=cmd_bench_attn)

    pl = sub.add_parser("plot", help="SVG of ground truth and predictions")
    pl.add_argument("--gt")
    pl.add_argument("--pred")
    pl.add_argument("--scene-id")
    pl.add_argument("--min-score", type=float, default=0.0)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    am = sub.add_parser("ablate-modeling", help="permutation-equivalent vs fixed-order paired fits")
    am.add_argument("--seed", type=int, default=0)
    am.add_argument("--seeds", type=int, default=50)
    am.add_argument("--iters", type=int, default=FitConfig.iterations)
    am.add_argument("--lr", type=float, default=FitConfig.lr)
    _recipe_args(am)
    am.add_argument("--out", help="per-seed CSV")
    am.add_argument("--figure-out", help="PNG bar chart")
    am.set_defaults(func=cmd_ablate_modeling)

    ao = sub.add_parser("ablate-one2many", help="iterations to target mAP per auxiliary K")
    ao.add_argument("--seed", type=int, default=0)
    ao.add_argument("--seeds", type=int, default=30)
    ao.add_argument("--k", type=_ints, default=(0, 6))
    ao.add_argument("--t", type=_ints, default=(0, 300))
    ao.add_argument("--iters", type=int, default=FitConfig.iterations)
    ao.add_argument("--lr", type=float, default=FitConfig.lr)
    ao.add_argument("--eval-every", type=int, default=5)
    ao.add_argument("--target-fraction", type=float, default=0.9)
    _recipe_args(ao)
    ao.add_argument("--out", help="per-seed CSV")
    ao.add_argument("--figure-out", help="PNG bar chart")
    ao.set_defaults(func=cmd_ablate_one2many)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"mapforge: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceDetected as exc:
        print(f"mapforge: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, json.JSONDecodeError, UnicodeDecodeError, OSError) as exc:
        print(f"mapforge: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeMismatch, CapacityExceeded, GenerationFailed, ValueError) as exc:
        print(f"mapforge: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
