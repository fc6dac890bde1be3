"""``kinemo`` command line: synth, train-gnn, train-feas, predict, eval, export.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit, geometry, synthdata
from .config import Config
from .dataset import load_split
from .io import annotations_to_dict, load_annotations, load_shape, save_annotations, shape_to_dict
from .refinement import AxisRefiner, extract_mobility_tree, merge_fixed_siblings

THREADS_ENV = "KINEMO_THREADS"


class UsageError(Exception):
    pass


def _load_config(args):
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    for key, dotted in (("seed", None), ("epochs", None), ("mode", "gnn.mode"), ("n_points", "gnn.n_points"),
                        ("batch_size", None), ("lr", None)):
        val = getattr(args, key, None)
        if val is None:
            continue
        if dotted:
            overrides[dotted] = val
        else:
            section = {"train_gnn": "gnn", "train_feas": "feas", "synth": "synth"}.get(args.command_key, "gnn")
            overrides[f"{section}.{key}"] = val
    return cfg.override(overrides) if overrides else cfg


def _write_curve(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_loss"])
        for epoch, loss, val in history:
            w.writerow([epoch, repr(float(loss)), "" if np.isnan(val) else repr(float(val))])


def _curve_path(args):
    return Path(args.curve) if args.curve else Path(args.out).with_suffix(".csv")


# ------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _load_config(args)
    cats = [c.strip() for c in args.categories.split(",") if c.strip()] if args.categories else list(synthdata.CATEGORIES)
    for c in cats:
        synthdata.get_spec(c)
    if args.count < 1:
        raise UsageError("--count must be positive")
    synthdata.gen_dataset(
        cats, args.count, cfg.synth.seed, args.out,
        points_per_leaf=args.points_per_leaf or cfg.synth.points_per_leaf,
        rotate_deg=cfg.synth.rotate_degrees,
        adjacency_eps=cfg.geometry.adjacency_eps,
        interaction_delta=cfg.geometry.interaction_delta,
    )
    print(f"wrote {len(cats) * args.count} shapes to {args.out}")
    return 0


def cmd_train_gnn(args):
    from .graphnet import MotionGNN

    cfg = _load_config(args)
    X, y = load_split(args.data, args.split)
    try:
        Xv, yv = load_split(args.data, "val")
    except (FileNotFoundError, KeyError):
        Xv = yv = None
    model = MotionGNN.from_config(cfg.gnn, adjacency_eps=cfg.geometry.adjacency_eps, verbose=args.verbose)
    model.fit(X, y, Xv or None, yv or None)
    model.save(args.out)
    _write_curve(_curve_path(args), model.history_)
    print(f"trained {model.n_parameters_} parameters for {len(model.history_)} epochs; "
          f"final loss {model.history_[-1][1]:.5f}" if model.history_ else "trained 0 epochs")
    return 0


def cmd_train_feas(args):
    from .feasibility import FeasibilityNet

    cfg = _load_config(args)
    X, y = load_split(args.data, args.split)
    try:
        Xv, yv = load_split(args.data, "val")
    except (FileNotFoundError, KeyError):
        Xv = yv = None
    model = FeasibilityNet.from_config(cfg.feas, verbose=args.verbose)
    model.fit(X, y, Xv or None, yv or None)
    model.save(args.out)
    _write_curve(_curve_path(args), model.history_)
    print(f"trained feasibility net on {len(X)} shapes for {len(model.history_)} epochs")
    return 0


def cmd_predict(args):
    from .feasibility import FeasibilityNet
    from .graphnet import MotionGNN

    cfg = _load_config(args)
    tau = cfg.refine.tau if args.tau is None else args.tau
    if not Path(args.gnn).exists():
        raise FileNotFoundError(f"model file {args.gnn} not found")
    gnn = MotionGNN.load(args.gnn)
    feas = None
    if args.refine == "obb":
        if not args.feas:
            raise UsageError("--refine obb needs --feas MODEL")
        if not Path(args.feas).exists():
            raise FileNotFoundError(f"model file {args.feas} not found")
        feas = FeasibilityNet.load(args.feas)
    shapes, _ = load_split(args.data, args.split, annotations=False)
    preds = gnn.predict(shapes)
    r = cfg.refine
    refiner = AxisRefiner(feas, r.w_f, r.w_d, r.w_p, tau, r.per_node_filter, r.position_scale, r.revolute_amount,
                          r.prismatic_amount, r.larger_part, cfg.geometry.interaction_delta,
                          refine=args.refine == "obb", seed=r.seed)
    refined = refiner.transform(shapes, preds)
    kept = refiner.filter(refined)
    out = Path(args.out)
    for item in refined:
        save_annotations(item.annotations, out / "predictions" / f"{item.shape.id}.json", use="pred")
    for item in kept:
        save_annotations(_pseudo_labels(item), out / "pseudo_labels" / f"{item.shape.id}.json", use="pred")
    summary = {
        "tau": tau,
        "refine": args.refine,
        "mode": gnn.mode,
        "total": len(refined),
        "kept": sorted(item.shape.id for item in kept),
        "scores": {item.shape.id: [n.score if n.score is not None else n.type_prob for n in item.tree.nodes]
                   for item in refined},
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"kept {len(kept)}/{len(refined)}")
    return 0


def _pseudo_labels(item):
    """Kept edges only: the tree's movable nodes (others are left unlabeled)."""
    from .types import AnnotationSet

    keep = set()
    for node in item.tree.nodes:
        keep.update((p, node.ref) for p in node.parts)
    return AnnotationSet(item.annotations.shape_id, [e for e in item.annotations.edges if e.key in keep])


def _prediction_dir(path):
    path = Path(path)
    return path / "predictions" if (path / "predictions").is_dir() else path


def cmd_eval(args):
    shapes, truth = load_split(args.data, args.split)
    pred_dir = _prediction_dir(args.pred)
    records = []
    missing = []
    for shape, gt in zip(shapes, truth):
        path = pred_dir / f"{shape.id}.json"
        if not path.exists():
            missing.append(shape.id)
            continue
        pred = load_annotations(path, as_pred=True)
        if pred.shape_id != shape.id:
            raise ValueError(f"{path}: prediction is for shape {pred.shape_id!r}, not {shape.id!r}")
        records.extend(evalkit.evaluate(shape, evalkit.attach_ground_truth(pred, gt)))
    report = evalkit.aggregate_report(records)
    evalkit.write_report(report, records, args.out, title=args.title)
    sys.stdout.write(evalkit.format_report(report, args.title))
    if missing:
        print(f"error: no prediction for {len(missing)} shape(s): {', '.join(missing[:5])}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------- export


PALETTE = [
    (0.6, 0.6, 0.6), (0.85, 0.25, 0.2), (0.2, 0.55, 0.85), (0.3, 0.7, 0.3),
    (0.9, 0.65, 0.1), (0.6, 0.3, 0.75), (0.1, 0.7, 0.7), (0.8, 0.4, 0.6),
]


def export_obj(shape, preds, obj_path):
    """Write part points grouped by mobility group, plus one polyline per movable node."""
    obj_path = Path(obj_path)
    tree = merge_fixed_siblings(extract_mobility_tree(shape, preds), preds, shape)
    group = {}
    for k, node in enumerate(tree.nodes, start=1):
        for p in node.parts:
            for leaf in shape.leaves_under(p):
                group[leaf] = k
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    mtl_path = obj_path.with_suffix(".mtl")
    n_groups = len(tree.nodes) + 1
    with open(mtl_path, "w", encoding="utf-8") as fh:
        for k in range(n_groups):
            r, g, b = PALETTE[k % len(PALETTE)]
            fh.write(f"newmtl group_{k}\nKd {r:.3f} {g:.3f} {b:.3f}\n\n")
    lines = [f"# {shape.id}", f"mtllib {mtl_path.name}"]
    v = 0
    for nid in shape.bottom_up():
        node = shape[nid]
        if not node.is_leaf:
            continue
        lines.append(f"g {nid}")
        lines.append(f"usemtl group_{group.get(nid, 0)}")
        start = v + 1
        for x, y, z in node.points:
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f}")
            v += 1
        lines.append("p " + " ".join(str(i) for i in range(start, v + 1)))
    for k, node in enumerate(tree.nodes, start=1):
        params = node.params
        pts = np.concatenate([shape.part_points(p) for p in node.parts])
        center = pts.mean(axis=0)
        d = np.array(params.dir)
        anchor = np.array(params.pos) if params.pos is not None else center
        anchor = geometry.Line(d, anchor).closest_point(center)
        half = 0.5 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        a, b = anchor - half * d, anchor + half * d
        lines.append(f"g axis_{'_'.join(node.parts)}")
        lines.append(f"usemtl group_{k}")
        lines.append(f"v {a[0]:.6f} {a[1]:.6f} {a[2]:.6f}")
        lines.append(f"v {b[0]:.6f} {b[1]:.6f} {b[2]:.6f}")
        v += 2
        lines.append(f"l {v - 1} {v}")
    with open(obj_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return obj_path


def cmd_export(args):
    shape = load_shape(args.shape)
    preds = load_annotations(args.pred, as_pred=True)
    if preds.shape_id != shape.id:
        raise ValueError(f"prediction is for shape {preds.shape_id!r}, not {shape.id!r}")
    export_obj(shape, preds, args.out)
    if args.with_obb:
        shape_out = Path(args.out).with_suffix(".shape.json")
        doc = shape_to_dict(geometry.with_obbs(shape), with_obb=True)
        with open(shape_out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="kinemo", description="Kinematic motion prediction for segmented shapes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--categories", help=f"comma-separated subset of {','.join(synthdata.CATEGORIES)}")
    s.add_argument("--count", type=int, required=True, help="shapes per category")
    s.add_argument("--seed", type=int)
    s.add_argument("--points-per-leaf", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth, command_key="synth")

    for name, func, key, what in (("train-gnn", cmd_train_gnn, "train_gnn", "graph network"),
                                  ("train-feas", cmd_train_feas, "train_feas", "feasibility network")):
        t = sub.add_parser(name, help=f"train the {what}")
        t.add_argument("--data", required=True, help="dataset directory")
        t.add_argument("--out", required=True, help="model JSON to write")
        t.add_argument("--curve", help="training-curve CSV (default: next to the model)")
        t.add_argument("--split", default="train")
        t.add_argument("--epochs", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--lr", type=float)
        if key == "train_gnn":
            t.add_argument("--mode", choices=["fine", "coarse"])
            t.add_argument("--n-points", dest="n_points", type=int)
        t.add_argument("--config")
        t.add_argument("--verbose", action="store_true")
        t.set_defaults(func=func, command_key=key)

    pr = sub.add_parser("predict", help="predict, refine and filter pseudo-labels")
    pr.add_argument("--data", required=True, help="dataset directory (shapes/ and optional manifest)")
    pr.add_argument("--gnn", required=True, help="graph-network model JSON")
    pr.add_argument("--feas", help="feasibility model JSON (required with --refine obb)")
    pr.add_argument("--refine", choices=["obb", "none"], default="obb")
    pr.add_argument("--tau", type=float)
    pr.add_argument("--split", default="test")
    pr.add_argument("--out", required=True)
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_predict, command_key="predict")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--pred", required=True, help="predict output directory or a directory of prediction JSONs")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="directory for report.json and report.txt")
    e.add_argument("--title", default="motion prediction")
    e.set_defaults(func=cmd_eval, command_key="eval")

    x = sub.add_parser("export", help="write an OBJ with part points and predicted axes")
    x.add_argument("--shape", required=True)
    x.add_argument("--pred", required=True, help="prediction JSON for the shape")
    x.add_argument("--out", required=True, help="OBJ path")
    x.add_argument("--with-obb", action="store_true", help="also write the shape JSON with part boxes")
    x.set_defaults(func=cmd_export, command_key="export")
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
