"""Axis metrics and per-category report tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo


class MetricError(ValueError):
    pass


def angle_error(gt_dir, pred_dir):
    """Undirected angle between two axes in degrees, in [0, 90]."""
    try:
        return geo.angle_between_axes(gt_dir, pred_dir)
    except geo.GeometryError as exc:
        raise MetricError(str(exc)) from None


def axis_distance_error(gt, pred, gt_type=None):
    """Line-to-line distance; undefined for prismatic ground truth."""
    if gt_type is not None and gt_type.is_prismatic:
        raise MetricError("no pivot for prismatic joints")
    return geo.line_to_line_distance(gt, pred)


def type_matches(gt_type, pred_type):
    """Exact match, or coarse match when the prediction is a coarse type."""
    if type(pred_type) is type(gt_type):
        return pred_type is gt_type
    return gt_type.coarse is pred_type


@dataclass(frozen=True)
class EvalRecord:
    shape_id: str
    category: str
    edge: str
    gt_type: str
    pred_type: str
    type_correct: bool
    angle_err_deg: float | None
    dist_err: float | None


def evaluate_edge(shape_id, category, edge, fallback_pivot=None):
    """Record for a directed edge with both ``gt`` and ``pred`` set.

    Axis errors are filled when the ground truth is mobile. A prediction
    without an axis counts as 90 degrees and no distance; a prediction
    without a pivot (prismatic) is placed through ``fallback_pivot``,
    normally the movable part's centroid.
    """
    gt, pred = edge.gt, edge.pred
    angle = dist = None
    if gt.mtype.is_mobile:
        angle = 90.0 if pred.dir is None else angle_error(gt.dir, pred.dir)
        point = pred.pos if pred.pos is not None else fallback_pivot
        if gt.mtype.has_pivot and pred.dir is not None and point is not None:
            dist = axis_distance_error(geo.Line(gt.dir, gt.pos), geo.Line(pred.dir, point), gt.mtype)
    return EvalRecord(shape_id, category, f"{edge.src}->{edge.ref}", gt.mtype.value, pred.mtype.value,
                      type_matches(gt.mtype, pred.mtype), angle, dist)


def attach_ground_truth(preds, truth):
    """Copy ``gt`` from ``truth`` onto the matching edges of ``preds``.

    Ground-truth edges missing from the prediction (for instance because a
    contact was not detected) are added with an immobile ``None``
    prediction so they still count.
    """
    from .types import AnnotationSet, MotionParams, MotionType, SiblingEdge

    if preds.shape_id != truth.shape_id:
        raise MetricError(f"prediction for {preds.shape_id!r} paired with truth for {truth.shape_id!r}")
    gt = truth.edge_map()
    edges = [SiblingEdge(e.src, e.ref, gt[e.key].gt if e.key in gt else MotionParams(MotionType.NONE),
                         e.pred, e.pred_logits, e.refinement) for e in preds.edges]
    have = {e.key for e in preds.edges}
    edges += [SiblingEdge(e.src, e.ref, e.gt, MotionParams(MotionType.NONE)) for e in truth.edges if e.key not in have]
    return AnnotationSet(preds.shape_id, edges)


def evaluate(shape, annotations):
    """Records for every edge of a prediction set that also carries ground truth."""
    out = []
    for e in annotations.edges:
        if e.gt is None or e.pred is None:
            continue
        pivot = shape.part_points(e.src).mean(axis=0) if e.src in shape else None
        out.append(evaluate_edge(shape.id, shape.category, e, pivot))
    return out


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _median(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def _summary(records):
    return {
        "mean_angle_deg": _mean([r.angle_err_deg for r in records]),
        "median_angle_deg": _median([r.angle_err_deg for r in records]),
        "mean_dist": _mean([r.dist_err for r in records]),
        "median_dist": _median([r.dist_err for r in records]),
        "type_accuracy": _mean([float(r.type_correct) for r in records]),
        "n_edges": len(records),
        "n_axis": sum(r.angle_err_deg is not None for r in records),
        "n_pivot": sum(r.dist_err is not None for r in records),
    }


def aggregate_report(records, by="category"):
    """Per-group means over defined values plus an overall row.

    Type accuracy is measured over every record; axis errors only over
    records where they are defined.
    """
    if not records:
        return {"rows": {}, "overall": None}
    groups = {}
    for r in records:
        groups.setdefault(getattr(r, by), []).append(r)
    rows = {k: _summary(groups[k]) for k in sorted(groups)}
    return {"rows": rows, "overall": _summary(records)}


def _fmt(v, digits):
    return "-" if v is None else f"{v:.{digits}f}"


def format_report(report, title="motion prediction"):
    """Aligned text table; undefined cells render as '-'."""
    head = f"{'category':<20} {'angle':>8} {'dist':>8} {'type acc':>9} {'edges':>6}"
    lines = [title, head, "-" * len(head)]
    items = list(report["rows"].items())
    if report["overall"] is not None:
        items.append(("mean", report["overall"]))
    for name, row in items:
        if name == "mean":
            lines.append("-" * len(head))
        lines.append(
            f"{name:<20} {_fmt(row['mean_angle_deg'], 2):>8} {_fmt(row['mean_dist'], 4):>8} "
            f"{_fmt(row['type_accuracy'], 3):>9} {row['n_edges']:>6d}"
        )
    return "\n".join(lines) + "\n"


def write_report(report, records, out_dir, title="motion prediction"):
    """``report.json`` (summary and raw records) and ``report.txt``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"report": report, "records": [asdict(r) for r in records]}
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(format_report(report, title))
    return out
