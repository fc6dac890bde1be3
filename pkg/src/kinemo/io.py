"""Shape / annotation JSON serialization and hierarchy validation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import (
    AnnotationSet,
    MotionParams,
    MotionType,
    Normalization,
    PartNode,
    Refinement,
    Shape,
    SiblingEdge,
    parse_type,
)

SHAPE_KEYS = {"id", "category", "up_axis", "nodes", "root"}
SHAPE_REQUIRED = {"id", "category", "nodes", "root"}
NODE_KEYS = {"id", "label", "children", "points", "obb"}
ANNOTATION_KEYS = {"shape_id", "edges"}
EDGE_KEYS = {"src", "ref", "type", "dir", "pos"}
PSEUDO_EDGE_KEYS = {"score", "s_f", "s_d", "s_p", "candidate_source", "logits"}


class SchemaError(ValueError):
    """Malformed or non-conforming JSON document."""


class ShapeValidationError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    node_id: str
    message: str

    def __str__(self):
        return f"{self.node_id}: {self.message}"


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc})") from exc


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------- shapes


def shape_from_dict(doc, normalize=True):
    """Parse a shape document; raises SchemaError / ShapeValidationError."""
    from .geometry import OBB

    _check_keys(doc, SHAPE_KEYS, SHAPE_REQUIRED, "shape")
    if not isinstance(doc["nodes"], list):
        raise SchemaError("shape.nodes must be a list")
    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        _check_keys(nd, NODE_KEYS, {"id", "children"}, f"nodes[{i}]")
        pts = nd.get("points")
        if pts is not None:
            pts = np.asarray(pts, dtype=float).reshape(-1, 3) if len(pts) else np.zeros((0, 3))
        obb = OBB.from_dict(nd["obb"]) if nd.get("obb") is not None else None
        nodes.append(
            PartNode(
                id=str(nd["id"]),
                label=str(nd.get("label", "")),
                children=tuple(str(c) for c in nd["children"]),
                points=pts,
                obb=obb,
            )
        )
    shape = Shape(
        id=str(doc["id"]),
        category=str(doc["category"]),
        root=str(doc["root"]),
        nodes=nodes,
        up_axis=tuple(doc.get("up_axis") or (0.0, 0.0, 1.0)),
    )
    problems = validate_hierarchy(shape, check_bounds=False)
    if problems:
        raise ShapeValidationError(problems)
    if normalize:
        shape = normalize_shape(shape)
        problems = validate_hierarchy(shape)
        if problems:
            raise ShapeValidationError(problems)
    return shape


def load_shape(path, normalize=True):
    """Load, validate and (by default) normalize a shape file."""
    return shape_from_dict(_read_json(path), normalize=normalize)


def shape_to_dict(shape, with_obb=False, raw=False):
    """Serialize; ``raw`` maps points back through the recorded normalization."""
    nodes = []
    for n in shape.nodes:
        nd = {"id": n.id, "label": n.label, "children": list(n.children)}
        if n.points is not None:
            pts = shape.normalization.invert(n.points) if raw else n.points
            nd["points"] = np.asarray(pts).tolist()
        if with_obb and n.obb is not None:
            nd["obb"] = n.obb.to_dict()
        nodes.append(nd)
    return {
        "id": shape.id,
        "category": shape.category,
        "up_axis": list(shape.up_axis),
        "nodes": nodes,
        "root": shape.root,
    }


def save_shape(shape, path, with_obb=False):
    _write_json(shape_to_dict(shape, with_obb=with_obb), path)


def normalize_shape(shape):
    """Uniformly scale so the longest extent is 1 and center in the unit cube.

    Composes with any normalization already recorded on the shape, so the
    stored transform always maps back to the original file coordinates.
    """
    leaves = [n.points for n in shape.nodes if n.points is not None and len(n.points)]
    if not leaves:
        return shape
    allp = np.concatenate(leaves, axis=0)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0:
        raise ShapeValidationError([Violation(shape.root, "shape has zero extent")])
    step = Normalization(center=tuple((lo + hi) / 2.0), scale=1.0 / longest)
    nodes = []
    for n in shape.nodes:
        pts = None if n.points is None else np.clip(step.apply(n.points), 0.0, 1.0)
        nodes.append(PartNode(n.id, n.label, n.children, pts, None))
    prev = shape.normalization
    # normalized = (prev(raw) - c2) * s2 + 0.5 = (raw - c1') * s1*s2 + 0.5
    scale = prev.scale * step.scale
    center = tuple(np.array(prev.invert(np.array(step.center))))
    return Shape(shape.id, shape.category, shape.root, nodes, shape.up_axis, Normalization(center, scale))


def _affinely_independent(pts):
    if len(pts) < 4:
        return False
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[-1] > 1e-9 * max(sv[0], 1e-12)


def validate_hierarchy(shape, check_bounds=True):
    """List every violated shape invariant; empty when the shape is valid."""
    out = []
    seen = {}
    for n in shape.nodes:
        if n.id in seen:
            out.append(Violation(n.id, "duplicate node id"))
        seen[n.id] = n
    if shape.root not in seen:
        out.append(Violation(shape.root, "root node missing"))
        return out

    parents = {}
    for n in seen.values():
        for c in n.children:
            if c not in seen:
                out.append(Violation(n.id, f"unknown child {c!r}"))
                continue
            if c == shape.root:
                out.append(Violation(c, f"cycle: root listed as child of {n.id!r}"))
            elif c in parents and parents[c] != n.id:
                out.append(Violation(c, f"multiple parents {parents[c]!r} and {n.id!r}"))
            parents.setdefault(c, n.id)

    # reachability and cycles from the root
    state, stack = {}, [(shape.root, 0)]
    while stack:
        nid, phase = stack.pop()
        if phase == 1:
            state[nid] = 2
            continue
        if state.get(nid) == 1:
            out.append(Violation(nid, "cycle"))
            continue
        if state.get(nid) == 2:
            continue
        state[nid] = 1
        stack.append((nid, 1))
        for c in seen[nid].children:
            if c not in seen or c == shape.root:
                continue
            if state.get(c) == 1:
                out.append(Violation(c, "cycle"))
            elif state.get(c) is None:
                stack.append((c, 0))
    for nid in seen:
        if nid not in state:
            out.append(Violation(nid, "orphan node (unreachable from root)"))

    for n in seen.values():
        if n.children and n.points is not None:
            out.append(Violation(n.id, "internal node carries points"))
        if not n.children:
            if n.points is None or len(n.points) == 0:
                out.append(Violation(n.id, "leaf without points"))
            elif not np.all(np.isfinite(n.points)):
                out.append(Violation(n.id, "non-finite point coordinates"))
            elif not _affinely_independent(n.points):
                out.append(Violation(n.id, "leaf needs at least 4 non-coplanar points"))
            elif check_bounds and (n.points.min() < -1e-9 or n.points.max() > 1 + 1e-9):
                out.append(Violation(n.id, "points outside the unit cube"))
    return out


# ----------------------------------------------------------- annotations


def _params_to_dict(params):
    d = {"type": params.mtype.value}
    if params.dir is not None:
        d["dir"] = list(params.dir)
    if params.pos is not None:
        d["pos"] = list(params.pos)
    return d


def annotations_to_dict(aset, use="gt"):
    """Serialize; ``use`` selects the ``gt`` or ``pred`` params of each edge."""
    edges = []
    for e in aset.edges:
        params = e.gt if use == "gt" else e.pred
        if params is None:
            raise ValueError(f"edge {e.key} has no {use} params")
        d = {"src": e.src, "ref": e.ref}
        d.update(_params_to_dict(params))
        if use == "pred" and e.refinement is not None:
            r = e.refinement
            d.update(score=r.score, s_f=r.s_f, s_d=r.s_d, s_p=r.s_p, candidate_source=r.candidate_source)
        if use == "pred" and e.pred_logits is not None:
            d["logits"] = list(e.pred_logits)
        edges.append(d)
    return {"shape_id": aset.shape_id, "edges": edges}


def annotations_from_dict(doc, as_pred=False):
    _check_keys(doc, ANNOTATION_KEYS, ANNOTATION_KEYS, "annotation")
    edges = []
    for i, ed in enumerate(doc["edges"]):
        allowed = EDGE_KEYS | (PSEUDO_EDGE_KEYS if as_pred else set())
        _check_keys(ed, allowed, {"src", "ref", "type"}, f"edges[{i}]")
        mtype = parse_type(ed["type"]) if as_pred else MotionType.parse(ed["type"])
        params = MotionParams(mtype, ed.get("dir"), ed.get("pos"))
        if as_pred:
            ref = None
            if "score" in ed:
                ref = Refinement(ed["score"], ed["s_f"], ed["s_d"], ed.get("s_p"), ed["candidate_source"])
            edges.append(SiblingEdge(str(ed["src"]), str(ed["ref"]), pred=params,
                                     pred_logits=ed.get("logits"), refinement=ref))
        else:
            edges.append(SiblingEdge(str(ed["src"]), str(ed["ref"]), gt=params))
    return AnnotationSet(str(doc["shape_id"]), edges)


def save_annotations(aset, path, use="gt"):
    _write_json(annotations_to_dict(aset, use=use), path)


def load_annotations(path, as_pred=False):
    return annotations_from_dict(_read_json(path), as_pred=as_pred)


def validate_annotations(aset, shape):
    """Violations for edges referencing unknown parts or non-siblings."""
    out = []
    if aset.shape_id != shape.id:
        out.append(Violation(shape.id, f"annotation is for shape {aset.shape_id!r}"))
    parents = shape.parent_of
    for e in aset.edges:
        for pid in (e.src, e.ref):
            if pid not in shape:
                out.append(Violation(pid, "edge references unknown part"))
        if e.src in shape and e.ref in shape and parents.get(e.src) != parents.get(e.ref):
            out.append(Violation(e.src, f"edge partner {e.ref!r} is not a sibling"))
    return out


def _map_params(params, norm, forward):
    if params is None or params.pos is None:
        return params
    fn = norm.apply if forward else norm.invert
    return MotionParams(params.mtype, params.dir, tuple(fn(np.array(params.pos))))


def map_annotations(aset, norm, forward=True):
    """Move pivot positions into (``forward``) or out of normalized space.

    Uniform scaling leaves directions untouched.
    """
    if norm.is_identity:
        return aset
    edges = [
        SiblingEdge(e.src, e.ref, _map_params(e.gt, norm, forward), _map_params(e.pred, norm, forward),
                    e.pred_logits, e.refinement)
        for e in aset.edges
    ]
    return AnnotationSet(aset.shape_id, edges)
