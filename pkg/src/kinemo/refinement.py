"""Mobility-tree extraction, box-prior axis selection and pseudo-label filtering.

The raw network predictions are pruned to movable parts, parts rigidly
attached to a movable sibling are merged into it, and every remaining
motion axis is snapped to the best-scoring candidate of the movable part's
box. Shapes whose every movable node scores above ``tau`` are kept as
pseudo-labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import geometry as geo
from .feasibility import make_pair_input
from .types import AnnotationSet, MotionParams, MotionType, Refinement, SiblingEdge

POSITION_SCALE = math.sqrt(3.0)


@dataclass(frozen=True)
class ScoreWeights:
    w_f: float = 0.5
    w_d: float = 0.3
    w_p: float = 0.2

    def __post_init__(self):
        w = (self.w_f, self.w_d, self.w_p)
        if min(w) < 0:
            raise ValueError("score weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"score weights must sum to 1, got {sum(w)}")


# --------------------------------------------------------------- scores


def direction_consistency(pred_dir, cand_dir):
    """|cos| of the angle between two axes."""
    a = geo._unit(pred_dir, "predicted direction")
    b = geo._unit(cand_dir, "candidate direction")
    return float(min(1.0, abs(a @ b)))


def position_consistency(pred, cand, scale=POSITION_SCALE):
    """1 minus the clamped, scaled distance of the candidate pivot to the predicted axis."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    d = geo.point_to_line_distance(cand.point, pred)
    return float(1.0 - min(max(d / scale, 0.0), 1.0))


def combined_score(s_f, s_d, s_p, w=ScoreWeights()):
    """Weighted sum; without a pivot term the other two weights are rescaled."""
    if s_p is None:
        return float((w.w_f * s_f + w.w_d * s_d) / (w.w_f + w.w_d))
    return float(w.w_f * s_f + w.w_d * s_d + w.w_p * s_p)


# --------------------------------------------------------- feasibility


class LearnedFeasibility:
    """Scores candidates with a trained :class:`FeasibilityNet`."""

    def __init__(self, net, revolute_amount=0.6, prismatic_amount=0.25, seed=0):
        self.net = net
        self.revolute_amount = revolute_amount
        self.prismatic_amount = prismatic_amount
        self.seed = seed

    def __call__(self, shape, edge, candidates, movable=None):
        mtype = edge.pred.mtype
        movable = shape.part_points(edge.src) if movable is None else movable
        reference = shape.part_points(edge.ref)
        amount = self.prismatic_amount if mtype.is_prismatic else self.revolute_amount
        # same subsample for every candidate so only the motion differs
        pairs = [make_pair_input(movable, reference, c, mtype, amount, self.seed,
                                 self.net.n_movable, self.net.n_reference) for c in candidates]
        return [float(s) for s in self.net.predict_proba(pairs)]


class OracleFeasibility:
    """1 for candidates matching the ground-truth axis, else 0."""

    def __init__(self, annotations, max_degrees=1.0, max_distance=0.02):
        self.truth = {}
        for aset in annotations:
            for e in aset.edges:
                self.truth[(aset.shape_id,) + e.key] = e.gt
        self.max_degrees = max_degrees
        self.max_distance = max_distance

    def __call__(self, shape, edge, candidates, movable=None):
        gt = self.truth.get((shape.id,) + edge.key)
        if gt is None or not gt.mtype.is_mobile:
            return [0.0] * len(candidates)
        out = []
        for c in candidates:
            ok = geo.angle_between_axes(gt.dir, c.line.dir) <= self.max_degrees
            if ok and gt.pos is not None:
                ok = geo.line_to_line_distance(geo.Line(gt.dir, gt.pos), c.line) <= self.max_distance
            out.append(1.0 if ok else 0.0)
        return out


class ConstantFeasibility:
    def __init__(self, value=1.0):
        self.value = value

    def __call__(self, shape, edge, candidates, movable=None):
        return [float(self.value)] * len(candidates)


# -------------------------------------------------------- axis selection


@dataclass(frozen=True)
class Selection:
    params: MotionParams
    score: float
    candidate: geo.CandidateAxis
    candidates: tuple


def generate_candidates(shape, src_points, ref_points, mtype, obb=None, interaction_delta=0.03):
    up = shape.up
    obb = obb or geo.compute_obb(src_points, up=up)
    pivot = None
    if mtype.pivot_location != "S" and not mtype.is_prismatic:
        pivot = geo.interaction_region(src_points, ref_points, interaction_delta)
    cands = geo.obb_candidate_axes(obb, up)
    return geo.filter_candidates_by_type(cands, mtype, obb, pivot, up), obb


def select_axis(edge, shape, scorer, weights=ScoreWeights(), movable_parts=None, obb=None,
                interaction_delta=0.03, position_scale=POSITION_SCALE):
    """Best box candidate for a mobile predicted edge.

    Ties on the combined score go to the higher feasibility score, then to
    the earlier candidate.
    """
    pred = edge.pred
    if pred is None or not pred.mtype.is_mobile:
        raise ValueError(f"edge {edge.key} has no mobile prediction")
    parts = movable_parts or (edge.src,)
    src_points = np.concatenate([shape.part_points(p) for p in parts])
    ref_points = shape.part_points(edge.ref)
    cands, obb = generate_candidates(shape, src_points, ref_points, pred.mtype, obb, interaction_delta)
    if not cands:
        raise RuntimeError(f"no candidate axes for edge {edge.key}")
    s_f = scorer(shape, edge, cands, src_points)
    pred_line = geo.Line(np.array(pred.dir), np.array(pred.pos if pred.pos is not None else obb.center))
    scored = []
    for c, f in zip(cands, s_f):
        s_d = direction_consistency(pred.dir, c.line.dir)
        s_p = position_consistency(pred_line, c.line, position_scale) if pred.mtype.has_pivot else None
        scored.append(c.scored(s_f=float(f), s_d=s_d, s_p=s_p, s=combined_score(f, s_d, s_p, weights)))
    best = max(range(len(scored)), key=lambda i: (scored[i].s, scored[i].s_f, -i))
    win = scored[best]
    d = geo.canonical_direction(win.line.dir, shape.up)
    pos = None
    if pred.mtype.has_pivot:
        pos = tuple(geo.Line(d, win.line.point).closest_point(obb.center))
    params = MotionParams(pred.mtype, tuple(d), pos)
    return Selection(params, win.s, win, tuple(scored))


# ------------------------------------------------------------ mobility tree


@dataclass(frozen=True)
class MobilityNode:
    parts: tuple               # sorted part ids moving together
    ref: str
    params: MotionParams
    edge: tuple                # (src, ref) edge that carried the motion
    type_prob: float = 1.0
    score: float | None = None
    refinement: Refinement | None = None


@dataclass(frozen=True)
class MobilityTree:
    shape_id: str
    nodes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        seen = set()
        for n in self.nodes:
            if not n.parts:
                raise ValueError("mobility node without parts")
            if seen & set(n.parts):
                raise ValueError("mobility nodes must have disjoint parts")
            seen |= set(n.parts)

    @property
    def part_sets(self):
        return [set(n.parts) for n in self.nodes]

    def node_of(self, part_id):
        for n in self.nodes:
            if part_id in n.parts:
                return n
        return None

    @property
    def scores(self):
        return [n.score for n in self.nodes]


def _pred_prob(edge):
    probs = edge.type_probs
    if probs is None:
        return 1.0
    return float(np.max(probs))


def _pred_index(edge):
    return edge.pred.mtype.index


def extract_mobility_tree(shape, preds):
    """One node per movable part; competing mobile edges keep the most probable."""
    edges = preds.edges if isinstance(preds, AnnotationSet) else preds
    best = {}
    for order, e in enumerate(edges):
        if e.pred is None or not e.pred.mtype.is_mobile:
            continue
        key = (-_pred_prob(e), _pred_index(e), order)
        if e.src not in best or key < best[e.src][0]:
            best[e.src] = (key, e)
    nodes = []
    for src in sorted(best, key=lambda s: best[s][0][2]):
        e = best[src][1]
        nodes.append(MobilityNode((e.src,), e.ref, e.pred, e.key, _pred_prob(e)))
    return MobilityTree(shape.id, nodes)


def _group_size(shape, parts, larger):
    pts = np.concatenate([shape.part_points(p) for p in parts])
    if larger == "points":
        return float(len(pts))
    return geo.compute_obb(pts, up=shape.up).volume


def merge_fixed_siblings(tree, preds, shape, larger="volume"):
    """Merge movable nodes joined by a Fixed edge that share a reference part.

    The merged node keeps the motion of the member with the larger box
    volume (or more points with ``larger="points"``).
    """
    edges = preds.edges if isinstance(preds, AnnotationSet) else preds
    nodes = list(tree.nodes)
    changed = True
    while changed:
        changed = False
        for e in edges:
            if e.pred is None or e.pred.mtype is not MotionType.FIXED:
                continue
            ia = next((i for i, n in enumerate(nodes) if e.src in n.parts), None)
            ib = next((i for i, n in enumerate(nodes) if e.ref in n.parts), None)
            if ia is None or ib is None or ia == ib or nodes[ia].ref != nodes[ib].ref:
                continue
            a, b = nodes[ia], nodes[ib]
            keep = a if _group_size(shape, a.parts, larger) >= _group_size(shape, b.parts, larger) else b
            merged = replace(keep, parts=tuple(sorted(set(a.parts) | set(b.parts))))
            nodes = [n for i, n in enumerate(nodes) if i not in (ia, ib)]
            nodes.insert(min(ia, ib), merged)
            changed = True
            break
    return MobilityTree(tree.shape_id, nodes)


# ------------------------------------------------------------ filtering


def filter_pseudo_labels(items, tau=0.6, per_node=False):
    """Keep ``(tree, shape)`` items whose node scores are all above ``tau``.

    Trees without movable nodes are never kept. With ``per_node`` the
    low-scoring nodes are dropped instead and a shape survives while any
    node remains.
    """
    kept = []
    for tree, shape in items:
        scores = [n.score if n.score is not None else n.type_prob for n in tree.nodes]
        if per_node:
            nodes = [n for n, s in zip(tree.nodes, scores) if s > tau]
            if nodes:
                kept.append((MobilityTree(tree.shape_id, nodes), shape))
        elif scores and all(s > tau for s in scores):
            kept.append((tree, shape))
    return kept


# ------------------------------------------------------------- pipeline


@dataclass
class RefinedShape:
    shape: object
    tree: MobilityTree
    annotations: AnnotationSet
    selections: dict = field(default_factory=dict)


def refine_shape(shape, preds, scorer=None, weights=ScoreWeights(), refine=True, larger="volume",
                 interaction_delta=0.03, position_scale=POSITION_SCALE):
    """Tree, refined edge predictions and per-node selections for one shape.

    With ``refine=False`` the tree keeps the raw network axes and node scores
    are the type probabilities.
    """
    tree = merge_fixed_siblings(extract_mobility_tree(shape, preds), preds, shape, larger)
    if not refine:
        return RefinedShape(shape, tree, preds)
    emap = preds.edge_map()
    nodes, selections, updates = [], {}, {}
    for node in tree.nodes:
        edge = emap[node.edge]
        sel = select_axis(edge, shape, scorer, weights, node.parts, None, interaction_delta, position_scale)
        c = sel.candidate
        ref = Refinement(sel.score, c.s_f, c.s_d, c.s_p, c.source.value)
        nodes.append(replace(node, params=sel.params, score=sel.score, refinement=ref))
        selections[node.edge] = sel
        for p in node.parts:
            key = (p, node.ref)
            if key in emap and (p == node.edge[0] or emap[key].pred.mtype.is_mobile):
                updates[key] = (sel.params, ref)
    edges = []
    for e in preds.edges:
        if e.key in updates:
            params, ref = updates[e.key]
            e = SiblingEdge(e.src, e.ref, e.gt, params, e.pred_logits, ref)
        edges.append(e)
    return RefinedShape(shape, MobilityTree(tree.shape_id, nodes), AnnotationSet(preds.shape_id, edges), selections)


class AxisRefiner(BaseEstimator):
    """Box-prior refinement and pseudo-label filtering as an estimator.

    ``transform(shapes, predictions)`` returns one :class:`RefinedShape`
    per input; ``filter`` applies the ``tau`` threshold.
    """

    def __init__(self, feasibility=None, w_f=0.5, w_d=0.3, w_p=0.2, tau=0.6, per_node_filter=False,
                 position_scale=POSITION_SCALE, revolute_amount=0.6, prismatic_amount=0.25,
                 larger_part="volume", interaction_delta=0.03, refine=True, seed=0):
        self.feasibility = feasibility
        self.w_f = w_f
        self.w_d = w_d
        self.w_p = w_p
        self.tau = tau
        self.per_node_filter = per_node_filter
        self.position_scale = position_scale
        self.revolute_amount = revolute_amount
        self.prismatic_amount = prismatic_amount
        self.larger_part = larger_part
        self.interaction_delta = interaction_delta
        self.refine = refine
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def _scorer(self):
        f = self.feasibility
        if f is None:
            return ConstantFeasibility(1.0)
        if callable(f):
            return f
        return LearnedFeasibility(f, self.revolute_amount, self.prismatic_amount, self.seed)

    def transform(self, shapes, predictions):
        if len(shapes) != len(predictions):
            raise ValueError("one prediction set per shape is required")
        if self.larger_part not in ("volume", "points"):
            raise ValueError(f"larger_part must be 'volume' or 'points', got {self.larger_part!r}")
        weights = ScoreWeights(self.w_f, self.w_d, self.w_p)
        scorer = self._scorer() if self.refine else None
        out = []
        for shape, preds in zip(shapes, predictions):
            if preds.shape_id != shape.id:
                raise ValueError(f"prediction for {preds.shape_id!r} paired with shape {shape.id!r}")
            out.append(refine_shape(shape, preds, scorer, weights, self.refine, self.larger_part,
                                    self.interaction_delta, self.position_scale))
        return out

    def filter(self, refined):
        kept = filter_pseudo_labels([(r.tree, r) for r in refined], self.tau, self.per_node_filter)
        return [r if t is r.tree else RefinedShape(r.shape, t, r.annotations, r.selections) for t, r in kept]
