"""Procedural articulated shapes built from boxes, with exact joint labels.

Every joint is placed on an edge or centroid axis of the movable box (or
through the movable/reference interaction centroid) so the box prior can
recover it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .io import (
    ShapeValidationError,
    normalize_shape,
    save_annotations,
    save_shape,
    validate_hierarchy,
)
from .types import AnnotationSet, MotionParams, MotionType, PartNode, Shape, SiblingEdge

POINTS_PER_LEAF = 2000
SAMPLING_ATTEMPTS = 8
UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Box:
    """Box with center, half sizes along its local axes, and rotation rows."""

    center: np.ndarray
    half: np.ndarray
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def span(cls, lo, hi):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls((lo + hi) / 2.0, (hi - lo) / 2.0)

    def local_to_world(self, u):
        return self.center + np.asarray(u) @ self.axes

    def obb(self):
        return geo.OBB(self.center, self.axes, self.half)

    def sample_surface(self, n, rng):
        """Area-weighted uniform samples on the six faces."""
        h = self.half
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        local = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for k in range(3):
            i, j = [a for a in range(3) if a != k]
            m = axis == k
            local[m, k] = sign[m] * h[k]
            local[m, i] = uv[m, 0] * h[i]
            local[m, j] = uv[m, 1] * h[j]
        return self.center + local @ self.axes

    def edge_line(self, k, si, sj):
        """Line along local axis ``k`` at signs ``(si, sj)`` of the other two."""
        i, j = [a for a in range(3) if a != k]
        p = self.center + si * self.half[i] * self.axes[i] + sj * self.half[j] * self.axes[j]
        return geo.Line(self.axes[k], p)


@dataclass
class Blueprint:
    """Raw (unnormalized) layout produced by a category builder."""

    parts: dict            # leaf id -> Box
    labels: dict           # node id -> semantic label
    children: dict         # internal id -> list of child ids
    root: str
    joints: dict           # (src, ref) -> (MotionType, Line) in raw coords
    fixed: set             # frozenset({a, b}) pairs rigidly attached
    interaction: dict = field(default_factory=dict)  # (src, ref) -> True when pivot is the interaction centroid


@dataclass(frozen=True)
class CategorySpec:
    name: str
    builder: object
    mobile_parts: tuple = (1, 1)
    note: str = ""

    def build(self, rng):
        return self.builder(rng)


# --------------------------------------------------------------- builders


def _door_set(rng):
    W = rng.uniform(0.8, 1.0)
    H = rng.uniform(1.5, 1.9)
    D = rng.uniform(0.18, 0.24)
    j = rng.uniform(0.07, 0.1)
    head = rng.uniform(0.07, 0.1)
    t = rng.uniform(0.11, 0.15)
    x0, x1 = -W / 2 + j, W / 2 - j
    y0 = -D / 2
    parts = {
        "jamb_l": Box.span([-W / 2, -D / 2, 0.0], [x0, D / 2, H]),
        "jamb_r": Box.span([x1, -D / 2, 0.0], [W / 2, D / 2, H]),
        "head": Box.span([x0, -D / 2, H - head], [x1, D / 2, H]),
        "leaf": Box.span([x0, y0, 0.0], [x1, y0 + t, H - head]),
    }
    children = {"root": ["frame", "leaf"], "frame": ["jamb_l", "jamb_r", "head"]}
    fixed = {frozenset(p) for p in [("jamb_l", "head"), ("jamb_r", "head")]}
    if rng.uniform() < 0.6:
        hz = rng.uniform(0.4, 0.55) * H
        hx = x1 - rng.uniform(0.08, 0.14)
        parts["handle"] = Box.span([hx - 0.1, y0 - 0.05, hz - 0.02], [hx + 0.02, y0, hz + 0.02])
        children["root"].append("handle")
        fixed.add(frozenset(("leaf", "handle")))
    hinge = parts["leaf"].edge_line(2, -1.0, -1.0)
    labels = {"root": "door_set", "frame": "frame", "jamb_l": "jamb", "jamb_r": "jamb",
              "head": "head", "leaf": "door", "handle": "handle"}
    return Blueprint(parts, labels, children, "root", {("leaf", "frame"): (MotionType.R_V_S, hinge)}, fixed)


def _laptop(rng):
    W = 1.0
    D = rng.uniform(0.6, 0.75)
    b = rng.uniform(0.05, 0.07)
    kb = rng.uniform(0.012, 0.02)
    L = rng.uniform(0.55, 0.7)
    t = rng.uniform(0.065, 0.08)
    alpha = np.radians(rng.uniform(0.0, 10.0))
    parts = {
        "bottom": Box.span([-W / 2, -D / 2, 0.0], [W / 2, D / 2, b]),
        "keyboard": Box.span([-W / 2 + 0.06, -D / 2 + 0.2, b], [W / 2 - 0.06, D / 2 - 0.12, b + kb]),
    }
    u = np.array([0.0, np.sin(alpha), np.cos(alpha)])
    v = np.array([0.0, np.cos(alpha), -np.sin(alpha)])
    # the lid rests on the back strip of the base top so the parts share a face
    hinge_p = np.array([0.0, D / 2 - t, b])
    center = hinge_p + (L / 2) * u + (t / 2) * v
    parts["lid"] = Box(center, np.array([W / 2, L / 2, t / 2]), np.stack([[1.0, 0, 0], u, v]))
    hinge = geo.Line([1.0, 0.0, 0.0], hinge_p)
    children = {"root": ["base", "lid"], "base": ["bottom", "keyboard"]}
    fixed = {frozenset(("bottom", "keyboard"))}
    labels = {"root": "laptop", "base": "base", "bottom": "base_frame", "keyboard": "keyboard", "lid": "screen"}
    return Blueprint(parts, labels, children, "root", {("lid", "base"): (MotionType.R_H_S, hinge)}, fixed)


def _storage_furniture(rng):
    W = rng.uniform(0.7, 1.0)
    D = rng.uniform(0.4, 0.55)
    H = rng.uniform(0.9, 1.2)
    top = rng.uniform(0.03, 0.05)
    n_drawers = int(rng.integers(1, 4))
    with_door = bool(rng.uniform() < 0.5) or n_drawers == 1
    dd = rng.uniform(0.06, 0.09)
    parts = {
        "carcass": Box.span([-W / 2, -D / 2, 0.0], [W / 2, D / 2, H]),
        "top": Box.span([-W / 2 - 0.02, -D / 2 - 0.02, H], [W / 2 + 0.02, D / 2 + 0.02, H + top]),
    }
    labels = {"root": "storage_furniture", "body": "body", "carcass": "frame", "top": "countertop"}
    children = {"root": ["body"], "body": ["carcass", "top"]}
    fixed = {frozenset(("carcass", "top"))}
    joints = {}
    # drawers stay short and doors tall so the two are never confused by shape alone
    door_frac = rng.uniform(0.4, 0.55) if with_door else 0.0
    z_split = H * (1.0 - door_frac)
    h_max = min(0.22 * H, z_split / n_drawers)
    heights = rng.uniform(0.12 * H, h_max, size=n_drawers)
    z = 0.0
    for i, h in enumerate(heights):
        pid = f"drawer_{i + 1}"
        parts[pid] = Box.span([-W / 2 + 0.03, -D / 2 - dd, z], [W / 2 - 0.03, -D / 2, z + h])
        labels[pid] = "drawer"
        children["root"].append(pid)
        joints[(pid, "body")] = (MotionType.P_H, geo.Line([0.0, -1.0, 0.0], parts[pid].center))
        z += h
    if with_door:
        parts["door"] = Box.span([-W / 2 + 0.03, -D / 2 - dd, z_split], [W / 2 - 0.03, -D / 2, H])
        labels["door"] = "door"
        children["root"].append("door")
        joints[("door", "body")] = (MotionType.R_V_S, parts["door"].edge_line(2, -1.0, -1.0))
    return Blueprint(parts, labels, children, "root", joints, fixed)


def _scissors(rng):
    beta = np.radians(rng.uniform(12.0, 30.0))
    La = rng.uniform(0.9, 1.0)
    Lb = rng.uniform(0.8, 0.95)
    wa = rng.uniform(0.09, 0.12)
    wb = rng.uniform(0.09, 0.12)
    ta = rng.uniform(0.03, 0.04)
    tb = rng.uniform(0.03, 0.04)
    f = rng.uniform(0.3, 0.42)
    pivot = np.array([0.0, 0.0, 0.3])
    ea = np.array([np.cos(beta), 0.0, np.sin(beta)])
    eb = np.array([np.cos(beta), 0.0, -np.sin(beta)])
    y = np.array([0.0, 1.0, 0.0])
    # blade a in front (y < 0), blade b behind; the pivot splits each blade
    ca = pivot + (0.5 - f) * La * ea - (ta / 2) * y
    cb = pivot + (0.5 - f) * Lb * eb + (tb / 2) * y
    parts = {
        "blade_a": Box(ca, np.array([La / 2, wa / 2, ta / 2]), np.stack([ea, np.cross(y, ea), y])),
        "blade_b": Box(cb, np.array([Lb / 2, wb / 2, tb / 2]), np.stack([eb, np.cross(y, eb), y])),
    }
    hb = cb - (Lb / 2) * eb
    parts["handle_b"] = Box(hb - 0.06 * eb, np.array([0.06, 0.07, tb / 2]), np.stack([eb, np.cross(y, eb), y]))
    children = {"root": ["blade_a", "half_b"], "half_b": ["blade_b", "handle_b"]}
    fixed = {frozenset(("blade_b", "handle_b"))}
    labels = {"root": "scissors", "blade_a": "blade", "half_b": "half", "blade_b": "blade", "handle_b": "handle"}
    # pivot position is replaced by the sampled interaction centroid
    line = geo.Line(y, pivot)
    return Blueprint(parts, labels, children, "root", {("blade_a", "half_b"): (MotionType.R_H_C, line)},
                     fixed, interaction={("blade_a", "half_b"): True})


def _bottle(rng):
    a = rng.uniform(0.45, 0.55)
    a2 = a * rng.uniform(0.7, 0.85)
    h = rng.uniform(0.9, 1.0)
    n = a * rng.uniform(0.4, 0.5)
    n2 = n * rng.uniform(0.75, 0.88)
    hn = rng.uniform(0.08, 0.14)
    c_pad = rng.uniform(0.02, 0.04)
    hc = rng.uniform(0.1, 0.14)
    parts = {
        "main": Box.span([-a / 2, -a2 / 2, 0.0], [a / 2, a2 / 2, h]),
        "neck": Box.span([-n / 2, -n2 / 2, h], [n / 2, n2 / 2, h + hn]),
        "cap": Box.span([-n / 2 - c_pad, -n2 / 2 - c_pad, h + hn], [n / 2 + c_pad, n2 / 2 + c_pad, h + hn + hc]),
    }
    children = {"root": ["body", "cap"], "body": ["main", "neck"]}
    fixed = {frozenset(("main", "neck"))}
    labels = {"root": "bottle", "body": "body", "main": "body", "neck": "neck", "cap": "lid"}
    axis = geo.Line([0.0, 0.0, 1.0], parts["cap"].center)
    return Blueprint(parts, labels, children, "root", {("cap", "body"): (MotionType.PR_V, axis)}, fixed)


CATEGORIES = {
    "door_set": CategorySpec("door_set", _door_set, (1, 1), "frame + leaf on a vertical side hinge"),
    "laptop": CategorySpec("laptop", _laptop, (1, 1), "lid on a horizontal side hinge"),
    "storage_furniture": CategorySpec("storage_furniture", _storage_furniture, (1, 4), "drawers and a side-hinged door"),
    "scissors": CategorySpec("scissors", _scissors, (1, 1), "blades on a central interaction pivot"),
    "bottle": CategorySpec("bottle", _bottle, (1, 1), "cap turning and lifting about its axis"),
}


def get_spec(name):
    try:
        return CATEGORIES[name]
    except KeyError:
        raise ValueError(f"unknown category {name!r}; choose from {sorted(CATEGORIES)}") from None


# ---------------------------------------------------------------- assembly


def _random_rotation(rng, max_deg):
    axis = rng.normal(size=3)
    return geo.rotation_matrix(axis, np.radians(rng.uniform(-max_deg, max_deg)))


def _assemble(bp, sid, category, R, up, points_per_leaf, rng):
    clouds = {pid: box.sample_surface(points_per_leaf, rng) @ R.T for pid, box in bp.parts.items()}
    nodes = []
    internal = set(bp.children)
    seen = set()
    queue = [bp.root]
    while queue:
        nid = queue.pop(0)
        if nid in seen:
            continue
        seen.add(nid)
        if nid in internal:
            nodes.append(PartNode(nid, bp.labels.get(nid, nid), tuple(bp.children[nid])))
            queue.extend(bp.children[nid])
        else:
            nodes.append(PartNode(nid, bp.labels.get(nid, nid), (), clouds[nid]))
    shape = normalize_shape(Shape(sid, category, bp.root, nodes, tuple(up)))
    problems = validate_hierarchy(shape)
    if problems:
        raise ShapeValidationError(problems)
    return shape


def gen_shape(spec, seed, shape_id=None, points_per_leaf=POINTS_PER_LEAF, rotate_deg=0.0,
              adjacency_eps=0.02, interaction_delta=0.03):
    """Generate one shape and its full sibling-edge annotation.

    Deterministic in ``seed``. Returns shapes already in the unit cube.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    rng = np.random.default_rng(seed)
    bp = spec.build(rng)
    R = _random_rotation(rng, rotate_deg) if rotate_deg > 0 else np.eye(3)
    up = R @ UP

    sid = shape_id or f"{spec.name}_{seed}"
    required = set(bp.fixed) | {frozenset(k) for k in bp.joints}
    # sparse samples can miss a thin contact; redraw from the same stream
    for _ in range(SAMPLING_ATTEMPTS):
        shape = _assemble(bp, sid, spec.name, R, up, points_per_leaf, rng)
        adjacent = {frozenset(p) for p in geo.detect_adjacency(shape, adjacency_eps)}
        if required <= adjacent:
            break
    else:
        missing = sorted(sorted(p) for p in required - adjacent)
        raise RuntimeError(f"{sid}: attached parts {missing} are not adjacent at this sampling density")
    norm = shape.normalization

    # exact boxes in normalized coordinates
    boxes = {}
    for pid, box in bp.parts.items():
        c = norm.apply((R @ box.center)[None])[0]
        boxes[pid] = Box(c, box.half * norm.scale, box.axes @ R.T)

    joints = {}
    for (src, ref), (mtype, line) in bp.joints.items():
        d = geo.canonical_direction(R @ line.dir, up)
        if (src, ref) in bp.interaction:
            pos = geo.interaction_region(shape.part_points(src), shape.part_points(ref), interaction_delta)
            if pos is None:
                raise RuntimeError(f"{sid}: empty interaction region for {src}->{ref}")
        else:
            pos = norm.apply((R @ line.point)[None])[0]
        if mtype.has_pivot:
            # shift the pivot to the point of the line nearest the part center
            pos = geo.Line(d, pos).closest_point(boxes[src].center)
        params = MotionParams(mtype, tuple(d), tuple(pos) if mtype.has_pivot else None)
        _check_satisfiable(sid, params, boxes[src], interaction=(src, ref) in bp.interaction, up=up)
        joints[(src, ref)] = params

    edges = []
    for _, kids in shape.sibling_groups():
        for a in kids:
            for b in kids:
                if a == b or frozenset((a, b)) not in adjacent:
                    continue
                if (a, b) in joints:
                    gt = joints[(a, b)]
                elif frozenset((a, b)) in bp.fixed:
                    gt = MotionParams(MotionType.FIXED)
                else:
                    gt = MotionParams(MotionType.NONE)
                edges.append(SiblingEdge(a, b, gt=gt))
    return shape, AnnotationSet(sid, edges)


def _check_satisfiable(sid, params, box, interaction, up):
    """The label must coincide with a box-derived candidate (to 1e-9)."""
    cands = geo.obb_candidate_axes(box.obb(), up)
    d = np.array(params.dir)
    for c in cands:
        if geo.angle_between_axes(c.line.dir, d) > 1e-6:
            continue
        if params.pos is None or interaction:
            return
        if geo.point_to_line_distance(params.pos, c.line) < 1e-9:
            return
    raise RuntimeError(f"{sid}: ground-truth axis is not an OBB candidate")


def gt_candidate_distance(params, candidate):
    """(angle degrees, line distance or 0 for prismatic) of a candidate vs GT."""
    ang = geo.angle_between_axes(params.dir, candidate.line.dir)
    if params.pos is None:
        return ang, 0.0
    return ang, geo.line_to_line_distance(geo.Line(params.dir, params.pos), candidate.line)


# ----------------------------------------------------------------- datasets


def _subseed(seed, cat_index, i):
    return int(np.random.SeedSequence([int(seed), cat_index, i]).generate_state(1)[0])


def iter_dataset(categories, n_per_category, seed=0, **kw):
    """Yield ``(shape, annotations)`` for every requested shape."""
    for ci, name in enumerate(categories):
        spec = get_spec(name) if isinstance(name, str) else name
        for i in range(n_per_category):
            yield gen_shape(spec, _subseed(seed, ci, i), shape_id=f"{spec.name}_{i:04d}", **kw)


def split_ids(ids, seed, fractions=(0.7, 0.1, 0.2)):
    """Seeded 70/10/20 train/val/test split."""
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    shuffled = [ids[k] for k in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def gen_dataset(categories, n_per_category, seed, out_dir, **kw):
    """Write shapes/, annotations/ and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    ids = []
    for shape, ann in iter_dataset(categories, n_per_category, seed, **kw):
        save_shape(shape, out / "shapes" / f"{shape.id}.json")
        save_annotations(ann, out / "annotations" / f"{shape.id}.json")
        ids.append(shape.id)
    manifest = split_ids(ids, seed)
    manifest["seed"] = int(seed)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return out
