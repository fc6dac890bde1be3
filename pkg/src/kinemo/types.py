"""Domain types: motion taxonomy, part hierarchy, sibling edges."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MotionType(str, enum.Enum):
    """The ten fine-grained edge types.

    Class index (used by the network heads) is the declaration order.
    """

    P_H = "P_H"
    P_V = "P_V"
    R_H_C = "R_H_C"
    R_H_S = "R_H_S"
    R_V_C = "R_V_C"
    R_V_S = "R_V_S"
    PR_H = "PR_H"
    PR_V = "PR_V"
    FIXED = "Fixed"
    NONE = "None"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown motion type {name!r}") from None

    @property
    def index(self):
        return _FINE_ORDER.index(self)

    @property
    def is_mobile(self):
        return self not in (MotionType.FIXED, MotionType.NONE)

    @property
    def has_pivot(self):
        return self.is_mobile and not self.is_prismatic

    @property
    def is_prismatic(self):
        return self in (MotionType.P_H, MotionType.P_V)

    @property
    def orientation(self):
        """'H', 'V' or None for immobile types."""
        if not self.is_mobile:
            return None
        return self.value.split("_")[1]

    @property
    def pivot_location(self):
        """'C', 'S' or None (prismatic, PR and immobile types)."""
        parts = self.value.split("_")
        return parts[2] if len(parts) == 3 else None

    @property
    def coarse(self):
        if not self.is_mobile:
            return CoarseType(self.value)
        return CoarseType(self.value.split("_")[0])

    @classmethod
    def from_parts(cls, joint, orientation, pivot=None):
        """Build a fine type from coarse joint, 'H'/'V' and optional 'C'/'S'."""
        joint = CoarseType(joint)
        if not joint.is_mobile:
            return cls(joint.value)
        if joint is CoarseType.R:
            return cls(f"R_{orientation}_{pivot or 'S'}")
        return cls(f"{joint.value}_{orientation}")


_FINE_ORDER = list(MotionType)


class CoarseType(str, enum.Enum):
    """Coarse taxonomy used by the ablation head."""

    P = "P"
    R = "R"
    PR = "PR"
    FIXED = "Fixed"
    NONE = "None"

    def __str__(self):
        return self.value

    @property
    def index(self):
        return _COARSE_ORDER.index(self)

    @property
    def is_mobile(self):
        return self not in (CoarseType.FIXED, CoarseType.NONE)

    @property
    def is_prismatic(self):
        return self is CoarseType.P

    @property
    def has_pivot(self):
        return self in (CoarseType.R, CoarseType.PR)

    @property
    def orientation(self):
        return None

    @property
    def pivot_location(self):
        return None

    @property
    def coarse(self):
        return self


_COARSE_ORDER = list(CoarseType)


def parse_type(name):
    """Fine type name, or a coarse one (``P``, ``R``, ``PR``) from coarse heads."""
    try:
        return MotionType(name)
    except ValueError:
        pass
    try:
        return CoarseType(name)
    except ValueError:
        raise ValueError(f"unknown motion type {name!r}") from None


def type_classes(mode="fine"):
    """Ordered class list for a head mode ('fine' or 'coarse')."""
    if mode == "fine":
        return list(_FINE_ORDER)
    if mode == "coarse":
        return list(_COARSE_ORDER)
    raise ValueError(f"unknown type mode {mode!r}")


def _vec3(v, what="vector"):
    if v is None:
        return None
    t = tuple(float(c) for c in v)
    if len(t) != 3 or not all(np.isfinite(t)):
        raise ValueError(f"{what} must be 3 finite numbers, got {v!r}")
    return t


@dataclass(frozen=True)
class MotionParams:
    """Motion of a movable part relative to its reference part.

    ``dir`` and ``pos`` are ``None`` where the type ignores them.
    """

    mtype: MotionType
    dir: tuple | None = None
    pos: tuple | None = None

    def __post_init__(self):
        mtype = self.mtype
        if not isinstance(mtype, (MotionType, CoarseType)):
            mtype = MotionType.parse(mtype)
            object.__setattr__(self, "mtype", mtype)
        d = _vec3(self.dir, "dir") if mtype.is_mobile else None
        p = _vec3(self.pos, "pos") if mtype.has_pivot else None
        if mtype.is_mobile:
            if d is None:
                raise ValueError(f"{mtype} requires a direction")
            n = float(np.linalg.norm(d))
            if abs(n - 1.0) > 1e-6:
                if n < 1e-12:
                    raise ValueError("direction has zero length")
                d = tuple(c / n for c in d)
        if mtype.has_pivot and p is None:
            raise ValueError(f"{mtype} requires a pivot position")
        object.__setattr__(self, "dir", d)
        object.__setattr__(self, "pos", p)

    @property
    def dir_array(self):
        return None if self.dir is None else np.array(self.dir)

    @property
    def pos_array(self):
        return None if self.pos is None else np.array(self.pos)


@dataclass(frozen=True, eq=False)
class PartNode:
    id: str
    label: str = ""
    children: tuple = ()
    points: np.ndarray | None = None
    obb: object | None = None

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.points is not None:
            pts = np.array(self.points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError(f"part {self.id!r}: points must be an (n, 3) array")
            pts.setflags(write=False)
            object.__setattr__(self, "points", pts)

    @property
    def is_leaf(self):
        return not self.children

    def __eq__(self, other):
        if not isinstance(other, PartNode):
            return NotImplemented
        same_pts = (self.points is None and other.points is None) or (
            self.points is not None
            and other.points is not None
            and np.array_equal(self.points, other.points)
        )
        return (
            self.id == other.id
            and self.label == other.label
            and self.children == other.children
            and same_pts
        )

    __hash__ = None


@dataclass(frozen=True)
class Normalization:
    """``normalized = (raw - center) * scale + 0.5``."""

    center: tuple = (0.5, 0.5, 0.5)
    scale: float = 1.0

    def apply(self, points):
        return (np.asarray(points, dtype=float) - np.array(self.center)) * self.scale + 0.5

    def invert(self, points):
        return (np.asarray(points, dtype=float) - 0.5) / self.scale + np.array(self.center)

    @property
    def is_identity(self):
        return self.scale == 1.0 and self.center == (0.5, 0.5, 0.5)


@dataclass(frozen=True, eq=False)
class Shape:
    id: str
    category: str
    root: str
    nodes: tuple
    up_axis: tuple = (0.0, 0.0, 1.0)
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        up = _vec3(self.up_axis, "up_axis")
        n = float(np.linalg.norm(up))
        if n < 1e-12:
            raise ValueError("up_axis has zero length")
        object.__setattr__(self, "up_axis", tuple(c / n for c in up))

    @cached_property
    def node_map(self):
        return {n.id: n for n in self.nodes}

    def __getitem__(self, part_id):
        return self.node_map[part_id]

    def __contains__(self, part_id):
        return part_id in self.node_map

    @property
    def up(self):
        return np.array(self.up_axis)

    @cached_property
    def parent_of(self):
        parents = {}
        for n in self.nodes:
            for c in n.children:
                parents.setdefault(c, n.id)
        return parents

    def leaves_under(self, part_id):
        """Leaf ids in the subtree of ``part_id`` in depth-first child order."""
        out, stack, seen = [], [part_id], set()
        while stack:
            nid = stack.pop()
            if nid in seen or nid not in self.node_map:
                continue
            seen.add(nid)
            node = self.node_map[nid]
            if node.is_leaf:
                out.append(nid)
            else:
                stack.extend(reversed(node.children))
        return out

    def part_points(self, part_id):
        """Point cloud of a part: its own points or the union of its leaves."""
        node = self.node_map[part_id]
        if node.points is not None:
            return node.points
        clouds = [self.node_map[l].points for l in self.leaves_under(part_id)]
        clouds = [c for c in clouds if c is not None]
        if not clouds:
            return np.zeros((0, 3))
        return np.concatenate(clouds, axis=0)

    def sibling_groups(self):
        """(parent id, children) for every internal node with >= 2 children."""
        return [(n.id, n.children) for n in self.nodes if len(n.children) >= 2]

    def bottom_up(self):
        """Node ids ordered so every child precedes its parent."""
        order, stack, seen = [], [(self.root, False)], set()
        while stack:
            nid, done = stack.pop()
            if done:
                order.append(nid)
                continue
            if nid in seen:
                continue
            seen.add(nid)
            stack.append((nid, True))
            for c in reversed(self.node_map[nid].children):
                stack.append((c, False))
        return order

    def with_nodes(self, nodes):
        return Shape(self.id, self.category, self.root, nodes, self.up_axis, self.normalization)


@dataclass(frozen=True)
class Refinement:
    """Scores attached to a refined edge prediction."""

    score: float
    s_f: float
    s_d: float
    s_p: float | None
    candidate_source: str


@dataclass(frozen=True)
class SiblingEdge:
    src: str
    ref: str
    gt: MotionParams | None = None
    pred: MotionParams | None = None
    pred_logits: tuple | None = None
    refinement: Refinement | None = None

    def __post_init__(self):
        if self.src == self.ref:
            raise ValueError(f"edge endpoints must differ, got {self.src!r} twice")
        if self.pred_logits is not None:
            logits = tuple(float(v) for v in self.pred_logits)
            if len(logits) not in (10, 5):
                raise ValueError(f"pred_logits must have 10 entries, got {len(logits)}")
            object.__setattr__(self, "pred_logits", logits)

    @property
    def key(self):
        return (self.src, self.ref)

    @property
    def type_probs(self):
        if self.pred_logits is None:
            return None
        z = np.array(self.pred_logits)
        z = np.exp(z - z.max())
        return z / z.sum()


@dataclass(frozen=True)
class AnnotationSet:
    shape_id: str
    edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))

    def edge_map(self):
        return {e.key: e for e in self.edges}
