"""Boxes, lines and rigid motions on point clouds.

All functions take and return numpy arrays; shapes live in the unit cube.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree


MIN_EXTENT = 0.01
SNAP_DEGREES = 5.0
SNAP_SLACK = 0.02
VERTICAL_COS = float(np.cos(np.radians(45.0)))
SIGN_TOL = 0.05


class GeometryError(ValueError):
    pass


def _unit(v, what="vector"):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < 1e-12:
        raise GeometryError(f"{what} must be non-zero and finite")
    return v / n


def canonical_direction(d, up=(0.0, 0.0, 1.0)):
    """Pick the sign of an undirected axis deterministically.

    The first of (d.up, d.x, d.y, d.z) whose magnitude exceeds ``SIGN_TOL``
    is made positive, so axes that are only numerically horizontal do not
    flip sign on noise.
    """
    d = _unit(d, "direction")
    up = _unit(up, "up")
    for c in (d @ up, d[0], d[1], d[2]):
        if abs(c) > SIGN_TOL:
            return d if c > 0 else -d
    return d


# ----------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class OBB:
    """Oriented box. ``axes`` rows are unit axes, ``extents`` half-lengths."""

    center: np.ndarray
    axes: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        for name in ("center", "axes", "extents"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.axes.shape != (3, 3):
            raise GeometryError("OBB axes must be 3x3")
        if not np.allclose(self.axes @ self.axes.T, np.eye(3), atol=1e-6):
            raise GeometryError("OBB axes must be orthonormal")
        if np.any(self.extents <= 0):
            raise GeometryError("OBB extents must be positive")

    @property
    def volume(self):
        return float(8.0 * np.prod(self.extents))

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + (signs * self.extents) @ self.axes

    def local(self, points):
        return (np.asarray(points, dtype=float) - self.center) @ self.axes.T

    def contains(self, points, tol=1e-6):
        return np.all(np.abs(self.local(points)) <= self.extents + tol, axis=-1)

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)):
        R = np.asarray(rotation, dtype=float)
        return OBB(R @ self.center + np.asarray(translation), self.axes @ R.T, self.extents)

    def descriptor(self):
        """Flat 15-vector: center, extents, axes (row major)."""
        return np.concatenate([self.center, self.extents, self.axes.ravel()])

    def to_dict(self):
        return {"center": self.center.tolist(), "axes": self.axes.tolist(), "extents": self.extents.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["center"]), np.array(d["axes"]), np.array(d["extents"]))


@dataclass(frozen=True, eq=False)
class Line:
    dir: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        d = np.array(self.dir, dtype=float)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise GeometryError("line direction must be non-zero")
        d = d / n
        p = np.array(self.point, dtype=float)
        d.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "dir", d)
        object.__setattr__(self, "point", p)

    def closest_point(self, p):
        p = np.asarray(p, dtype=float)
        return self.point + ((p - self.point) @ self.dir) * self.dir

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)):
        R = np.asarray(rotation, dtype=float)
        return Line(R @ self.dir, R @ self.point + np.asarray(translation))

    @classmethod
    def from_params(cls, params):
        point = params.pos if params.pos is not None else (0.0, 0.0, 0.0)
        return cls(np.array(params.dir), np.array(point))


class CandidateSource(enum.Enum):
    OBB_EDGE = "obb_edge"
    OBB_CENTROID = "obb_centroid"
    INTERACTION_CENTROID = "interaction_centroid"


@dataclass(frozen=True, eq=False)
class CandidateAxis:
    line: Line
    source: CandidateSource
    index: int = 0
    s_f: float | None = None
    s_d: float | None = None
    s_p: float | None = None
    s: float | None = None

    @property
    def is_side(self):
        return self.source is CandidateSource.OBB_EDGE

    @property
    def label(self):
        return f"{self.source.value}:{self.index}"

    def scored(self, **scores):
        return replace(self, **scores)


# ------------------------------------------------------------------- OBB


def _min_area_frame(points2d):
    """Unit 2D direction of the minimum-area enclosing rectangle."""
    try:
        hull = ConvexHull(points2d)
        ring = points2d[hull.vertices]
    except (QhullError, ValueError):
        ring = points2d
    edges = np.roll(ring, -1, axis=0) - ring
    lengths = np.linalg.norm(edges, axis=1)
    edges = edges[lengths > 1e-12] / lengths[lengths > 1e-12, None]
    if len(edges) == 0:
        return np.array([1.0, 0.0])
    # fold directions into [0, 90deg) so duplicates collapse
    ang = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    ang = np.unique(np.round(ang, 12))
    u = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu, pv = ring @ u.T, ring @ v.T
    area = np.ptp(pu, axis=0) * np.ptp(pv, axis=0)
    return u[int(np.argmin(area))]


def _frame_around(axis, points):
    """Frame whose first axis is ``axis``; the other two minimize the
    projected rectangle area."""
    axis = _unit(axis)
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    b1 = _unit(np.cross(axis, helper))
    b2 = np.cross(axis, b1)
    proj = np.stack([points @ b1, points @ b2], axis=1)
    u = _min_area_frame(proj)
    a1 = u[0] * b1 + u[1] * b2
    a2 = np.cross(axis, a1)
    return np.stack([axis, a1, a2])


def _fit_box(points, axes, min_extent):
    proj = points @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = ((lo + hi) / 2.0) @ axes
    extents = np.maximum((hi - lo) / 2.0, min_extent)
    return center, extents, float(np.prod(np.maximum((hi - lo) / 2.0, 1e-12)))


def _snap(axes, target, max_deg):
    cos = np.abs(axes @ target)
    k = int(np.argmax(cos))
    if cos[k] < np.cos(np.radians(max_deg)):
        return axes, None
    return axes, k


def _hull_normals(points, k=6):
    """Up to ``k`` distinct face normals of the convex hull, largest area first."""
    try:
        hull = ConvexHull(points)
    except (QhullError, ValueError):
        return []
    normals = hull.equations[:, :3]
    tri = points[hull.simplices]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    # undirected, rounded to merge coplanar triangles
    flip = np.where(normals @ np.array([0.57, 0.59, 0.571]) < 0, -1.0, 1.0)
    keys = np.round(normals * flip[:, None], 3)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    weight = np.bincount(inv, weights=areas)
    out = []
    for g in np.argsort(-weight, kind="stable")[:k]:
        members = inv == g
        n = (normals[members] * flip[members, None] * areas[members, None]).sum(axis=0)
        if np.linalg.norm(n) > 1e-12:
            out.append(_unit(n))
    return out


def compute_obb(points, up=None, min_extent=MIN_EXTENT, snap_degrees=SNAP_DEGREES):
    """Oriented bounding box of a point cloud.

    Tries the PCA frame, a frame around ``up`` (when a PCA axis is within
    ``snap_degrees`` of it) and frames flush with the largest convex hull
    faces, and keeps the tightest box. A winning axis within ``snap_degrees``
    of ``up`` is then snapped to it unless that grows the volume by more
    than ``SNAP_SLACK``. Axes are returned sorted by
    decreasing extent and form a right-handed frame.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise GeometryError("compute_obb needs at least 4 points in 3D")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points must be finite")

    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    w, v = np.linalg.eigh(cov)
    pca = v[:, np.argsort(-w, kind="stable")].T

    candidates = [pca]
    fixed = []
    if up is not None:
        up = _unit(up, "up")
        _, k = _snap(pca, up, snap_degrees)
        if k is not None:
            fixed.append(up)
    if not fixed:
        fixed.append(pca[0])
    fixed.extend(_hull_normals(pts))
    for f in fixed:
        candidates.append(_frame_around(f, centered))

    best = None
    for axes in candidates:
        c, e, vol = _fit_box(pts, axes, min_extent)
        if best is None or vol < best[3] * (1.0 - 1e-9):
            best = (axes, c, e, vol)
    if up is not None:
        # snap a nearly vertical axis to up unless that loosens the box
        _, k = _snap(best[0], up, snap_degrees)
        if k is not None and abs(abs(best[0][k] @ up) - 1.0) > 1e-15:
            axes = _frame_around(up, centered)
            c, e, vol = _fit_box(pts, axes, min_extent)
            if vol <= best[3] * (1.0 + SNAP_SLACK):
                best = (axes, c, e, vol)
    axes, center, extents, _ = best

    order = np.argsort(-extents, kind="stable")
    axes, extents = axes[order], extents[order]
    axes = np.stack([canonical_direction(a, up if up is not None else (0, 0, 1)) for a in axes])
    axes[2] = np.cross(axes[0], axes[1])
    return OBB(center, axes, extents)


# -------------------------------------------------------- point relations


def min_distance(a, b):
    """Smallest Euclidean distance between two point sets."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) == 0 or len(b) == 0:
        return np.inf
    if len(a) > len(b):
        a, b = b, a
    d, _ = cKDTree(b).query(a, k=1)
    return float(d.min())


def detect_adjacency(shape, eps=0.02):
    """Unordered sibling pairs whose point sets come closer than ``eps``.

    Pairs are returned as ``(a, b)`` tuples in the parent's child order.
    """
    pairs = []
    cache = {}

    def cloud(pid):
        if pid not in cache:
            cache[pid] = shape.part_points(pid)
        return cache[pid]

    for _, children in shape.sibling_groups():
        for i, a in enumerate(children):
            for b in children[i + 1:]:
                if min_distance(cloud(a), cloud(b)) < eps:
                    pairs.append((a, b))
    return pairs


def interaction_region(movable, reference, delta=0.03):
    """Centroid of movable points within ``delta`` of the reference set."""
    movable = np.asarray(movable, float)
    reference = np.asarray(reference, float)
    if len(movable) == 0 or len(reference) == 0:
        raise GeometryError("interaction_region needs two non-empty point sets")
    d, _ = cKDTree(reference).query(movable, k=1, distance_upper_bound=delta * (1 + 1e-12))
    near = movable[d <= delta]
    if len(near) == 0:
        return None
    return near.mean(axis=0)


# ---------------------------------------------------------- rigid motion


def rotation_matrix(axis, angle):
    """Rodrigues rotation about a unit ``axis`` by ``angle`` radians."""
    k = _unit(axis, "axis")
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def apply_motion(points, params, amount):
    """Move points by ``amount`` of the motion described by ``params``.

    Revolute and PR types rotate (radians) about the joint line; prismatic
    types translate (shape units) along the direction.
    """
    mtype = params.mtype
    if not mtype.is_mobile:
        raise GeometryError(f"cannot apply motion of type {mtype}")
    pts = np.asarray(points, dtype=float)
    d = _unit(params.dir, "direction")
    if mtype.is_prismatic:
        return pts + amount * d
    pivot = np.asarray(params.pos, dtype=float)
    R = rotation_matrix(d, amount)
    return (pts - pivot) @ R.T + pivot


# ------------------------------------------------------------ candidates


def obb_candidate_axes(obb, up=(0.0, 0.0, 1.0)):
    """12 edge lines (through edge midpoints) then 3 centroid axes."""
    out = []
    idx = 0
    for k in range(3):
        i, j = [a for a in range(3) if a != k]
        d = canonical_direction(obb.axes[k], up)
        for si in (-1.0, 1.0):
            for sj in (-1.0, 1.0):
                p = obb.center + si * obb.extents[i] * obb.axes[i] + sj * obb.extents[j] * obb.axes[j]
                out.append(CandidateAxis(Line(d, p), CandidateSource.OBB_EDGE, idx))
                idx += 1
    for k in range(3):
        d = canonical_direction(obb.axes[k], up)
        out.append(CandidateAxis(Line(d, obb.center), CandidateSource.OBB_CENTROID, k))
    return out


def classify_axis_orientation(direction, up=(0.0, 0.0, 1.0)):
    """'V' when within 45 degrees of ``up`` (either sign), else 'H'."""
    d = _unit(direction, "direction")
    u = _unit(up, "up")
    return "V" if abs(d @ u) >= VERTICAL_COS - 1e-12 else "H"


def filter_candidates_by_type(candidates, mtype, movable_obb, interaction_centroid=None, up=(0.0, 0.0, 1.0)):
    """Keep the candidates compatible with a (fine or coarse) motion type.

    Side types keep box edges; center types keep centroid axes plus a copy
    of each through the interaction centroid; PR keeps both; prismatic
    types keep one line per distinct box axis through the box center.
    """
    if not mtype.is_mobile:
        raise GeometryError(f"no candidates for immobile type {mtype}")
    want = mtype.orientation
    keep = [c for c in candidates if want is None or classify_axis_orientation(c.line.dir, up) == want]
    edges = [c for c in keep if c.source is CandidateSource.OBB_EDGE]
    centroids = [c for c in keep if c.source is CandidateSource.OBB_CENTROID]

    if mtype.is_prismatic:
        out = []
        for k, a in enumerate(movable_obb.axes):
            d = canonical_direction(a, up)
            if want is None or classify_axis_orientation(d, up) == want:
                out.append(CandidateAxis(Line(d, movable_obb.center), CandidateSource.OBB_CENTROID, k))
        return out

    interaction = []
    if interaction_centroid is not None:
        for c in centroids:
            interaction.append(
                CandidateAxis(Line(c.line.dir, interaction_centroid), CandidateSource.INTERACTION_CENTROID, c.index)
            )
    pivot = mtype.pivot_location
    if pivot == "S":
        return edges
    if pivot == "C":
        return centroids + interaction
    return edges + centroids + interaction


# ------------------------------------------------------------- distances


def point_to_line_distance(p, line):
    p = np.asarray(p, dtype=float)
    return float(np.linalg.norm(np.cross(p - line.point, line.dir)))


def line_to_line_distance(a, b):
    n = np.cross(a.dir, b.dir)
    nn = np.linalg.norm(n)
    if nn < 1e-9:
        return point_to_line_distance(b.point, a)
    return float(abs((b.point - a.point) @ n) / nn)


def angle_between_axes(a, b):
    """Undirected angle in degrees, in [0, 90]."""
    a, b = _unit(a), _unit(b)
    c = min(1.0, abs(float(a @ b)))
    return float(np.degrees(np.arccos(c)))


def part_obbs(shape, **kw):
    """OBB per part id (internal parts use the union of their leaves)."""
    kw.setdefault("up", shape.up)
    return {n.id: compute_obb(shape.part_points(n.id), **kw) for n in shape.nodes}


def with_obbs(shape, **kw):
    """Copy of ``shape`` with every node's ``obb`` filled in."""
    from .types import PartNode

    obbs = part_obbs(shape, **kw)
    nodes = [PartNode(n.id, n.label, n.children, n.points, obbs[n.id]) for n in shape.nodes]
    return shape.with_nodes(nodes)
