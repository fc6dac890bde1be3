"""Hierarchy encoder + sibling-graph message passing for edge motion prediction.

Leaves are encoded by a shared point MLP and max-pooling; internal parts
aggregate the mean and max of their children together with their own box
descriptor. Directed sibling edges then exchange messages for ``rounds``
iterations and three heads read out type logits, a unit direction and a
pivot offset from the movable part's box center.

Several shapes are collated into one disjoint graph so a batch is a single
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import geometry as geo
from . import nn
from .config import GNNConfig
from .types import AnnotationSet, MotionParams, MotionType, SiblingEdge, type_classes

EDGE_DIM = 16
DESC_DIM = 15


class NonFiniteLossError(RuntimeError):
    def __init__(self, shape_id, value):
        self.shape_id = shape_id
        super().__init__(f"non-finite loss ({value}) on shape {shape_id!r}")


# -------------------------------------------------------------- sampling


def farthest_point_indices(points, n, start=0):
    pts = np.asarray(points, dtype=float)
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for k in range(1, n):
        chosen[k] = int(np.argmax(dist))
        dist = np.minimum(dist, np.sum((pts - pts[chosen[k]]) ** 2, axis=1))
    return chosen


def sample_leaf_points(node, n, seed=0):
    """Exactly ``n`` points of a leaf.

    Larger clouds are reduced by farthest-point sampling from a seeded start;
    smaller ones keep every point once and fill up with seeded draws.
    """
    pts = node.points if hasattr(node, "points") else node
    pts = np.asarray(pts, dtype=float)
    if pts is None or len(pts) == 0:
        raise ValueError("cannot sample an empty point list")
    rng = np.random.default_rng(seed)
    m = len(pts)
    if m == n:
        return pts.copy()
    if m > n:
        return pts[farthest_point_indices(pts, n, int(rng.integers(m)))]
    extra = rng.integers(m, size=n - m)
    return pts[np.concatenate([np.arange(m), extra])]


# ------------------------------------------------------------ the graph


@dataclass
class SiblingGraph:
    nodes: list
    edges: list  # directed (src, ref)


def build_sibling_graph(shape, adjacency):
    """Both orientations of every adjacent sibling pair."""
    edges = []
    for a, b in adjacency:
        if a == b:
            continue
        edges.append((a, b))
        edges.append((b, a))
    return SiblingGraph([n.id for n in shape.nodes], edges)


def edge_features(src_obb, ref_obb, gap, up):
    """16 numbers describing the placement of ``src`` relative to ``ref``."""
    off = src_obb.center - ref_obb.center
    local = ref_obb.axes @ off
    ratios = np.log(src_obb.extents / ref_obb.extents)
    align = np.abs(src_obb.axes @ ref_obb.axes.T).max(axis=1)
    upward = np.abs(src_obb.axes @ up)
    return np.concatenate([off, local, ratios, align, upward, [gap]])


def _heights(shape):
    h = {}
    for nid in shape.bottom_up():
        kids = shape[nid].children
        h[nid] = 0 if not kids else 1 + max(h[c] for c in kids)
    return h


@dataclass
class GraphSample:
    """Everything the network needs from one shape, computed once."""

    shape: object
    leaf_ids: list
    points: np.ndarray          # (n_leaves, n, 3)
    obbs: dict
    heights: dict
    graph: SiblingGraph
    edge_feats: np.ndarray      # (E, 16)
    targets: list | None = None  # MotionParams per edge, or None


def prepare_shape(shape, annotations=None, n_points=1024, seed=0, adjacency_eps=0.02, obbs=None):
    """Sample leaves, fit boxes, detect adjacency and attach targets.

    Every leaf uses the same sampling seed so renaming or reordering parts
    cannot change what the encoder sees.
    """
    order = shape.bottom_up()
    leaf_ids = [nid for nid in order if shape[nid].is_leaf]
    points = np.stack([sample_leaf_points(shape[l], n_points, seed) for l in leaf_ids])
    if obbs is None:
        obbs = geo.part_obbs(shape)
    pairs = geo.detect_adjacency(shape, adjacency_eps)
    graph = build_sibling_graph(shape, pairs)
    up = shape.up
    feats = []
    gaps = {}
    for a, b in pairs:
        gaps[(a, b)] = gaps[(b, a)] = geo.min_distance(shape.part_points(a), shape.part_points(b))
    for s, r in graph.edges:
        feats.append(edge_features(obbs[s], obbs[r], gaps[(s, r)], up))
    feats = np.array(feats, dtype=float).reshape(-1, EDGE_DIM)
    targets = None
    if annotations is not None:
        emap = annotations.edge_map()
        targets = []
        for key in graph.edges:
            e = emap.get(key)
            targets.append(e.gt if e is not None and e.gt is not None else MotionParams(MotionType.NONE))
        targets = [_canonical_target(t, up) for t in targets]
    return GraphSample(shape, leaf_ids, points, obbs, _heights(shape), graph, feats, targets)


def _canonical_target(params, up):
    if params.dir is None:
        return params
    return MotionParams(params.mtype, tuple(geo.canonical_direction(params.dir, up)), params.pos)


@dataclass
class _Level:
    child_rows: np.ndarray
    starts: np.ndarray
    desc: np.ndarray


@dataclass
class Batch:
    samples: list
    points: np.ndarray
    leaf_starts: np.ndarray
    levels: list
    n_nodes: int
    rows: list                  # per sample: node id -> row
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray
    src_centers: np.ndarray
    edge_sample: np.ndarray
    target_idx: np.ndarray = None
    gt_dir: np.ndarray = None
    gt_pos: np.ndarray = None
    mask_dir: np.ndarray = None
    mask_pos: np.ndarray = None
    extra: dict = field(default_factory=dict)


def collate(samples, mode="fine"):
    """Merge prepared shapes into one disjoint graph, rows ordered by height."""
    rows = [dict() for _ in samples]
    n = 0
    pts, leaf_starts = [], []
    for si, s in enumerate(samples):
        for k, lid in enumerate(s.leaf_ids):
            rows[si][lid] = n
            leaf_starts.append(n * s.points.shape[1])
            pts.append(s.points[k])
            n += 1
    max_h = max((max(s.heights.values()) for s in samples), default=0)
    levels = []
    for h in range(1, max_h + 1):
        child_rows, starts, desc = [], [], []
        for si, s in enumerate(samples):
            for nid in s.shape.bottom_up():
                if s.heights[nid] != h:
                    continue
                starts.append(len(child_rows))
                child_rows.extend(rows[si][c] for c in s.shape[nid].children)
                desc.append(s.obbs[nid].descriptor())
        if not starts:
            continue
        # parents of this level get rows after all lower levels
        k = 0
        for si, s in enumerate(samples):
            for nid in s.shape.bottom_up():
                if s.heights[nid] == h:
                    rows[si][nid] = n + k
                    k += 1
        n += k
        levels.append(_Level(np.array(child_rows, np.intp), np.array(starts, np.intp), np.array(desc)))

    src, dst, feats, centers, owner = [], [], [], [], []
    for si, s in enumerate(samples):
        for (a, b), f in zip(s.graph.edges, s.edge_feats):
            src.append(rows[si][a])
            dst.append(rows[si][b])
            feats.append(f)
            centers.append(s.obbs[a].center)
            owner.append(si)
    points = np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))
    batch = Batch(
        samples, points, np.array(leaf_starts, np.intp), levels, n, rows,
        np.array(src, np.intp), np.array(dst, np.intp),
        np.array(feats, float).reshape(-1, EDGE_DIM), np.array(centers, float).reshape(-1, 3),
        np.array(owner, np.intp),
    )
    if all(s.targets is not None for s in samples):
        _attach_targets(batch, [t for s in samples for t in s.targets], mode)
    return batch


def _attach_targets(batch, targets, mode):
    classes = type_classes(mode)
    idx, d, p, md, mp = [], [], [], [], []
    for t in targets:
        label = t.mtype if mode == "fine" else t.mtype.coarse
        idx.append(classes.index(label))
        d.append(t.dir if t.dir is not None else (0.0, 0.0, 1.0))
        p.append(t.pos if t.pos is not None else (0.0, 0.0, 0.0))
        md.append(1.0 if t.mtype.is_mobile else 0.0)
        mp.append(1.0 if t.mtype.has_pivot else 0.0)
    batch.target_idx = np.array(idx, np.intp)
    batch.gt_dir = np.array(d, float).reshape(-1, 3)
    batch.gt_pos = np.array(p, float).reshape(-1, 3)
    batch.mask_dir = np.array(md)
    batch.mask_pos = np.array(mp)


# ---------------------------------------------------------------- model


def init_params(cfg, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    F, H, E = cfg.feat_dim, cfg.hidden, cfg.edge_dim
    n_out = len(type_classes(cfg.mode))
    params = {}
    nn.init_mlp(params, "point", [3, 64, F], rng)
    nn.init_mlp(params, "agg", [2 * F + DESC_DIM, H, F], rng)
    for k in range(cfg.rounds):
        nn.init_mlp(params, f"msg{k}", [2 * F + (E if k == 0 else H), H, H], rng)
        nn.init_mlp(params, f"node{k}", [F + H, H, F], rng)
    head_in = 2 * F + (H if cfg.rounds > 0 else E)
    nn.init_mlp(params, "type", [head_in, H, n_out], rng)
    geo_in = head_in + (n_out if cfg.type_to_dir else 0)
    nn.init_mlp(params, "dir", [geo_in, H, 3], rng)
    nn.init_mlp(params, "pos", [geo_in, H, 3], rng)
    return params


def node_table(batch, t):
    """Feature rows for every node of the batch (leaves first, then by height)."""
    f = nn.mlp(ad.Tensor(batch.points - 0.5), t, "point", 2)
    table = [ad.segment_max(f, batch.leaf_starts)]
    for lv in batch.levels:
        cur = table[0] if len(table) == 1 else ad.concat(table, axis=0)
        ch = ad.take(cur, lv.child_rows)
        agg = ad.concat([ad.segment_mean(ch, lv.starts), ad.segment_max(ch, lv.starts), ad.Tensor(lv.desc)], axis=1)
        table.append(nn.mlp(agg, t, "agg", 2))
    return table[0] if len(table) == 1 else ad.concat(table, axis=0)


def forward(batch, t, cfg):
    """Returns ``(logits, dir, pos)`` tensors, one row per directed edge."""
    h = node_table(batch, t)
    e = ad.Tensor(batch.edge_feats)
    for k in range(cfg.rounds):
        m = nn.mlp(ad.concat([ad.take(h, batch.src), ad.take(h, batch.dst), e], axis=1), t, f"msg{k}", 2)
        h = nn.mlp(ad.concat([h, ad.scatter_mean(m, batch.dst, batch.n_nodes)], axis=1), t, f"node{k}", 2)
        e = m
    z = ad.concat([ad.take(h, batch.src), ad.take(h, batch.dst), e], axis=1)
    logits = nn.mlp(z, t, "type", 2, final_relu=False)
    if cfg.type_to_dir:
        # fine types carry the axis orientation, so let the geometry heads see them
        z = ad.concat([z, ad.softmax(logits)], axis=1)
    direction = ad.l2_normalize(nn.mlp(z, t, "dir", 2, final_relu=False), eps=1e-8)
    pos = nn.mlp(z, t, "pos", 2, final_relu=False) + batch.src_centers
    return logits, direction, pos


def edge_losses(outputs, batch, cfg):
    """Per-edge total loss tensor (E,)."""
    logits, direction, pos = outputs
    cls = -ad.pick(ad.log_softmax(logits), batch.target_idx)
    diff = direction - batch.gt_dir
    ld = ad.row_sum(diff * diff) if cfg.dir_loss == "squared" else ad.row_norm(diff)
    lp = ad.row_norm(ad.cross(pos - batch.gt_pos, batch.gt_dir))
    return cfg.w_cls * cls + (cfg.w_dir * batch.mask_dir) * ld + (cfg.w_pos * batch.mask_pos) * lp


def batch_loss(batch, t, cfg):
    per_edge = edge_losses(forward(batch, t, cfg), batch, cfg)
    return ad.total(per_edge) * (1.0 / max(len(batch.src), 1)), per_edge


def _check_finite(batch, per_edge):
    vals = per_edge.data
    if np.all(np.isfinite(vals)):
        return
    bad = int(batch.edge_sample[np.flatnonzero(~np.isfinite(vals))[0]])
    raise NonFiniteLossError(batch.samples[bad].shape.id, vals[~np.isfinite(vals)][0])


def train_step(batch, params, optimizer, cfg, lr=None):
    """One Adam step on a collated batch; returns ``(params, mean loss)``."""
    t = nn.as_tensors(params)
    loss, per_edge = batch_loss(batch, t, cfg)
    _check_finite(batch, per_edge)
    loss.backward()
    return optimizer.step(params, nn.grads_of(t), lr=lr), float(loss.data)


# ---------------------------------------------------- exact loss values


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_cls(type_probs, gt_type, mode="fine"):
    """Negative log probability of the ground-truth class."""
    label = gt_type if mode == "fine" else gt_type.coarse
    p = float(np.asarray(type_probs)[type_classes(mode).index(label)])
    return float(-np.log(p)) if p > 0 else float("inf")


def loss_dir(d, d_hat, squared=True):
    diff = np.asarray(d, float) - np.asarray(d_hat, float)
    sq = float(diff @ diff)
    return sq if squared else float(np.sqrt(sq))


def loss_pos(p, p_hat, d_hat):
    """Distance from ``p`` to the line through ``p_hat`` along ``d_hat``."""
    d_hat = np.asarray(d_hat, float)
    n = np.linalg.norm(d_hat)
    if n <= 1e-8:
        raise ValueError("ground-truth direction is degenerate")
    return float(np.linalg.norm(np.cross(np.asarray(p, float) - np.asarray(p_hat, float), d_hat)) / n)


@dataclass(frozen=True)
class EdgePrediction:
    logits: np.ndarray
    dir: np.ndarray
    pos: np.ndarray

    @property
    def type_probs(self):
        return softmax(self.logits)


def total_loss(pred, gt, mode="fine", weights=(1.0, 1.0, 1.0), squared=True):
    """Weighted sum of the three terms with the per-type masking."""
    w_cls, w_dir, w_pos = weights
    out = w_cls * loss_cls(pred.type_probs, gt.mtype, mode)
    if gt.mtype.is_mobile:
        out += w_dir * loss_dir(pred.dir, gt.dir, squared)
    if gt.mtype.has_pivot:
        out += w_pos * loss_pos(pred.pos, gt.pos, gt.dir)
    return out


# ------------------------------------------------------------ inference


def gnn_forward(batch, params, cfg):
    """Numpy predictions keyed by ``(sample index, src, ref)``."""
    t = nn.as_tensors(params)
    logits, direction, pos = forward(batch, t, cfg)
    out = {}
    k = 0
    for si, s in enumerate(batch.samples):
        for key in s.graph.edges:
            out[(si,) + key] = EdgePrediction(logits.data[k].copy(), direction.data[k].copy(), pos.data[k].copy())
            k += 1
    return out


def encode_hierarchy(sample, params):
    """Feature vector per part id of one prepared shape."""
    batch = collate([sample])
    table = node_table(batch, nn.as_tensors(params)).data
    return {nid: table[r].copy() for nid, r in batch.rows[0].items()}


def _to_params(mtype, direction, pos, up):
    if mtype.is_mobile:
        if np.linalg.norm(direction) < 1e-6:
            direction = up
        direction = tuple(geo.canonical_direction(direction, up))
    return MotionParams(mtype, direction if mtype.is_mobile else None, tuple(pos) if mtype.has_pivot else None)


def predict_edges(sample, params, cfg):
    """SiblingEdges with ``pred`` and logits for one prepared shape."""
    return predict_batch([sample], params, cfg)[0]


def predict_batch(samples, params, cfg):
    if not samples:
        return []
    classes = type_classes(cfg.mode)
    preds = gnn_forward(collate(samples, cfg.mode), params, cfg)
    out = []
    for si, s in enumerate(samples):
        edges = []
        targets = s.targets or [None] * len(s.graph.edges)
        for (a, b), gt in zip(s.graph.edges, targets):
            ep = preds[(si, a, b)]
            mtype = classes[int(np.argmax(ep.logits))]  # first maximum wins ties
            edges.append(SiblingEdge(a, b, gt=gt, pred=_to_params(mtype, ep.dir, ep.pos, s.shape.up),
                                     pred_logits=tuple(ep.logits)))
        out.append(edges)
    return out


# ------------------------------------------------------------ estimator


class MotionGNN(BaseEstimator):
    """Edge motion predictor with a fit/predict interface.

    ``fit(shapes, annotations)`` trains from scratch; ``predict(shapes)``
    returns one AnnotationSet per shape with ``pred`` filled.
    """

    def __init__(self, mode="fine", n_points=1024, feat_dim=64, edge_dim=EDGE_DIM, hidden=64, rounds=3,
                 lr=1e-3, beta1=0.9, beta2=0.999, epochs=200, batch_size=8, seed=0, dir_loss="squared",
                 w_cls=1.0, w_dir=1.0, w_pos=1.0, type_to_dir=True, adjacency_eps=0.02, verbose=False):
        self.mode = mode
        self.n_points = n_points
        self.feat_dim = feat_dim
        self.edge_dim = edge_dim
        self.hidden = hidden
        self.rounds = rounds
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.dir_loss = dir_loss
        self.w_cls = w_cls
        self.w_dir = w_dir
        self.w_pos = w_pos
        self.type_to_dir = type_to_dir
        self.adjacency_eps = adjacency_eps
        self.verbose = verbose

    @classmethod
    def from_config(cls, cfg, adjacency_eps=0.02, **kw):
        return cls(**{k: getattr(cfg, k) for k in GNNConfig.__dataclass_fields__}, adjacency_eps=adjacency_eps, **kw)

    @property
    def config_(self):
        return GNNConfig(**{k: getattr(self, k) for k in GNNConfig.__dataclass_fields__})

    def _validate(self):
        if self.mode not in ("fine", "coarse"):
            raise ValueError(f"mode must be 'fine' or 'coarse', got {self.mode!r}")
        if self.dir_loss not in ("squared", "norm"):
            raise ValueError(f"dir_loss must be 'squared' or 'norm', got {self.dir_loss!r}")
        if self.edge_dim != EDGE_DIM:
            raise ValueError(f"edge features have {EDGE_DIM} dimensions")
        for name in ("n_points", "feat_dim", "hidden", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0 or self.epochs < 0:
            raise ValueError("rounds and epochs must be non-negative")

    def prepare(self, shapes, annotations=None):
        annotations = annotations if annotations is not None else [None] * len(shapes)
        if len(annotations) != len(shapes):
            raise ValueError("one annotation set per shape is required")
        return [s if isinstance(s, GraphSample) else
                prepare_shape(s, a, self.n_points, self.seed, self.adjacency_eps)
                for s, a in zip(shapes, annotations)]

    def fit(self, X, y, X_val=None, y_val=None):
        self._validate()
        cfg = self.config_
        train = [s for s in self.prepare(X, y) if s.graph.edges]
        if not train:
            raise ValueError("no training shape has sibling edges")
        val = [s for s in self.prepare(X_val, y_val) if s.graph.edges] if X_val is not None else []
        val_batches = [collate(val[i:i + self.batch_size], self.mode) for i in range(0, len(val), self.batch_size)]
        params = init_params(cfg)
        opt = nn.Adam(self.lr, self.beta1, self.beta2)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(train))
            losses, weights = [], []
            for i in range(0, len(order), self.batch_size):
                batch = collate([train[k] for k in order[i:i + self.batch_size]], self.mode)
                params, loss = train_step(batch, params, opt, cfg)
                losses.append(loss)
                weights.append(len(batch.src))
            row = (epoch + 1, float(np.average(losses, weights=weights)), self._mean_loss(val_batches, params, cfg))
            self.history_.append(row)
            if self.verbose:
                print(f"epoch {row[0]:4d}  loss {row[1]:.5f}  val {row[2]:.5f}")
        self.params_ = params
        return self

    @staticmethod
    def _mean_loss(batches, params, cfg):
        if not batches:
            return float("nan")
        t = nn.as_tensors(params)
        tot, n = 0.0, 0
        for b in batches:
            loss, _ = batch_loss(b, t, cfg)
            tot += float(loss.data) * len(b.src)
            n += len(b.src)
        return tot / n

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("MotionGNN is not fitted")

    def predict(self, X):
        """One AnnotationSet (``pred`` + logits on every edge) per shape."""
        self._check_fitted()
        samples = self.prepare(X)
        out = []
        for i in range(0, len(samples), self.batch_size):
            chunk = samples[i:i + self.batch_size]
            for s, edges in zip(chunk, predict_batch(chunk, self.params_, self.config_)):
                out.append(AnnotationSet(s.shape.id, edges))
        return out

    def score(self, X, y):
        """Mean total loss on ``(X, y)`` (lower is better)."""
        self._check_fitted()
        samples = [s for s in self.prepare(X, y) if s.graph.edges]
        batches = [collate(samples[i:i + self.batch_size], self.mode) for i in range(0, len(samples), self.batch_size)]
        return self._mean_loss(batches, self.params_, self.config_)

    @property
    def n_parameters_(self):
        self._check_fitted()
        return nn.parameter_count(self.params_)

    def save(self, path):
        self._check_fitted()
        nn.save_model(path, {"kind": "motion_gnn", **self.get_params()}, self.params_)

    @classmethod
    def load(cls, path):
        config, params = nn.load_model(path)
        if config.get("kind") != "motion_gnn":
            raise ValueError(f"{path}: not a graph-network model")
        config = {k: v for k, v in config.items() if k != "kind"}
        model = cls(**config)
        model.params_ = params
        return model
