"""Siamese point-set scorer judging whether a candidate motion is plausible.

A pair holds the movable and reference points before and after moving the
movable part about a candidate axis. Both clouds go through the same point
MLP and max-pool; the two global vectors are concatenated and mapped to a
single sigmoid score. Clouds are centered on the candidate axis point
closest to the movable centroid, so the score ignores where the shape sits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import geometry as geo
from . import nn
from .types import MotionParams


MOVABLE_FLAG = (1.0, 0.0)
REFERENCE_FLAG = (0.0, 1.0)


@dataclass(frozen=True, eq=False)
class MotionPairInput:
    original: np.ndarray      # (N, 5): xyz + one-hot movable/reference
    transformed: np.ndarray   # (N, 5)

    def __post_init__(self):
        if self.original.shape != self.transformed.shape:
            raise ValueError("original and transformed clouds must have equal shape")


def subsample(points, n, rng):
    """``n`` rows, without replacement when possible."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise ValueError("cannot subsample an empty part")
    if len(points) >= n:
        idx = np.sort(rng.choice(len(points), size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(len(points)), rng.integers(len(points), size=n - len(points))])
    return points[idx]


def make_pair_input(movable, reference, candidate, mtype, amount, seed=0, n_movable=512, n_reference=512):
    """Original/transformed clouds for moving ``movable`` about ``candidate``."""
    if not mtype.is_mobile:
        raise ValueError(f"cannot build a motion pair for type {mtype}")
    movable = np.asarray(movable, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if len(movable) == 0 or len(reference) == 0:
        raise ValueError("both parts need points")
    rng = np.random.default_rng(seed)
    mov = subsample(movable, n_movable, rng)
    ref = subsample(reference, n_reference, rng)
    line = candidate.line if hasattr(candidate, "line") else candidate
    params = MotionParams(mtype, tuple(line.dir), tuple(line.point) if mtype.has_pivot else None)
    moved = geo.apply_motion(mov, params, amount) if amount != 0 else mov.copy()
    center = line.closest_point(movable.mean(axis=0))
    flags = np.concatenate([np.tile(MOVABLE_FLAG, (n_movable, 1)), np.tile(REFERENCE_FLAG, (n_reference, 1))])
    orig = np.concatenate([np.concatenate([mov, ref]) - center, flags], axis=1)
    trans = np.concatenate([np.concatenate([moved, ref]) - center, flags], axis=1)
    return MotionPairInput(orig, trans)


# ------------------------------------------------------------------ net


def init_params(hidden=64, global_dim=128, head_hidden=64, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    nn.init_mlp(params, "enc", [5, hidden, global_dim], rng)
    nn.init_mlp(params, "head", [2 * global_dim, head_hidden, 1], rng)
    return params


def embed(clouds, t):
    """Shared encoder: (B, N, 5) array -> (B, global_dim) tensor."""
    B, N, _ = clouds.shape
    f = nn.mlp(ad.Tensor(clouds.reshape(B * N, 5)), t, "enc", 2)
    return ad.segment_max(f, np.arange(B) * N)


def logits(pairs, t):
    orig = np.stack([p.original for p in pairs])
    trans = np.stack([p.transformed for p in pairs])
    g = embed(np.concatenate([orig, trans]), t)
    B = len(pairs)
    ga = ad.take(g, np.arange(B))
    gb = ad.take(g, np.arange(B, 2 * B))
    z = nn.mlp(ad.concat([ga, gb], axis=1), t, "head", 2, final_relu=False)
    return ad.row_sum(z)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def bce(score, label):
    """-[y log s + (1-y) log(1-s)] for a probability ``score``."""
    s = float(score)
    y = float(label)
    out = 0.0
    if y > 0:
        out -= y * (np.log(s) if s > 0 else -np.inf)
    if y < 1:
        out -= (1 - y) * (np.log1p(-s) if s < 1 else -np.inf)
    return float(out)


def bce_loss(pairs, labels, t):
    """Mean BCE tensor, written through softplus for stability."""
    z = logits(pairs, t)
    y = np.asarray(labels, dtype=float)
    per = ad.softplus(z) - z * y
    return ad.total(per) * (1.0 / len(pairs)), per


def feasibility_score(pair, params):
    return float(predict_scores([pair], params)[0])


def predict_scores(pairs, params, batch_size=64):
    t = nn.as_tensors(params)
    out = []
    for i in range(0, len(pairs), batch_size):
        out.append(sigmoid(logits(pairs[i:i + batch_size], t).data))
    return np.concatenate(out) if out else np.zeros(0)


def train_feasibility(pairs, labels, params, optimizer, lr=None):
    """One optimizer step on a batch; returns ``(params, mean BCE)``."""
    t = nn.as_tensors(params)
    loss, per = bce_loss(pairs, labels, t)
    if not np.all(np.isfinite(per.data)):
        raise FloatingPointError("non-finite feasibility loss")
    loss.backward()
    return optimizer.step(params, nn.grads_of(t), lr=lr), float(loss.data)


# --------------------------------------------------------- training data


def gt_line(params, fallback_point):
    point = params.pos if params.pos is not None else fallback_point
    return geo.Line(np.array(params.dir), np.array(point))


def is_distinct(gt_params, line, min_distance=0.05, min_degrees=10.0):
    """Whether a candidate line describes a different motion than the GT.

    Translations only depend on the direction, so parallel lines never
    count as distinct for prismatic joints.
    """
    ang = geo.angle_between_axes(gt_params.dir, line.dir)
    if ang > min_degrees:
        return True
    if gt_params.pos is None:
        return False
    return geo.line_to_line_distance(geo.Line(gt_params.dir, gt_params.pos), line) > min_distance


def negative_pool(shape, src, ref, obb=None, interaction_delta=0.03):
    """Box edges, box centroid axes and interaction-centroid axes of ``src``."""
    obb = obb or geo.compute_obb(shape.part_points(src), up=shape.up)
    cands = geo.obb_candidate_axes(obb, shape.up)
    pivot = geo.interaction_region(shape.part_points(src), shape.part_points(ref), interaction_delta)
    if pivot is not None:
        cands += [geo.CandidateAxis(geo.Line(c.line.dir, pivot), geo.CandidateSource.INTERACTION_CENTROID, c.index)
                  for c in cands if c.source is geo.CandidateSource.OBB_CENTROID]
    return cands


def motion_amounts(mtype, k, rng, revolute_range=(0.2, 1.2), prismatic_range=(0.1, 0.4)):
    lo, hi = prismatic_range if mtype.is_prismatic else revolute_range
    return rng.uniform(lo, hi, size=k)


def gen_training_pairs(shape, gt, n_neg=4, seed=0, amounts_per_edge=2, n_movable=512, n_reference=512,
                       revolute_range=(0.2, 1.2), prismatic_range=(0.1, 0.4), distinct_distance=0.05,
                       distinct_degrees=10.0, obbs=None):
    """Labeled pairs: the GT motion (label 1) and distinct candidates (label 0).

    Each mobile GT edge yields ``amounts_per_edge`` positives, and each
    positive gets ``n_neg`` negatives that reuse its amount.
    """
    rng = np.random.default_rng(seed)
    out = []
    for e in gt.edges:
        params = e.gt
        if params is None or not params.mtype.is_mobile:
            continue
        movable = shape.part_points(e.src)
        reference = shape.part_points(e.ref)
        obb = obbs[e.src] if obbs is not None else None
        pool = [c for c in negative_pool(shape, e.src, e.ref, obb)
                if is_distinct(params, c.line, distinct_distance, distinct_degrees)]
        positive = gt_line(params, movable.mean(axis=0))
        for amount in motion_amounts(params.mtype, amounts_per_edge, rng, revolute_range, prismatic_range):
            pair_seed = int(rng.integers(2**31))
            out.append((make_pair_input(movable, reference, positive, params.mtype, amount, pair_seed,
                                        n_movable, n_reference), 1))
            if not pool:
                continue
            picks = rng.choice(len(pool), size=n_neg, replace=len(pool) < n_neg)
            for k in picks:
                out.append((make_pair_input(movable, reference, pool[int(k)], params.mtype, amount,
                                            int(rng.integers(2**31)), n_movable, n_reference), 0))
    return out


# ------------------------------------------------------------ estimator


class FeasibilityNet(BaseEstimator):
    """Learned feasibility score with a fit/predict_proba interface.

    ``fit(shapes, annotations)`` generates labeled pairs and trains;
    ``predict_proba(pairs)`` returns one score in (0, 1) per pair.
    """

    def __init__(self, n_movable=512, n_reference=512, hidden=64, global_dim=128, head_hidden=64, lr=1e-3,
                 beta1=0.9, beta2=0.999, epochs=30, batch_size=16, seed=0, n_neg=4, amounts_per_edge=2,
                 revolute_range=(0.2, 1.2), prismatic_range=(0.1, 0.4), distinct_distance=0.05,
                 distinct_degrees=10.0, verbose=False):
        self.n_movable = n_movable
        self.n_reference = n_reference
        self.hidden = hidden
        self.global_dim = global_dim
        self.head_hidden = head_hidden
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.n_neg = n_neg
        self.amounts_per_edge = amounts_per_edge
        self.revolute_range = revolute_range
        self.prismatic_range = prismatic_range
        self.distinct_distance = distinct_distance
        self.distinct_degrees = distinct_degrees
        self.verbose = verbose

    @classmethod
    def from_config(cls, cfg, **kw):
        keys = cls().get_params()
        return cls(**{k: getattr(cfg, k) for k in keys if hasattr(cfg, k)}, **kw)

    def make_pairs(self, shapes, annotations):
        out = []
        for i, (shape, ann) in enumerate(zip(shapes, annotations)):
            seed = int(np.random.SeedSequence([int(self.seed), i]).generate_state(1)[0])
            out.extend(gen_training_pairs(
                shape, ann, self.n_neg, seed, self.amounts_per_edge, self.n_movable, self.n_reference,
                tuple(self.revolute_range), tuple(self.prismatic_range), self.distinct_distance,
                self.distinct_degrees))
        return out

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on shapes ``X`` with annotations ``y``."""
        val = self.make_pairs(X_val, y_val) if X_val is not None else None
        return self.fit_pairs(self.make_pairs(X, y), val)

    def fit_pairs(self, pairs, val_pairs=None):
        if not pairs:
            raise ValueError("no training pairs (no mobile ground-truth edges)")
        inputs = [p for p, _ in pairs]
        labels = np.array([l for _, l in pairs], dtype=float)
        params = init_params(self.hidden, self.global_dim, self.head_hidden, self.seed)
        opt = nn.Adam(self.lr, self.beta1, self.beta2)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(inputs))
            total, count = 0.0, 0
            for i in range(0, len(order), self.batch_size):
                idx = order[i:i + self.batch_size]
                params, loss = train_feasibility([inputs[k] for k in idx], labels[idx], params, opt)
                total += loss * len(idx)
                count += len(idx)
            val = self._mean_loss(val_pairs, params) if val_pairs else float("nan")
            self.history_.append((epoch + 1, total / count, val))
            if self.verbose:
                print(f"epoch {epoch + 1:4d}  bce {total / count:.5f}  val {val:.5f}")
        self.params_ = params
        return self

    def _mean_loss(self, pairs, params):
        t = nn.as_tensors(params)
        tot = 0.0
        for i in range(0, len(pairs), 64):
            chunk = pairs[i:i + 64]
            loss, _ = bce_loss([p for p, _ in chunk], [l for _, l in chunk], t)
            tot += float(loss.data) * len(chunk)
        return tot / len(pairs)

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("FeasibilityNet is not fitted")

    def predict_proba(self, pairs):
        self._check_fitted()
        return predict_scores(list(pairs), self.params_)

    def predict(self, pairs, threshold=0.5):
        return (self.predict_proba(pairs) > threshold).astype(int)

    def score(self, pairs, labels):
        """Accuracy at threshold 0.5."""
        return float(np.mean(self.predict(pairs) == np.asarray(labels)))

    def save(self, path):
        self._check_fitted()
        cfg = self.get_params()
        cfg["revolute_range"] = list(self.revolute_range)
        cfg["prismatic_range"] = list(self.prismatic_range)
        nn.save_model(path, {"kind": "feasibility", **cfg}, self.params_)

    @classmethod
    def load(cls, path):
        config, params = nn.load_model(path)
        if config.get("kind") != "feasibility":
            raise ValueError(f"{path}: not a feasibility model")
        config = {k: v for k, v in config.items() if k != "kind"}
        config["revolute_range"] = tuple(config["revolute_range"])
        config["prismatic_range"] = tuple(config["prismatic_range"])
        model = cls(**config)
        model.params_ = params
        return model
