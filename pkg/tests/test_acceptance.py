"""Acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL ...`` line to the terminal
(bypassing capture) before it asserts. Criteria 3 to 5 share one
desk-scale training run.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from kinemo import cli, synthdata
from kinemo import evalkit as ev
from kinemo import feasibility as fz
from kinemo import geometry as geo
from kinemo import graphnet as gn
from kinemo import nn
from kinemo import refinement as rf
from kinemo.config import GNNConfig
from kinemo.types import AnnotationSet, MotionParams, MotionType, SiblingEdge, type_classes

from conftest import box_points, make_shape

CATEGORIES = ["door_set", "laptop", "storage_furniture", "scissors", "bottle"]
DESK = dict(n_per_category=30, points_per_leaf=1000, gnn_epochs=100, n_points=128,
            feas_epochs=10, feas_points=128, gnn_seeds=(0, 1, 2))


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_errors(rows):
    return [r[4] for r in rows]


# ----------------------------------------------------- shared experiment


@pytest.fixture(scope="module")
def desk():
    data = list(synthdata.iter_dataset(CATEGORIES, DESK["n_per_category"], seed=0,
                                       points_per_leaf=DESK["points_per_leaf"]))
    shapes = {s.id: s for s, _ in data}
    anns = {s.id: a for s, a in data}
    split = synthdata.split_ids(sorted(shapes), 0)
    tr_s = [shapes[i] for i in split["train"]]
    tr_a = [anns[i] for i in split["train"]]
    te = split["test"]

    t0 = time.perf_counter()
    feas = fz.FeasibilityNet(n_movable=DESK["feas_points"], n_reference=DESK["feas_points"],
                             epochs=DESK["feas_epochs"]).fit(tr_s, tr_a)
    train_seconds = time.perf_counter() - t0

    # pooled over several training seeds so the fine/coarse comparison is
    # not decided by the initialisation of a single run
    records = {}
    for mode in ("fine", "coarse"):
        for seed in DESK["gnn_seeds"]:
            t0 = time.perf_counter()
            model = gn.MotionGNN(mode=mode, n_points=DESK["n_points"], epochs=DESK["gnn_epochs"],
                                 seed=seed).fit(tr_s, tr_a)
            train_seconds += time.perf_counter() - t0
            preds = model.predict([shapes[i] for i in te])
            for refine, tag in ((False, "GNN"), (True, "OBB")):
                out = rf.AxisRefiner(feasibility=feas, refine=refine).transform([shapes[i] for i in te], preds)
                for i, r in zip(te, out):
                    records.setdefault(f"{tag}_{mode}", []).extend(
                        ev.evaluate(shapes[i], ev.attach_ground_truth(r.annotations, anns[i])))
    overall = {k: ev.aggregate_report(v)["overall"] for k, v in records.items()}
    return {"feas": feas, "overall": overall, "train_seconds": train_seconds}


# ---------------------------------------------------------------- 1


def test_criterion_1_gradients(small_corpus, capsys):
    start = time.perf_counter()
    worst = {}
    samples = [gn.prepare_shape(s, a, n_points=16) for s, a in small_corpus[::4]]
    for dir_loss in ("squared", "norm"):
        for name, w in (("cls", (1, 0, 0)), ("dir", (0, 1, 0)), ("pos", (0, 0, 1)), ("total", (1, 1, 1))):
            cfg = GNNConfig(n_points=16, feat_dim=8, hidden=8, rounds=2, dir_loss=dir_loss,
                            w_cls=w[0], w_dir=w[1], w_pos=w[2])
            batch = gn.collate(samples)
            rows = nn.gradient_check(lambda t: gn.batch_loss(batch, t, cfg)[0], gn.init_params(cfg),
                                     n_probes=10, h=1e-4, seed=1, min_abs=1e-7)
            assert len(rows) >= 10
            worst[f"{name}/{dir_loss}"] = max(rel_errors(rows))
    shape, ann = small_corpus[0]
    pairs = [p for p, _ in fz.gen_training_pairs(shape, ann, n_neg=1, seed=0, amounts_per_edge=1,
                                                 n_movable=16, n_reference=16)[:2]]
    rows = nn.gradient_check(lambda t: fz.bce_loss(pairs, [1, 0], t)[0], fz.init_params(hidden=8, global_dim=16,
                             head_hidden=8), n_probes=10, h=1e-4, min_abs=1e-7)
    assert len(rows) >= 10
    worst["bce"] = max(rel_errors(rows))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    verdict(capsys, 1, ok, f"max rel err {max(worst.values()):.2e} over {len(worst)} losses, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_loss_oracles(capsys):
    rng = np.random.default_rng(0)
    uniform = np.full(10, 0.1)
    cls_err = max(abs(gn.loss_cls(uniform, t) - math.log(10)) for t in type_classes("fine"))

    p, p_hat = rng.normal(size=3), rng.normal(size=3)
    d_hat = rng.normal(size=3)
    d_hat /= np.linalg.norm(d_hat)
    base = gn.loss_pos(p, p_hat, d_hat)
    pos_var = max(abs(gn.loss_pos(p + t * d_hat, p_hat, d_hat) - base) for t in rng.uniform(-1, 1, 100))

    # garbage (NaN) geometry on the heads a type ignores must not leak in
    logits = rng.normal(size=10)
    nan = np.full(3, np.nan)
    masked = 0
    for t in type_classes("fine"):
        gt = MotionParams(t, (0.0, 0.0, 1.0) if t.is_mobile else None, (0.1, 0.2, 0.3) if t.has_pivot else None)
        d = rng.normal(size=3) if t.is_mobile else nan
        pos = rng.normal(size=3) if t.has_pivot else nan
        pred = gn.EdgePrediction(logits, d, pos)
        expect = gn.loss_cls(pred.type_probs, t)
        if t.is_mobile:
            expect += gn.loss_dir(d, gt.dir)
        if t.has_pivot:
            expect += gn.loss_pos(pos, gt.pos, gt.dir)
        got = gn.total_loss(pred, gt)
        masked += bool(np.isfinite(got) and abs(got - expect) <= 1e-12)
    ok = cls_err <= 1e-9 and pos_var < 1e-12 and masked == 10
    verdict(capsys, 2, ok, f"|cls-ln10|={cls_err:.1e}, pos variation {pos_var:.1e}, masking {masked}/10 types")


# ---------------------------------------------------------------- 3


def _recovered(gt, params):
    if geo.angle_between_axes(gt.dir, params.dir) > 1.0:
        return False
    if gt.pos is None:
        return True
    return geo.line_to_line_distance(geo.Line(gt.dir, gt.pos), geo.Line(params.dir, params.pos)) <= 0.02


def test_criterion_3_candidate_selection(desk, capsys):
    start = time.perf_counter()
    held_out = list(synthdata.iter_dataset(CATEGORIES, 100, seed=1000, points_per_leaf=DESK["points_per_leaf"]))
    oracle = rf.OracleFeasibility([a for _, a in held_out])
    learned = rf.LearnedFeasibility(desk["feas"])
    only_sf = rf.ScoreWeights(1.0, 0.0, 0.0)  # the network prediction gets no say
    hits = {"oracle": {}, "learned": {}}
    for shape, ann in held_out:
        for e in ann.edges:
            if not e.gt.mtype.is_mobile:
                continue
            edge = SiblingEdge(e.src, e.ref, e.gt, e.gt)
            hits["oracle"].setdefault(shape.category, []).append(
                _recovered(e.gt, rf.select_axis(edge, shape, oracle).params))
            hits["learned"].setdefault(shape.category, []).append(
                _recovered(e.gt, rf.select_axis(edge, shape, learned, only_sf).params))
    elapsed = time.perf_counter() - start
    oracle_rate = {c: float(np.mean(v)) for c, v in hits["oracle"].items()}
    learned_rate = float(np.mean([x for v in hits["learned"].values() for x in v]))
    ok = min(oracle_rate.values()) == 1.0 and learned_rate >= 0.9 and elapsed < 600
    verdict(capsys, 3, ok, f"oracle worst category {min(oracle_rate.values()):.3f}, "
                           f"learned {learned_rate:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_trends(desk, capsys):
    o = desk["overall"]
    checks = {
        "dist OBB_fine<=GNN_fine": o["OBB_fine"]["mean_dist"] <= o["GNN_fine"]["mean_dist"],
        "angle GNN_fine<=GNN_coarse": o["GNN_fine"]["mean_angle_deg"] <= o["GNN_coarse"]["mean_angle_deg"],
        "angle OBB_fine<=OBB_coarse": o["OBB_fine"]["mean_angle_deg"] <= o["OBB_coarse"]["mean_angle_deg"],
        "training<30min": desk["train_seconds"] < 1800,
    }
    table = ", ".join(f"{k} {v['mean_angle_deg']:.2f}deg/{v['mean_dist']:.4f}" for k, v in sorted(o.items()))
    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 4, not failed, f"{table}; train {desk['train_seconds']:.0f}s" +
            (f"; failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 5


def test_criterion_5_quality(desk, capsys):
    o = desk["overall"]["OBB_fine"]
    ok = o["type_accuracy"] >= 0.9 and o["median_angle_deg"] <= 15.0 and o["median_dist"] <= 0.1
    verdict(capsys, 5, ok, f"OBB_fine accuracy {o['type_accuracy']:.3f}, median angle "
                           f"{o['median_angle_deg']:.2f}deg, median dist {o['median_dist']:.4f}")


# ---------------------------------------------------------------- 6


def _tree(*scores):
    hinge = MotionParams(MotionType.R_V_S, (0, 0, 1), (0, 0, 0))
    return rf.MobilityTree("s", [rf.MobilityNode((f"p{i}",), "base", hinge, (f"p{i}", "base"), score=s)
                                 for i, s in enumerate(scores)])


def test_criterion_6_filtering(capsys):
    items = [(_tree(s), s) for s in (0.59, 0.60, 0.61)]
    kept = [s for _, s in rf.filter_pseudo_labels(items, 0.6)]
    rng = np.random.default_rng(0)
    pool = [(_tree(*rng.uniform(0, 1, rng.integers(1, 4))), k) for k in range(50)] + items
    counts, sets = [], []
    for tau in (0.0, 0.3, 0.6, 0.9, 1.1):
        ids = {k for _, k in rf.filter_pseudo_labels(pool, tau)}
        counts.append(len(ids))
        sets.append(ids)
    monotone = all(b <= a for a, b in zip(sets, sets[1:]))
    ok = kept == [0.61] and monotone and counts[-1] == 0 and counts[0] == len(pool)
    verdict(capsys, 6, ok, f"kept at 0.6: {kept}, kept counts over tau: {counts}")


# ---------------------------------------------------------------- 7


def test_criterion_7_mobility_tree(capsys):
    shape = make_shape({
        "body": ([0.0, 0.0, 0.0], [1.0, 0.5, 1.0]),
        "door": ([0.0, -0.04, 0.5], [0.6, 0.0, 1.0]),
        "knob": ([0.5, -0.08, 0.7], [0.55, -0.04, 0.75]),
        "drawer": ([0.05, -0.1, 0.05], [0.95, 0.0, 0.4]),
        "pull": ([0.4, -0.14, 0.2], [0.6, -0.1, 0.25]),
    }, sid="cab", n=600)
    hinge = MotionParams(MotionType.R_V_S, (0.0, 0.0, 1.0), (0.0, -0.02, 0.75))
    knob_hinge = MotionParams(MotionType.R_V_S, (0.0, 0.0, 1.0), (0.5, -0.06, 0.7))
    slide = MotionParams(MotionType.P_H, (0.0, -1.0, 0.0))
    fixed = MotionParams(MotionType.FIXED)
    still = MotionParams(MotionType.NONE)

    def p(src, ref, params, prob=0.9):
        probs = np.full(10, (1 - prob) / 9)
        probs[params.mtype.index] = prob
        return SiblingEdge(src, ref, pred=params, pred_logits=tuple(np.log(probs)))

    preds = AnnotationSet("cab", [
        p("body", "door", still), p("body", "drawer", still),   # pruned: the body never moves
        p("door", "body", hinge), p("knob", "body", knob_hinge, 0.8),
        p("knob", "door", fixed),                                 # same reference: merge, door is larger
        p("drawer", "body", slide), p("pull", "drawer", fixed),   # pull has no mobile edge: not a node
        p("drawer", "pull", slide, 0.6),                          # weaker competitor loses to the body edge
    ])
    tree = rf.merge_fixed_siblings(rf.extract_mobility_tree(shape, preds), preds, shape)
    got = [(n.parts, n.ref, n.params) for n in tree.nodes]
    expected = [(("door", "knob"), "body", hinge), (("drawer",), "body", slide)]
    by_points = rf.merge_fixed_siblings(rf.extract_mobility_tree(shape, preds), preds, shape, "points")
    # every part has the same point count, so by points the Fixed edge's source (knob) wins the tie
    ok = got == expected and by_points.nodes[0].params == knob_hinge
    verdict(capsys, 7, ok, f"tree {[(n[0], n[1], n[2].mtype.value) for n in got]}")


# ---------------------------------------------------------------- 8


def _pipeline(root):
    data, s = root / "data", str
    steps = [
        ["synth", "--out", s(data), "--count", "4", "--categories", "door_set,laptop", "--seed", "5",
         "--points-per-leaf", "200"],
        ["train-gnn", "--data", s(data), "--out", s(root / "gnn.json"), "--epochs", "3", "--n-points", "32",
         "--seed", "5"],
        ["train-feas", "--data", s(data), "--out", s(root / "feas.json"), "--epochs", "1", "--seed", "5"],
        ["predict", "--data", s(data), "--gnn", s(root / "gnn.json"), "--feas", s(root / "feas.json"),
         "--split", "all", "--out", s(root / "pred")],
        ["eval", "--data", s(data), "--split", "all", "--pred", s(root / "pred"), "--out", s(root / "eval")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    needed = {"gnn.json", "feas.json", "eval/report.json", "eval/report.txt"}
    ok = not differing and needed <= a.keys()
    verdict(capsys, 8, ok, f"{len(a)} files compared, differing: {differing or 'none'}")


# ---------------------------------------------------------------- 9


def _dense_line_distance(a, b, half=200.0, n=401, zooms=7):
    """Grid search over both line parameters, repeatedly zoomed in."""
    cs, ct, span = 0.0, 0.0, half
    for _ in range(zooms):
        s = cs + np.linspace(-span, span, n)
        t = ct + np.linspace(-span, span, n)
        pa = a.point + s[:, None] * a.dir
        pb = b.point + t[:, None] * b.dir
        d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        best, cs, ct = d[i, j], s[i], t[j]
        span *= 0.1
    return float(best)


def test_criterion_9_geometry(capsys):
    rng = np.random.default_rng(0)
    line_err = 0.0
    for _ in range(100):
        a = geo.Line(rng.normal(size=3), rng.uniform(-1, 1, 3))
        b = geo.Line(rng.normal(size=3), rng.uniform(-1, 1, 3))
        line_err = max(line_err, abs(geo.line_to_line_distance(a, b) - _dense_line_distance(a, b)))

    pts = rng.uniform(-1, 1, (200, 3))
    ref = pdist(pts)
    motion_err = 0.0
    for t in (MotionType.R_H_S, MotionType.P_V, MotionType.PR_V):
        for _ in range(10):
            params = MotionParams(t, tuple(rng.normal(size=3)), tuple(rng.normal(size=3)) if t.has_pivot else None)
            moved = geo.apply_motion(pts, params, rng.uniform(-3, 3))
            motion_err = max(motion_err, float(np.abs(pdist(moved) - ref).max()))

    vol_err = 0.0
    for k in range(20):
        lo = rng.uniform(-1, 0, 3)
        cloud = box_points(lo, lo + rng.uniform(0.1, 1.0, 3), 800, seed=k)
        base = geo.compute_obb(cloud).volume
        R = Rotation.random(random_state=k).as_matrix()
        vol_err = max(vol_err, abs(geo.compute_obb(cloud @ R.T).volume - base) / base)

    ok = line_err <= 1e-3 and motion_err <= 1e-9 and vol_err < 0.01
    verdict(capsys, 9, ok, f"line dist err {line_err:.1e}, motion distortion {motion_err:.1e}, "
                           f"OBB volume err {vol_err:.2%}")


def test_report_json_is_plain(tmp_path):
    # the determinism check relies on reports carrying no paths or timestamps
    a = _pipeline(tmp_path / "x")
    doc = json.loads(a["eval/report.json"])
    assert str(tmp_path) not in json.dumps(doc)
