import json

import numpy as np
import pytest

from kinemo import geometry as geo
from kinemo import io, synthdata
from kinemo.refinement import generate_candidates
from kinemo.types import MotionType


def test_door_has_vertical_side_hinge_on_leaf_edge(door):
    shape, ann = door
    assert {"frame", "leaf"} <= {n.id for n in shape.nodes}
    mobile = [e for e in ann.edges if e.gt.mtype.is_mobile]
    assert [(e.key, e.gt.mtype) for e in mobile] == [(("leaf", "frame"), MotionType.R_V_S)]
    gt = geo.Line(mobile[0].gt.dir, mobile[0].gt.pos)
    obb = geo.compute_obb(shape.part_points("leaf"), up=shape.up)
    vert = [c for c in geo.obb_candidate_axes(obb, shape.up) if c.is_side and abs(c.line.dir[2]) > 0.99]
    best = min(geo.line_to_line_distance(gt, c.line) for c in vert)
    assert best < 0.02


def test_two_drawer_cabinet_labels():
    # seed 2 draws two drawers and no door
    shape, ann = synthdata.gen_shape("storage_furniture", 2, points_per_leaf=300)
    types = {e.key: e.gt.mtype for e in ann.edges}
    assert types[("drawer_1", "body")] is MotionType.P_H
    assert types[("drawer_2", "body")] is MotionType.P_H
    assert types[("drawer_1", "drawer_2")] is MotionType.NONE
    assert types[("drawer_2", "drawer_1")] is MotionType.NONE


@pytest.mark.parametrize("cat", list(synthdata.CATEGORIES))
def test_same_seed_bit_identical(cat):
    a = synthdata.gen_shape(cat, 11, points_per_leaf=200)
    b = synthdata.gen_shape(cat, 11, points_per_leaf=200)
    assert io.shape_to_dict(a[0]) == io.shape_to_dict(b[0])
    assert a[1] == b[1]


@pytest.mark.parametrize("cat", list(synthdata.CATEGORIES))
def test_every_joint_is_a_box_candidate(cat):
    for seed in range(5):
        shape, ann = synthdata.gen_shape(cat, seed, points_per_leaf=300)
        assert io.validate_hierarchy(shape) == []
        for e in ann.edges:
            if not e.gt.mtype.is_mobile:
                continue
            ref = shape.part_points(e.ref)
            cands, _ = generate_candidates(shape, shape.part_points(e.src), ref, e.gt.mtype)
            errs = [synthdata.gt_candidate_distance(e.gt, c) for c in cands]
            assert any(a <= 1.0 and d <= 0.02 for a, d in errs)


def test_annotations_cover_both_directions(door):
    shape, ann = door
    keys = {e.key for e in ann.edges}
    assert all((b, a) in keys for a, b in keys)


def test_dataset_layout(tmp_path):
    synthdata.gen_dataset(["door_set", "bottle"], 5, 3, tmp_path, points_per_leaf=150)
    assert len(list((tmp_path / "shapes").glob("*.json"))) == 10
    assert len(list((tmp_path / "annotations").glob("*.json"))) == 10
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    ids = manifest["train"] + manifest["val"] + manifest["test"]
    assert sorted(ids) == sorted(p.stem for p in (tmp_path / "shapes").glob("*.json"))
    assert (len(manifest["train"]), len(manifest["val"]), len(manifest["test"])) == (7, 1, 2)


def test_saved_shapes_reload_unchanged(tmp_path):
    shape, _ = synthdata.gen_shape("laptop", 4, points_per_leaf=150)
    io.save_shape(shape, tmp_path / "s.json")
    back = io.load_shape(tmp_path / "s.json")
    for n in shape.nodes:
        if n.is_leaf:
            assert np.abs(back[n.id].points - n.points).max() < 1e-12


def test_rotated_shapes_keep_labels_consistent():
    shape, ann = synthdata.gen_shape("door_set", 5, points_per_leaf=300, rotate_deg=40)
    e = next(e for e in ann.edges if e.gt.mtype.is_mobile)
    assert geo.angle_between_axes(e.gt.dir, shape.up) < 1e-6


def test_unknown_category():
    with pytest.raises(ValueError, match="unknown category"):
        synthdata.get_spec("teapot")
