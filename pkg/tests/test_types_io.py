import json
import math

import numpy as np
import pytest

from kinemo import io
from kinemo.types import (
    AnnotationSet,
    CoarseType,
    MotionParams,
    MotionType,
    PartNode,
    Shape,
    SiblingEdge,
    parse_type,
    type_classes,
)

from conftest import box_points


def door_doc(lo=0.0, hi=1.0):
    pts_a = box_points([lo, lo, lo], [lo + 0.1 * (hi - lo), hi, hi], 50, 0)
    pts_b = box_points([lo + 0.1 * (hi - lo), lo, lo], [hi, lo + 0.05 * (hi - lo), hi], 50, 1)
    return {
        "id": "door",
        "category": "door_set",
        "root": "root",
        "nodes": [
            {"id": "root", "children": ["frame", "leaf"]},
            {"id": "frame", "children": [], "points": pts_a.tolist()},
            {"id": "leaf", "children": [], "points": pts_b.tolist()},
        ],
    }


def write(tmp_path, doc, name="shape.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_two_box_door_loads(tmp_path):
    shape = io.load_shape(write(tmp_path, door_doc()))
    assert len(shape.nodes) == 3
    assert [n.id for n in shape.nodes if n.is_leaf] == ["frame", "leaf"]


def test_root_as_child_of_leaf_is_a_cycle(tmp_path):
    doc = door_doc()
    doc["nodes"][1]["children"] = ["root"]
    doc["nodes"][1].pop("points")
    with pytest.raises(io.ShapeValidationError, match="cycle"):
        io.load_shape(write(tmp_path, doc))


def test_normalization_maps_into_unit_cube(tmp_path):
    shape = io.load_shape(write(tmp_path, door_doc(-1.0, 2.0)))
    allp = np.concatenate([n.points for n in shape.nodes if n.is_leaf])
    assert allp.min() >= 0.0 and allp.max() <= 1.0
    assert math.isclose(float((allp.max(0) - allp.min(0)).max()), 1.0, rel_tol=1e-12)
    raw = shape.normalization.invert(allp)
    assert raw.min() == pytest.approx(-1.0) and raw.max() == pytest.approx(2.0)


def test_normalization_keeps_aspect_ratio(tmp_path):
    doc = door_doc(-1.0, 2.0)
    shape = io.load_shape(write(tmp_path, doc))
    raw = np.ptp(np.array(doc["nodes"][2]["points"]), axis=0)
    ext = np.ptp(shape.part_points("leaf"), axis=0)
    assert ext / ext[0] == pytest.approx(raw / raw[0], rel=1e-9)


def test_valid_shape_has_no_violations():
    shape = io.shape_from_dict(door_doc())
    assert io.validate_hierarchy(shape) == []


def test_duplicate_id_is_named():
    shape = io.shape_from_dict(door_doc())
    dup = shape.with_nodes(list(shape.nodes) + [PartNode("leaf", "", (), shape["leaf"].points)])
    problems = io.validate_hierarchy(dup)
    assert [(v.node_id, v.message) for v in problems if "duplicate" in v.message] == [("leaf", "duplicate node id")]


def test_internal_node_with_points():
    shape = io.shape_from_dict(door_doc())
    nodes = [PartNode("root", "", ("frame", "leaf"), shape["leaf"].points)] + list(shape.nodes[1:])
    problems = io.validate_hierarchy(shape.with_nodes(nodes))
    assert len(problems) == 1 and problems[0].message == "internal node carries points"


def test_unknown_keys_rejected(tmp_path):
    doc = door_doc()
    doc["colour"] = "red"
    with pytest.raises(io.SchemaError):
        io.load_shape(write(tmp_path, doc))


def test_empty_edge_list_round_trip(tmp_path):
    p = tmp_path / "a.json"
    io.save_annotations(AnnotationSet("s", []), p)
    assert json.loads(p.read_text())["edges"] == []
    assert io.load_annotations(p) == AnnotationSet("s", [])


def test_enum_string_is_exact(tmp_path):
    p = tmp_path / "a.json"
    e = SiblingEdge("leaf", "frame", gt=MotionParams(MotionType.R_V_S, (0, 0, 1), (0.1, 0.2, 0.3)))
    io.save_annotations(AnnotationSet("s", [e]), p)
    assert json.loads(p.read_text())["edges"][0]["type"] == "R_V_S"


def test_five_edge_round_trip(tmp_path):
    edges = [
        SiblingEdge("a", "b", gt=MotionParams(MotionType.R_H_C, (1, 0, 0), (0.5, 0.5, 0.5))),
        SiblingEdge("b", "a", gt=MotionParams(MotionType.FIXED)),
        SiblingEdge("c", "a", gt=MotionParams(MotionType.P_H, (0, -1, 0))),
        SiblingEdge("a", "c", gt=MotionParams(MotionType.NONE)),
        SiblingEdge("d", "a", gt=MotionParams(MotionType.PR_V, (0, 0, 1), (0.25, 0.75, 0.0))),
    ]
    p = tmp_path / "a.json"
    io.save_annotations(AnnotationSet("s", edges), p)
    assert io.load_annotations(p) == AnnotationSet("s", edges)


def test_unknown_type_rejected():
    with pytest.raises(ValueError, match="unknown motion type"):
        io.annotations_from_dict({"shape_id": "s", "edges": [{"src": "a", "ref": "b", "type": "R_X"}]})


def test_predictions_accept_coarse_types():
    doc = {"shape_id": "s", "edges": [{"src": "a", "ref": "b", "type": "R", "dir": [0, 0, 1], "pos": [0, 0, 0]}]}
    assert io.annotations_from_dict(doc, as_pred=True).edges[0].pred.mtype is CoarseType.R
    with pytest.raises(ValueError):
        io.annotations_from_dict(doc)


def test_motion_type_taxonomy():
    assert len(MotionType) == 10
    assert [t.index for t in type_classes("fine")] == list(range(10))
    assert {t.coarse for t in MotionType if t.value.startswith("R_")} == {CoarseType.R}
    assert MotionType.from_parts("R", "V", "S") is MotionType.R_V_S
    assert MotionType.P_H.has_pivot is False and MotionType.PR_V.has_pivot is True
    assert parse_type("PR") is CoarseType.PR


def test_params_drop_irrelevant_fields_and_normalize():
    p = MotionParams(MotionType.P_V, (0, 0, 2), (1, 1, 1))
    assert p.dir == (0.0, 0.0, 1.0) and p.pos is None
    assert MotionParams(MotionType.FIXED, (1, 0, 0)).dir is None
    with pytest.raises(ValueError):
        MotionParams(MotionType.R_V_S, (0, 0, 1))
    with pytest.raises(ValueError):
        MotionParams(MotionType.P_V, (0, 0, 0))


def test_self_edge_rejected():
    with pytest.raises(ValueError):
        SiblingEdge("a", "a")


def test_bottom_up_children_first():
    shape = Shape("s", "c", "r", [PartNode("r", "", ("a", "b")), PartNode("a", "", ("c",)),
                                  PartNode("b", "", (), np.eye(4, 3)), PartNode("c", "", (), np.eye(4, 3))])
    order = shape.bottom_up()
    assert order.index("c") < order.index("a") < order.index("r")
    assert shape.leaves_under("r") == ["c", "b"]
