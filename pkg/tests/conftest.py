import numpy as np
import pytest

from kinemo import synthdata
from kinemo.types import PartNode, Shape


def box_points(lo, hi, n=400, seed=0):
    """Surface samples of an axis-aligned box."""
    box = synthdata.Box.span(lo, hi)
    return box.sample_surface(n, np.random.default_rng(seed))


def make_shape(parts, sid="s", category="test", children=None, seed=0, n=400):
    """Shape from ``{leaf: (lo, hi)}``; leaves are children of the root unless ``children`` says otherwise."""
    children = children or {"root": list(parts)}
    nodes = []
    for nid, kids in children.items():
        nodes.append(PartNode(nid, nid, tuple(kids)))
    for k, (pid, (lo, hi)) in enumerate(parts.items()):
        nodes.append(PartNode(pid, pid, (), box_points(lo, hi, n, seed + k)))
    return Shape(sid, category, "root", nodes)


@pytest.fixture(scope="session")
def door():
    return synthdata.gen_shape("door_set", 7, points_per_leaf=400)


@pytest.fixture(scope="session")
def small_corpus():
    cats = ["door_set", "laptop", "storage_furniture", "scissors", "bottle"]
    return list(synthdata.iter_dataset(cats, 4, seed=3, points_per_leaf=300))
