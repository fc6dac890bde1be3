"""Reading generated datasets (``shapes/``, ``annotations/``, ``manifest.json``)."""

from __future__ import annotations

import json
from pathlib import Path

from .io import load_annotations, load_shape


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def split_ids(data_dir, split="all"):
    """Shape ids of a split; ``all`` lists every shape file."""
    data_dir = Path(data_dir)
    if split == "all":
        return sorted(p.stem for p in (data_dir / "shapes").glob("*.json"))
    manifest = load_manifest(data_dir)
    if manifest is None:
        raise FileNotFoundError(f"{data_dir}: no manifest.json for split {split!r}")
    if split not in manifest:
        raise KeyError(f"manifest has no split {split!r}")
    return list(manifest[split])


def load_split(data_dir, split="all", annotations=True):
    """``(shapes, annotation sets or None)`` for one split, in id order."""
    data_dir = Path(data_dir)
    ids = split_ids(data_dir, split)
    shapes = [load_shape(data_dir / "shapes" / f"{i}.json") for i in ids]
    if not annotations:
        return shapes, None
    anns = []
    for i, s in zip(ids, shapes):
        a = load_annotations(data_dir / "annotations" / f"{i}.json")
        if a.shape_id != s.id:
            raise ValueError(f"annotation {i}.json is for shape {a.shape_id!r}, not {s.id!r}")
        anns.append(a)
    return shapes, anns
