"""Every tunable default in one place, loadable from a JSON file.

The file mirrors the dataclass nesting, e.g.
``{"gnn": {"epochs": 50}, "refine": {"tau": 0.7}}``. Unknown keys raise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace


@dataclass
class GeometryConfig:
    adjacency_eps: float = 0.02
    interaction_delta: float = 0.03
    min_extent: float = 0.01
    snap_degrees: float = 5.0


@dataclass
class GNNConfig:
    mode: str = "fine"            # "fine" (10 classes) or "coarse" (5)
    n_points: int = 1024          # points sampled per leaf
    feat_dim: int = 64
    edge_dim: int = 16
    hidden: int = 64
    rounds: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    dir_loss: str = "squared"     # "squared" or "norm"
    w_cls: float = 1.0
    w_dir: float = 1.0
    w_pos: float = 1.0
    type_to_dir: bool = True      # feed type probabilities to the direction and pivot heads


@dataclass
class FeasConfig:
    n_movable: int = 512
    n_reference: int = 512
    hidden: int = 64
    global_dim: int = 128
    head_hidden: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    n_neg: int = 4
    amounts_per_edge: int = 2
    revolute_range: tuple = (0.2, 1.2)
    prismatic_range: tuple = (0.1, 0.4)
    distinct_distance: float = 0.05
    distinct_degrees: float = 10.0


@dataclass
class RefineConfig:
    w_f: float = 0.5
    w_d: float = 0.3
    w_p: float = 0.2
    tau: float = 0.6
    per_node_filter: bool = False
    position_scale: float = math.sqrt(3.0)
    revolute_amount: float = 0.6
    prismatic_amount: float = 0.25
    larger_part: str = "volume"   # "volume" or "points"
    seed: int = 0


@dataclass
class SynthConfig:
    points_per_leaf: int = 2000
    rotate_degrees: float = 0.0
    seed: int = 0


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    gnn: GNNConfig = field(default_factory=GNNConfig)
    feas: FeasConfig = field(default_factory=FeasConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def override(self, dotted):
        """Apply ``{"gnn.epochs": 5, ...}`` style overrides, returning a copy."""
        doc = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.partition(".")
            if section not in doc or name not in doc[section]:
                raise KeyError(f"unknown config key {key!r}")
            doc[section][name] = value
        return Config.from_dict(doc)


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise KeyError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            kwargs[name] = bool(value)
        elif isinstance(current, int):
            kwargs[name] = int(value)
        elif isinstance(current, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return replace(defaults, **kwargs)
