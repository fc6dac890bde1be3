"""Parameter dictionaries, MLP blocks, Adam, and JSON model files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad


def init_linear(params, name, n_in, n_out, rng):
    """He-uniform weights, zero bias, stored under ``name.W`` / ``name.b``."""
    bound = np.sqrt(6.0 / n_in)
    params[f"{name}.W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
    params[f"{name}.b"] = np.zeros(n_out)


def init_mlp(params, name, sizes, rng):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, f"{name}.{i}", a, b, rng)


def linear(x, tensors, name):
    return ad.matmul(x, tensors[f"{name}.W"]) + tensors[f"{name}.b"]


def mlp(x, tensors, name, n_layers, final_relu=True):
    for i in range(n_layers):
        x = linear(x, tensors, f"{name}.{i}")
        if i < n_layers - 1 or final_relu:
            x = ad.relu(x)
    return x


def as_tensors(params):
    return {k: ad.Tensor(v, name=k) for k, v in params.items()}


def grads_of(tensors):
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def parameter_count(params):
    return int(sum(v.size for v in params.values()))


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p)) * b1 + (1 - b1) * g
            v = self.v.get(k, np.zeros_like(p)) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            if lr == 0:
                out[k] = p
                continue
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def save_model(path, config, params):
    doc = {
        "config": config,
        "tensors": {
            k: {"shape": list(v.shape), "data": [float(x) for x in np.asarray(v).ravel()]}
            for k, v in sorted(params.items())
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if set(doc) != {"config", "tensors"}:
        raise ValueError(f"{path}: not a model file")
    params = {k: np.array(t["data"], dtype=float).reshape(t["shape"]) for k, t in doc["tensors"].items()}
    return doc["config"], params


def gradient_check(loss_fn, params, n_probes=10, h=1e-4, seed=0, floor=1e-6, kink_tol=1e-2, min_abs=0.0):
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` maps a tensor dict to a scalar Tensor. Probes are drawn
    uniformly over all scalar entries. A probe whose two one-sided
    differences disagree by more than ``kink_tol`` (relative) straddles a
    ReLU/max kink, where finite differences are meaningless; it is skipped
    and another entry is drawn, as is one where both gradients are below
    ``min_abs`` (dead units). Returns ``(name, flat index, analytic,
    numeric, relative error)`` rows; the relative error uses
    ``max(|a|, |n|, floor)`` as denominator.
    """
    tensors = as_tensors(params)
    base = loss_fn(tensors)
    base.backward()
    f0 = float(base.data)
    grads = grads_of(tensors)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(int(sizes.sum()))
    rows = []
    for f in order:
        if len(rows) >= n_probes:
            break
        k = int(np.searchsorted(bounds, f, side="right"))
        name = names[k]
        idx = int(f - (bounds[k - 1] if k else 0))
        vals = []
        for step in (h, -h):
            probe = dict(params)
            arr = params[name].copy()
            arr.flat[idx] += step
            probe[name] = arr
            vals.append(float(loss_fn(as_tensors(probe)).data))
        right, left = (vals[0] - f0) / h, (f0 - vals[1]) / h
        if abs(right - left) > kink_tol * max(abs(right), abs(left), floor):
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[name].flat[idx])
        if max(abs(analytic), abs(numeric)) < min_abs:
            continue
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append((name, idx, analytic, numeric, rel))
    return rows
