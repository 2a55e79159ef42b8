"""Finite-difference checks for every layer and loss in the engine.

Each registered subgraph builds a random float64 instance and a scalar
function of its leaves. The analytic gradient from ``backward()`` is
compared with central differences (h = 1e-5) on a sample of coordinates;
the per-instance error is ``max|a - n| / max(max|a|, max|n|)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from trajssl.nn import lossops
from trajssl.nn import tensor as T
from trajssl.nn.model import HeadSpec, Model, ModelConfig, flatten_tap, head_forward, make_head
from trajssl.nn.tensor import Tensor

FD_STEP = 1e-5
SHALLOW_TOL = 1e-4
DEEP_TOL = 1e-3


@dataclass
class Subgraph:
    name: str
    build: Callable  # rng -> (leaves: dict[str, ndarray], fn: dict[str, Tensor] -> scalar Tensor)
    tol: float = SHALLOW_TOL
    coords: int = 16


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _linear(rng):
    leaves = {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(5, 6)), "b": rng.normal(size=5)}
    c = rng.normal(size=(4, 5))
    return leaves, lambda t: (T.linear(t["x"], t["w"], t["b"]) * Tensor(c)).sum()


def _identity_linear(rng):
    leaves = {"x": rng.normal(size=(3, 5))}
    w, b = Tensor(np.eye(5)), Tensor(np.zeros(5))
    c = rng.normal(size=(3, 5))
    return leaves, lambda t: (T.linear(t["x"], w, b) * Tensor(c)).sum()


def _conv(rng):
    leaves = {"x": rng.normal(size=(2, 6, 6, 3)), "w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)}
    c = rng.normal(size=(2, 6, 6, 4))
    return leaves, lambda t: (T.conv2d(t["x"], t["w"], t["b"]) * Tensor(c)).sum()


def _unary(op, shape=(3, 4)):
    def build(rng):
        leaves = {"x": rng.normal(size=shape)}
        c = rng.normal(size=op(Tensor(leaves["x"])).shape)
        return leaves, lambda t: (op(t["x"]) * Tensor(c)).sum()
    return build


def _positive_unary(op):
    def build(rng):
        leaves = {"x": rng.uniform(0.5, 2.0, size=(3, 4))}
        c = rng.normal(size=(3, 4))
        return leaves, lambda t: (op(t["x"]) * Tensor(c)).sum()
    return build


def _binary(op):
    def build(rng):
        leaves = {"a": rng.normal(size=(3, 4)), "b": rng.uniform(0.5, 2.0, size=(1, 4))}
        c = rng.normal(size=(3, 4))
        return leaves, lambda t: (op(t["a"], t["b"]) * Tensor(c)).sum()
    return build


def _matmul(rng):
    leaves = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    c = rng.normal(size=(3, 2))
    return leaves, lambda t: ((t["a"] @ t["b"]) * Tensor(c)).sum()


def _concat_index(rng):
    leaves = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4, 3))}
    c = rng.normal(size=(3, 3))
    return leaves, lambda t: (T.concat([t["a"], t["b"]], 0)[1:4] * Tensor(c)).sum()


def _mlp3(rng):
    dims = [5, 7, 6, 1]
    leaves = {"x": rng.normal(size=(4, 5))}
    for i in range(3):
        leaves[f"w{i}"] = rng.normal(size=(dims[i + 1], dims[i])) / np.sqrt(dims[i])
        leaves[f"b{i}"] = rng.normal(size=dims[i + 1]) * 0.1

    def fn(t):
        h = t["x"]
        for i in range(3):
            h = T.linear(h, t[f"w{i}"], t[f"b{i}"])
            if i < 2:
                h = T.relu(h)
        return h.sum()

    return leaves, fn


def _head(kind, in_dim, hidden, out_dim):
    def build(rng):
        spec = HeadSpec(kind, in_dim, hidden, out_dim)
        params = make_head(spec, int(rng.integers(2**62)), dtype=np.float64)
        leaves = {k: v.data for k, v in params.items()}
        leaves["x"] = rng.normal(size=(3, in_dim))
        c = rng.normal(size=(3, out_dim))
        return leaves, lambda t: (head_forward(spec, t, t["x"]) * Tensor(c)).sum()
    return build


def _softmax_ce(rng):
    leaves = {"z": rng.normal(size=(5, 4))}
    labels = rng.integers(0, 4, size=5)
    return leaves, lambda t: T.softmax_cross_entropy(t["z"], labels)


def _mse(rng):
    leaves = {"p": rng.normal(size=(5, 3))}
    target = rng.normal(size=(5, 3))
    return leaves, lambda t: T.mse(t["p"], target)


def _traj(rng):
    d = 64
    leaves = {k: _unit_rows(rng.normal(size=d)) for k in ("zl", "zc", "zr")}
    return leaves, lambda t: lossops.traj_loss(t["zl"], t["zc"], t["zr"])


def _ntxent(rng):
    leaves = {"za": _unit_rows(rng.normal(size=(4, 8))), "zb": _unit_rows(rng.normal(size=(4, 8)))}
    return leaves, lambda t: lossops.ntxent_loss(t["za"], t["zb"], 0.5)


def _vicreg(rng):
    leaves = {"za": rng.normal(size=(4, 8)) * 0.5, "zb": rng.normal(size=(4, 8)) * 0.5}
    return leaves, lambda t: lossops.vicreg_loss(t["za"], t["zb"])


def _encoder_traj(rng):
    model = Model(ModelConfig(), seed=int(rng.integers(2**62)), dtype=np.float64)
    leaves = {k: v.data for k, v in model.params.items() if k.startswith("encoder.")}
    images = rng.uniform(0.0, 1.0, size=(3, 1, 32, 32))

    def fn(t):
        z = T.l2_normalize(model.encode(images, params=t)["feature"])
        return lossops.traj_loss(z[0:1], z[1:2], z[2:3])

    return leaves, fn


def registry() -> list[Subgraph]:
    return [
        Subgraph("identity_linear", _identity_linear),
        Subgraph("linear", _linear),
        Subgraph("matmul", _matmul),
        Subgraph("conv2d", _conv),
        Subgraph("avg_pool2d", _unary(lambda x: T.avg_pool2d(x, 2), (2, 4, 4, 3))),
        Subgraph("global_avg_pool", _unary(T.global_avg_pool, (2, 4, 4, 3))),
        Subgraph("relu", _unary(T.relu)),
        Subgraph("exp", _unary(T.exp)),
        Subgraph("log", _positive_unary(T.log)),
        Subgraph("sqrt", _positive_unary(T.sqrt)),
        Subgraph("l2_normalize", _unary(T.l2_normalize)),
        Subgraph("add_broadcast", _binary(lambda a, b: a + b)),
        Subgraph("mul_broadcast", _binary(lambda a, b: a * b)),
        Subgraph("div_broadcast", _binary(lambda a, b: a / b)),
        Subgraph("concat_getitem", _concat_index),
        Subgraph("fancy_getitem", _unary(lambda x: x[np.array([0, 2, 2])])),
        Subgraph("flatten_tap", _unary(flatten_tap, (2, 3, 4, 5))),
        Subgraph("mean_reshape", _unary(lambda x: x.reshape(2, 6).mean(axis=1))),
        Subgraph("mlp3", _mlp3),
        Subgraph("projector", _head("projector", 8, 8, 4)),
        Subgraph("compression_head", _head("compression", 12, 6, 4)),
        Subgraph("linear_probe", _head("linear_probe", 6, 6, 3)),
        Subgraph("relpose_probe", _head("relpose_probe", 10, 10, 3)),
        Subgraph("softmax_cross_entropy", _softmax_ce),
        Subgraph("mse", _mse),
        Subgraph("traj_loss", _traj),
        Subgraph("ntxent_loss", _ntxent),
        Subgraph("vicreg_loss", _vicreg),
        Subgraph("encoder_traj_loss", _encoder_traj, tol=DEEP_TOL, coords=8),
    ]


def _central_difference(leaves: dict, fn: Callable, name: str, idx, h: float) -> float:
    base = np.array(leaves[name], dtype=np.float64)
    vals = []
    for sign in (1.0, -1.0):
        pert = base.copy()
        pert[idx] += sign * h
        args = {k: Tensor(np.array(v, dtype=np.float64)) for k, v in leaves.items()}
        args[name] = Tensor(pert)
        vals.append(float(fn(args).data))
    return (vals[0] - vals[1]) / (2 * h)


def check_instance(leaves: dict, fn: Callable, rng, coords: int, h: float = FD_STEP,
                   kink_tol: float = SHALLOW_TOL) -> float:
    """Max relative error between backward() and central differences over sampled coordinates.

    Each coordinate is also differenced at h/10. When the two estimates disagree the
    step window straddles a non-smooth point (a ReLU or max switching branch), the
    difference quotient is not an estimate of the derivative, and the coordinate is
    replaced by another draw. A wrong analytic gradient still produces consistent
    differences at both steps, so it is not masked.
    """
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in leaves.items()}
    fn(tensors).backward()
    analytic, numeric = [], []
    names = list(leaves)
    sizes = np.array([np.asarray(leaves[k]).size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(sizes.sum())
    want = min(coords, sizes.sum())
    for fi in order:
        if len(analytic) == want:
            break
        li = int(np.searchsorted(offsets, fi, side="right") - 1)
        name = names[li]
        idx = np.unravel_index(fi - offsets[li], np.shape(leaves[name]))
        coarse = _central_difference(leaves, fn, name, idx, h)
        fine = _central_difference(leaves, fn, name, idx, h / 10)
        if abs(coarse - fine) > kink_tol * max(abs(coarse), abs(fine), 1e-6):
            continue
        grad = tensors[name].grad
        analytic.append(0.0 if grad is None else float(grad[idx]))
        numeric.append(coarse)
    if not analytic:
        return 0.0
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(subgraph: Subgraph, trials: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, subgraph.name))])
    worst = 0.0
    for _ in range(trials):
        leaves, fn = subgraph.build(rng)
        err = check_instance(leaves, fn, rng, subgraph.coords)
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return CheckResult(subgraph.name, trials, worst, subgraph.tol)


def run_all(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return [grad_check(sg, trials, seed) for sg in registry()]
