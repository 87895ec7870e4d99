"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only what the fully-connected 2D experiments need: affine layers, a few
activations, batch normalization, elementwise arithmetic, reductions and
Adam.  Everything is float64.

Typical use::

    tape = Tape()
    out = net.forward(x, tape)
    loss = mean(out, tape)
    backward(tape, loss, net.params)
    adam_step(net.params, opt)
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateBatch, DisconnectedNodeWarning, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, which is already a topological
    order of the graph; ``backward`` replays them in reverse.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def record(self, op, out, inputs, backward_fn):
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite output from {op}")
        self.nodes.append(Node(out, tuple(inputs), backward_fn, op))
        return out

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def _needs_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, *inputs) -> Tensor:
    t = Tensor(data)
    t.requires_grad = _needs_grad(*inputs)
    return t


def _record(tape, op, out, inputs, fn):
    if tape is not None and out.requires_grad:
        tape.record(op, out, inputs, fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- layers -------------------------------------------------------------------


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map ``x @ W + b`` for ``x`` of shape (batch, in)."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatch(f"cannot apply weights {weights.shape} to input {x.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeMismatch(f"bias {bias.shape} does not match weights {weights.shape}")
    out = _result(x.data @ weights.data + bias.data, x, weights, bias)

    def back(g):
        return (
            g @ weights.data.T if x.requires_grad else None,
            x.data.T @ g if weights.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _record(tape, "fc", out, (x, weights, bias), back)


@dataclass(frozen=True)
class Activation:
    kind: str  # relu | leaky_relu | tanh | sigmoid | identity
    slope: float = 0.2

    @classmethod
    def parse(cls, name: str):
        name = name.lower()
        if name.startswith("leaky"):
            _, _, s = name.partition(":")
            return cls("leaky_relu", float(s) if s else 0.2)
        if name not in ("relu", "tanh", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {name!r}")
        return cls(name)


RELU = Activation("relu")
TANH = Activation("tanh")
SIGMOID = Activation("sigmoid")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(kind: Activation | str, x: Tensor, tape: Tape | None = None) -> Tensor:
    if isinstance(kind, str):
        kind = Activation.parse(kind)
    a = x.data
    if kind.kind == "relu":
        y = np.maximum(a, 0.0)
        local = lambda: (a > 0).astype(DTYPE)
    elif kind.kind == "leaky_relu":
        y = np.where(a > 0, a, kind.slope * a)
        local = lambda: np.where(a > 0, 1.0, kind.slope)
    elif kind.kind == "tanh":
        y = np.tanh(a)
        local = lambda: 1.0 - y * y
    elif kind.kind == "sigmoid":
        y = _sigmoid(a)
        local = lambda: y * (1.0 - y)
    elif kind.kind == "identity":
        y = a.copy()
        local = lambda: 1.0
    else:
        raise ValueError(f"unknown activation {kind.kind!r}")
    out = _result(y, x)
    return _record(tape, kind.kind, out, (x,), lambda g: (g * local(),))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, features: int, momentum: float = 0.9, eps: float = 1e-5):
        return cls(np.zeros(features), np.ones(features), momentum, eps)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    state: BatchNormState,
    tape: Tape | None = None,
    update_stats: bool = True,
) -> Tensor:
    """Per-feature normalization of a (batch, features) input.

    ``mode="train"`` normalizes with the (biased) batch statistics and folds
    them into the running averages; ``mode="eval"`` uses the running ones.
    """
    a = x.data
    if a.ndim != 2 or gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ShapeMismatch(f"batchnorm shapes: x {a.shape}, gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    if mode == "train":
        n = a.shape[0]
        if n < 2:
            raise DegenerateBatch(f"train-mode batchnorm needs batch >= 2, got {n}")
        mean = a.mean(axis=0)
        centered = a - mean
        var = (centered * centered).mean(axis=0)
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mean
            state.running_var = m * state.running_var + (1.0 - m) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out = _result(xhat * gamma.data + beta.data, x, gamma, beta)

        def back(g):
            gxhat = g * gamma.data
            gx = None
            if x.requires_grad:
                gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            return (
                gx,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta.requires_grad else None,
            )

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (a - state.running_mean) * inv_std
        out = _result(xhat * gamma.data + beta.data, x, gamma, beta)

        def back(g):
            return (
                g * gamma.data * inv_std if x.requires_grad else None,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta.requires_grad else None,
            )

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _record(tape, "batchnorm", out, (x, gamma, beta), back)


# -- elementwise and reductions -----------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = _result(a.data + b.data, a, b)
    return _record(tape, "add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = _result(a.data - b.data, a, b)
    return _record(tape, "sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = _result(a.data * b.data, a, b)
    return _record(tape, "mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, k: float, tape=None) -> Tensor:
    out = _result(a.data * k, a)
    return _record(tape, "scale", out, (a,), lambda g: (g * k,))


def exp(a: Tensor, tape=None) -> Tensor:
    y = np.exp(a.data)
    out = _result(y, a)
    return _record(tape, "exp", out, (a,), lambda g: (g * y,))


def square(a: Tensor, tape=None) -> Tensor:
    out = _result(a.data * a.data, a)
    return _record(tape, "square", out, (a,), lambda g: (2.0 * g * a.data,))


def log_sigmoid(a: Tensor, tape=None) -> Tensor:
    """``log(sigmoid(a))`` without overflow."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    out = _result(y, a)
    return _record(tape, "log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


def columns(a: Tensor, start: int, stop: int, tape=None) -> Tensor:
    out = _result(a.data[:, start:stop].copy(), a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record(tape, "columns", out, (a,), back)


def total(a: Tensor, tape=None) -> Tensor:
    out = _result(np.array(a.data.sum()), a)
    return _record(tape, "sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, tape=None) -> Tensor:
    n = a.data.size
    out = _result(np.array(a.data.mean()), a)
    return _record(tape, "mean", out, (a,), lambda g: (np.full(a.shape, float(g) / n),))


def sum_rows(a: Tensor, tape=None) -> Tensor:
    """Sum over the feature axis of a (batch, features) tensor."""
    out = _result(a.data.sum(axis=1), a)
    return _record(tape, "sum_rows", out, (a,),
                   lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),))


# -- backward -----------------------------------------------------------------


class ParamSet(dict):
    """Named parameters; each Tensor's ``grad`` is its gradient buffer."""

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}


def backward(
    tape: Tape,
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
    wrt: Sequence[Tensor] = (),
    seeds: Iterable[tuple[Tensor, np.ndarray]] = (),
) -> list[np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Gradients are *accumulated* into the ``grad`` buffer of every leaf tensor
    with ``requires_grad`` (parameters, designated inputs).  ``seeds`` adds
    extra upstream gradient at intermediate tensors, e.g. an externally
    estimated gradient w.r.t. generated samples.  Returns the total gradient
    reaching each tensor in ``wrt`` (zeros if unreachable).
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t, g in seeds:
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != t.shape:
            raise ShapeMismatch(f"seed gradient {g.shape} for tensor {t.shape}")
        grads[id(t)] = grads.get(id(t), 0.0) + g

    wanted = {id(t) for t in wrt}
    captured: dict[int, np.ndarray] = {}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    produced = {id(n.out) for n in tape.nodes}

    for node in reversed(tape.nodes):
        key = id(node.out)
        g = grads.pop(key, None)
        if g is None:
            continue
        if key in wanted:
            captured[key] = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in produced:
                grads[tid] = grads[tid] + gi if tid in grads else gi
            elif tid in leaves:
                leaves[tid] = (t, leaves[tid][1] + gi)
            else:
                leaves[tid] = (t, gi)

    # seeds placed directly on leaves (or a loss that is itself a leaf)
    for tid, g in grads.items():
        if tid not in produced:
            t = loss if tid == id(loss) else next((s for s, _ in seeds if id(s) == tid), None)
            if t is not None and t.requires_grad:
                leaves[tid] = (t, leaves[tid][1] + g) if tid in leaves else (t, g)

    for t, g in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g
        if id(t) in wanted:
            captured[id(t)] = g

    if params is not None:
        missing = [name for name, p in params.items() if id(p) not in leaves]
        if missing:
            warnings.warn(
                f"parameters not connected to the loss: {missing}",
                DisconnectedNodeWarning,
                stacklevel=2,
            )
    return [captured.get(id(t), np.zeros_like(t.data)) for t in wrt]


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update, then zero the gradient buffers."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0


# -- networks -----------------------------------------------------------------


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class MLP:
    """Feed-forward stack described by a layer string such as
    ``"fc:4:128,bn,relu,fc:128:128,bn,relu,fc:128:2"``."""

    def __init__(self, layers: str | Sequence[str], rng: np.random.Generator, name: str = "net"):
        if isinstance(layers, str):
            layers = [s.strip() for s in layers.split(",") if s.strip()]
        self.layers = list(layers)
        self.name = name
        self.params = ParamSet()
        self.bn_states: dict[str, BatchNormState] = {}
        self._plan = []
        width = None
        for i, spec in enumerate(self.layers):
            kind, *args = spec.split(":")
            if kind == "fc":
                fan_in, fan_out = int(args[0]), int(args[1])
                if width is not None and width != fan_in:
                    raise ShapeMismatch(f"layer {i} expects width {fan_in}, got {width}")
                w = Tensor(glorot_uniform(fan_in, fan_out, rng), requires_grad=True, name=f"{i}.w")
                b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{i}.b")
                self.params[f"{i}.w"], self.params[f"{i}.b"] = w, b
                self._plan.append(("fc", f"{i}.w", f"{i}.b"))
                width = fan_out
            elif kind == "bn":
                g = Tensor(np.ones(width), requires_grad=True, name=f"{i}.gamma")
                b = Tensor(np.zeros(width), requires_grad=True, name=f"{i}.beta")
                self.params[f"{i}.gamma"], self.params[f"{i}.beta"] = g, b
                self.bn_states[str(i)] = BatchNormState.create(width)
                self._plan.append(("bn", f"{i}.gamma", f"{i}.beta", str(i)))
            else:
                self._plan.append(("act", Activation.parse(spec)))
        self.in_features = int(self.layers[0].split(":")[1])
        self.out_features = width

    def forward(self, x: Tensor, tape: Tape | None = None, train: bool = True,
                update_stats: bool = True) -> Tensor:
        x = as_tensor(x)
        p = self.params
        for step in self._plan:
            if step[0] == "fc":
                x = fc_forward(x, p[step[1]], p[step[2]], tape)
            elif step[0] == "bn":
                x = batchnorm(x, p[step[1]], p[step[2]], "train" if train else "eval",
                              self.bn_states[step[3]], tape, update_stats=update_stats)
            else:
                x = activation(step[1], x, tape)
        return x

    def predict(self, x, batch_size: int = 8192) -> np.ndarray:
        """Eval-mode forward without recording, chunked for large inputs."""
        x = np.asarray(x, dtype=DTYPE)
        outs = [self.forward(Tensor(x[i:i + batch_size]), None, train=False).data
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn_states.items():
            out[f"{self.name}/{k}.running_mean"] = s.running_mean
            out[f"{self.name}/{k}.running_var"] = s.running_var
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data[...] = arrays[f"{self.name}/{k}"]
        for k, s in self.bn_states.items():
            s.running_mean = np.array(arrays[f"{self.name}/{k}.running_mean"])
            s.running_var = np.array(arrays[f"{self.name}/{k}.running_var"])


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and
    ``<path>.json`` mapping each name to its shape and byte offset."""
    path = Path(path)
    manifest = {"dtype": "<f8", "tensors": {}}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            manifest["tensors"][name] = {"shape": list(a.shape), "offset": offset}
            fh.write(a.tobytes())
            offset += a.nbytes
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype=manifest["dtype"], count=count,
                                  offset=meta["offset"]).reshape(shape).astype(DTYPE)
    return out
