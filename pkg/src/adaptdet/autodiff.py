"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

The kernel set is deliberately small: matmul, add, multiply, scale, concat,
relu, sigmoid, log, softmax, reduce_mean, smooth_l1, plus a gradient-reversal
node (identity forward, upstream gradient multiplied by -coeff on the way
back). That is exactly what the grid detector, the domain classifiers and
their losses need; there is no broadcasting cleverness beyond numpy's rules
for add/multiply.

Graphs are append-only: node insertion order is the topological order, the
backward pass visits nodes exactly once in reverse insertion order, and
gradients accumulate additively across fan-out. Construction and backward
are single-writer; an evaluated graph is read-only and safe to share
across concurrent readers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when node inputs have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """Raised in debug mode when a node produces NaN or Inf."""


class Tensor:
    """Dense float64 value in row-major order.

    `requires_grad` marks the tensor as a gradient target when it is fed to
    a placeholder or wrapped in a parameter node.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Node:
    idx: int
    op: str
    inputs: tuple["Node", ...] = ()
    name: str | None = None            # placeholder / param
    value: np.ndarray | None = None    # param / const payload
    coeff: float = 0.0                 # scale / grl
    axis: int = 0                      # concat
    decl_shape: tuple[int, ...] | None = None  # placeholder declared shape
    requires_grad: bool = False

    def label(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"node #{self.idx} ({self.op}{tag})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded. May return `grad` itself."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Graph:
    """Append-only computation graph; insertion order is topological order."""

    def __init__(self, debug: bool = False):
        self.nodes: list[Node] = []
        self.debug = debug
        self._values: list[np.ndarray | None] = []
        self._evaluated = False

    # -- construction -------------------------------------------------------

    def _append(self, op: str, inputs: tuple[Node, ...] = (), **attrs) -> Node:
        for n in inputs:
            if not (0 <= n.idx < len(self.nodes)) or self.nodes[n.idx] is not n:
                raise ValueError(f"input {n.label()} does not belong to this graph")
        node = Node(idx=len(self.nodes), op=op, inputs=inputs, **attrs)
        self.nodes.append(node)
        self._values.append(None)
        return node

    def placeholder(self, name: str, shape: tuple[int, ...] | None = None,
                    requires_grad: bool = False) -> Node:
        return self._append("placeholder", name=name,
                            decl_shape=tuple(shape) if shape is not None else None,
                            requires_grad=requires_grad)

    def param(self, name: str, value, requires_grad: bool = True) -> Node:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._append("param", name=name, value=arr, requires_grad=requires_grad)

    def const(self, value) -> Node:
        return self._append("const", value=np.asarray(value, dtype=np.float64))

    def add(self, a: Node, b: Node) -> Node:
        return self._append("add", (a, b))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._append("matmul", (a, b))

    def multiply(self, a: Node, b: Node) -> Node:
        return self._append("multiply", (a, b))

    def scale(self, a: Node, coeff: float) -> Node:
        return self._append("scale", (a,), coeff=float(coeff))

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        if not parts:
            raise ValueError("concat needs at least one input")
        return self._append("concat", tuple(parts), axis=int(axis))

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,))

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a,))

    def log(self, a: Node) -> Node:
        return self._append("log", (a,))

    def softmax(self, a: Node) -> Node:
        return self._append("softmax", (a,))

    def reduce_mean(self, a: Node) -> Node:
        return self._append("reduce_mean", (a,))

    def smooth_l1(self, a: Node) -> Node:
        return self._append("smooth_l1", (a,))

    def grl(self, a: Node, coeff: float) -> Node:
        """Gradient reversal: identity forward, backward multiplies by -coeff."""
        if coeff < 0:
            raise ValueError(f"grl coeff must be nonnegative, got {coeff}")
        return self._append("grl", (a,), coeff=float(coeff))

    # -- execution ----------------------------------------------------------

    def _compute(self, node: Node, feeds: dict[str, Tensor]) -> np.ndarray:
        vals = self._values
        op = node.op
        if op == "placeholder":
            if node.name not in feeds:
                raise KeyError(f"no feed bound for {node.label()}")
            arr = feeds[node.name].data
            if node.decl_shape is not None and arr.shape != node.decl_shape:
                raise ShapeError(
                    f"{node.label()}: feed shape {arr.shape} != declared {node.decl_shape}")
            return arr
        if op in ("param", "const"):
            return node.value
        ins = [vals[i.idx] for i in node.inputs]
        if op == "add":
            try:
                return ins[0] + ins[1]
            except ValueError as e:
                raise ShapeError(f"{node.label()}: {ins[0].shape} + {ins[1].shape}: {e}") from e
        if op == "matmul":
            a, b = ins
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(f"{node.label()}: cannot matmul {a.shape} by {b.shape}")
            return a @ b
        if op == "multiply":
            try:
                return ins[0] * ins[1]
            except ValueError as e:
                raise ShapeError(f"{node.label()}: {ins[0].shape} * {ins[1].shape}: {e}") from e
        if op == "scale":
            return ins[0] * node.coeff
        if op == "concat":
            shapes = {a.shape[:node.axis] + a.shape[node.axis + 1:] for a in ins}
            if len(shapes) > 1:
                raise ShapeError(f"{node.label()}: mismatched shapes off axis {node.axis}")
            return np.concatenate(ins, axis=node.axis)
        if op == "relu":
            return np.maximum(ins[0], 0.0)
        if op == "sigmoid":
            x = ins[0]
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            e = np.exp(x[~pos])
            out[~pos] = e / (1.0 + e)
            return out
        if op == "log":
            return np.log(np.maximum(ins[0], LOG_FLOOR))
        if op == "softmax":
            x = ins[0]
            shifted = x - x.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            return e / e.sum(axis=-1, keepdims=True)
        if op == "reduce_mean":
            return np.asarray(ins[0].mean())
        if op == "smooth_l1":
            x = ins[0]
            a = np.abs(x)
            return np.where(a < 1.0, 0.5 * x * x, a - 0.5)
        if op == "grl":
            return ins[0]
        raise ValueError(f"unknown op kind {op!r}")

    def evaluate(self, feeds: dict[str, Tensor] | None = None,
                 incremental: bool = False) -> Tensor:
        """Run the forward pass; returns the value of the last node.

        All intermediate values are cached for `backward`. With
        `incremental=True` only nodes appended after the previous evaluate
        are computed (the caller guarantees feeds are unchanged).
        """
        feeds = feeds or {}
        for key, t in feeds.items():
            if not isinstance(t, Tensor):
                feeds[key] = Tensor(t)
        if not self.nodes:
            raise ValueError("cannot evaluate an empty graph")
        known = {n.name for n in self.nodes if n.op == "placeholder"}
        unknown = set(feeds) - known
        if unknown and not incremental:
            raise KeyError(f"feeds for unknown placeholders: {sorted(unknown)}")
        for i, node in enumerate(self.nodes):
            if incremental and self._values[i] is not None:
                continue
            arr = self._compute(node, feeds)
            if self.debug and not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{node.label()} produced non-finite values")
            self._values[i] = arr
        self._evaluated = True
        self._feeds = feeds
        return Tensor(self._values[-1])

    def value(self, node: Node) -> np.ndarray:
        """Cached forward value of a node (evaluate must have run)."""
        if not self._evaluated or self._values[node.idx] is None:
            raise RuntimeError(f"{node.label()} has no cached value; call evaluate first")
        return self._values[node.idx]

    def backward(self, seed_grad: Tensor | None = None) -> dict[str, Tensor]:
        """Reverse pass from the last node; returns gradients by name.

        Gradients are returned for every param and placeholder with
        requires_grad (zeros when disconnected from the output).
        """
        if not self._evaluated:
            raise RuntimeError("backward called before evaluate")
        vals = self._values
        out = self.nodes[-1]
        if seed_grad is None:
            seed = np.ones_like(vals[out.idx])
        else:
            seed = seed_grad.data if isinstance(seed_grad, Tensor) else np.asarray(seed_grad, float)
            if seed.shape != vals[out.idx].shape:
                raise ShapeError(
                    f"seed grad shape {seed.shape} != output shape {vals[out.idx].shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[out.idx] = seed.copy()

        def accum(node: Node, contrib: np.ndarray, might_alias: bool = False) -> None:
            j = node.idx
            if grads[j] is None:
                grads[j] = contrib.copy() if might_alias else contrib
            else:
                grads[j] = grads[j] + contrib

        for i in range(len(self.nodes) - 1, -1, -1):
            node, g = self.nodes[i], grads[i]
            if g is None or node.op in ("placeholder", "param", "const"):
                continue
            op, ins = node.op, node.inputs
            if op == "add":
                a, b = vals[ins[0].idx], vals[ins[1].idx]
                accum(ins[0], _unbroadcast(g, a.shape), might_alias=True)
                accum(ins[1], _unbroadcast(g, b.shape), might_alias=True)
            elif op == "matmul":
                a, b = vals[ins[0].idx], vals[ins[1].idx]
                accum(ins[0], g @ b.T)
                accum(ins[1], a.T @ g)
            elif op == "multiply":
                a, b = vals[ins[0].idx], vals[ins[1].idx]
                accum(ins[0], _unbroadcast(g * b, a.shape))
                accum(ins[1], _unbroadcast(g * a, b.shape))
            elif op == "scale":
                accum(ins[0], g * node.coeff)
            elif op == "concat":
                sizes = [vals[p.idx].shape[node.axis] for p in ins]
                offsets = np.cumsum([0] + sizes)
                for part, lo, hi in zip(ins, offsets[:-1], offsets[1:]):
                    sl = [slice(None)] * g.ndim
                    sl[node.axis] = slice(lo, hi)
                    accum(part, g[tuple(sl)], might_alias=True)
            elif op == "relu":
                x = vals[ins[0].idx]
                accum(ins[0], g * (x > 0))  # subgradient at 0 is 0
            elif op == "sigmoid":
                y = vals[i]
                accum(ins[0], g * y * (1.0 - y))
            elif op == "log":
                x = vals[ins[0].idx]
                accum(ins[0], g * (x > LOG_FLOOR) / np.maximum(x, LOG_FLOOR))
            elif op == "softmax":
                y = vals[i]
                accum(ins[0], y * (g - (g * y).sum(axis=-1, keepdims=True)))
            elif op == "reduce_mean":
                x = vals[ins[0].idx]
                accum(ins[0], np.full(x.shape, float(g) / x.size))
            elif op == "smooth_l1":
                x = vals[ins[0].idx]
                accum(ins[0], g * np.where(np.abs(x) < 1.0, x, np.sign(x)))
            elif op == "grl":
                accum(ins[0], g * (-node.coeff))
            else:
                raise ValueError(f"unknown op kind {op!r}")

        result: dict[str, Tensor] = {}
        for node in self.nodes:
            if node.op == "param" and node.requires_grad:
                base = node.value
            elif node.op == "placeholder" and (node.requires_grad
                                               or self._feeds[node.name].requires_grad):
                base = self._feeds[node.name].data
            else:
                continue
            g = grads[node.idx]
            result[node.name] = Tensor(g if g is not None else np.zeros_like(base))
        return result


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def grad_check(graph: Graph, feeds: dict[str, Tensor] | None = None,
               tol: float = 1e-5, step: float = 1e-5,
               max_entries_per_tensor: int = 16, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The graph output must be scalar. For large tensors a random subset of
    entries is perturbed (all entries when the tensor is small). The
    relative error uses a 1e-3 denominator floor so near-zero gradients are
    compared absolutely at that scale.
    """
    feeds = dict(feeds or {})
    out = graph.evaluate(feeds)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
    analytic = graph.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, grad in analytic.items():
        node = next(n for n in graph.nodes
                    if n.name == name and n.op in ("param", "placeholder"))
        target = node.value if node.op == "param" else feeds[name].data
        flat = target.reshape(-1)
        size = flat.size
        if size <= max_entries_per_tensor:
            entries = np.arange(size)
        else:
            entries = np.sort(rng.choice(size, size=max_entries_per_tensor, replace=False))
        worst = 0.0
        ga = grad.data.reshape(-1)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            up = float(graph.evaluate(feeds).data)
            flat[e] = orig - step
            down = float(graph.evaluate(feeds).data)
            flat[e] = orig
            fd = (up - down) / (2.0 * step)
            a = float(ga[e])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, rel)
        report.max_rel_err[name] = worst
    graph.evaluate(feeds)  # restore caches at the unperturbed point
    return report
