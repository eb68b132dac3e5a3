"""Dense float64 matrices, a define-by-run reverse-mode tape, and Adam.

Matrices are plain 2-D ``numpy`` arrays of dtype float64. A :class:`Tape`
records primitive operations as they are applied; leaves may be bound to
values immediately or left as named placeholders and filled in later by
:func:`forward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce ``value`` to a 2-D float64 array (scalars become 1x1, vectors 1xn)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name}: expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# ParamSet


@dataclass(frozen=True)
class ParamSet:
    """Ordered, immutable mapping of parameter name to matrix.

    ``role`` is ``"model"`` or ``"refiner"``; it is carried along for
    bookkeeping and never affects arithmetic.
    """

    entries: Mapping[str, np.ndarray]
    role: str = "model"

    def __post_init__(self):
        frozen = {}
        for name, value in self.entries.items():
            frozen[str(name)] = _frozen(as_matrix(value, name))
        object.__setattr__(self, "entries", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self.entries.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self.entries.values())

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.entries.values()])

    def unflatten(self, vector) -> "ParamSet":
        """Build a ParamSet shaped like ``self`` from a flat vector."""
        vec = np.asarray(vector, dtype=np.float64).ravel()
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, ParamSet needs {self.size}")
        out, pos = {}, 0
        for name, value in self.entries.items():
            out[name] = vec[pos:pos + value.size].reshape(value.shape)
            pos += value.size
        return ParamSet(out, self.role)

    def check_like(self, other: "ParamSet", what: str = "ParamSet") -> None:
        if self.shapes() != other.shapes() or self.names() != other.names():
            raise DimensionError(f"{what} shapes {other.shapes()} do not match {self.shapes()}")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self.entries.items()}, self.role)

    def add(self, other: "ParamSet", scale: float = 1.0) -> "ParamSet":
        """Return ``self + scale * other``."""
        self.check_like(other)
        return ParamSet({k: v + scale * other[k] for k, v in self.entries.items()}, self.role)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.entries.values())))

    def to_json(self) -> dict:
        return {"role": self.role, "entries": {k: v.tolist() for k, v in self.entries.items()}}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ParamSet":
        return cls({k: np.array(v, dtype=np.float64) for k, v in doc["entries"].items()},
                   doc.get("role", "model"))

    @classmethod
    def zeros_like(cls, other: "ParamSet") -> "ParamSet":
        return other.map(np.zeros_like)


# --------------------------------------------------------------------------
# Tape


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_same(node, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"node {node}: operand shapes {a.shape} and {b.shape} differ")


def _fwd_matmul(node, a, b, **_):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"node {node}: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _fwd_add(node, a, b, **_):
    _check_same(node, a, b)
    return a + b


def _fwd_sub(node, a, b, **_):
    _check_same(node, a, b)
    return a - b


def _fwd_mul(node, a, b, **_):
    _check_same(node, a, b)
    return a * b


def _fwd_add_row(node, a, row, **_):
    if row.shape != (1, a.shape[1]):
        raise DimensionError(f"node {node}: row operand {row.shape} does not fit {a.shape}")
    return a + row


def _fwd_log(node, a, **_):
    return np.log(np.maximum(a, LOG_FLOOR))


# Each backward rule maps (upstream grad, operand values, output value, attrs)
# to one gradient per operand.
def _bwd_matmul(g, ops, out, **_):
    a, b = ops
    return [g @ b.T, a.T @ g]


def _bwd_add_row(g, ops, out, **_):
    return [g, g.sum(axis=0, keepdims=True)]


def _bwd_softmax(g, ops, out, **_):
    return [out * (g - np.sum(g * out, axis=1, keepdims=True))]


def _bwd_log(g, ops, out, **_):
    (a,) = ops
    return [np.where(a >= LOG_FLOOR, g / np.maximum(a, LOG_FLOOR), 0.0)]


def _bwd_abs(g, ops, out, **_):
    # subgradient 0 at exactly 0
    return [g * np.sign(ops[0])]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, lambda g, ops, out, **_: [g, g]),
    "sub": (_fwd_sub, lambda g, ops, out, **_: [g, -g]),
    "mul": (_fwd_mul, lambda g, ops, out, **_: [g * ops[1], g * ops[0]]),
    "add_row": (_fwd_add_row, _bwd_add_row),
    "scale": (lambda node, a, c, **_: c * a, lambda g, ops, out, c, **_: [c * g]),
    "softmax": (lambda node, a, **_: _softmax_rows(a), _bwd_softmax),
    "log": (_fwd_log, _bwd_log),
    "sum": (lambda node, a, **_: np.array([[a.sum()]]),
            lambda g, ops, out, **_: [np.full_like(ops[0], g[0, 0])]),
    "mean_rows": (lambda node, a, **_: np.array([[a.sum() / a.shape[0]]]),
                  lambda g, ops, out, **_: [np.full_like(ops[0], g[0, 0] / ops[0].shape[0])]),
    "abs": (lambda node, a, **_: np.abs(a), _bwd_abs),
    "tanh": (lambda node, a, **_: np.tanh(a), lambda g, ops, out, **_: [g * (1.0 - out * out)]),
}


class Node:
    __slots__ = ("tape", "index", "op", "parents", "attrs", "name", "kind", "value")

    def __init__(self, tape, index, op, parents, attrs, name=None, kind=None, value=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.name = name
        self.kind = kind
        self.value = value

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        label = self.name if self.name is not None else self.op
        return f"#{self.index}({label})"

    # operator sugar keeps loss definitions readable
    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)


class Tape:
    """Records primitive matrix operations for reverse-mode differentiation.

    Nodes are evaluated eagerly once all their operands carry values.
    Leaves created without a value are placeholders that :func:`forward`
    binds by name.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}

    # leaves -------------------------------------------------------------
    def leaf(self, name: str, value=None, kind: str = "param") -> Node:
        if kind not in ("param", "input", "const"):
            raise ValueError(f"unknown leaf kind {kind!r}")
        if name in self._leaves:
            raise ValueError(f"leaf {name!r} already on tape")
        val = None if value is None else as_matrix(value, name)
        node = Node(self, len(self.nodes), "leaf", (), {}, name=name, kind=kind, value=val)
        self.nodes.append(node)
        self._leaves[name] = node
        return node

    def param(self, name: str, value=None) -> Node:
        return self.leaf(name, value, "param")

    def input(self, name: str = "x", value=None) -> Node:
        return self.leaf(name, value, "input")

    def const(self, value) -> Node:
        node = Node(self, len(self.nodes), "leaf", (), {}, kind="const", value=as_matrix(value))
        self.nodes.append(node)
        return node

    def params(self, params: ParamSet, prefix: str = "") -> dict[str, Node]:
        return {k: self.param(prefix + k, v) for k, v in params.entries.items()}

    # primitives -----------------------------------------------------------
    def _record(self, op: str, parents: Iterable[Node], **attrs) -> Node:
        parents = tuple(self._lift(p) for p in parents)
        node = Node(self, len(self.nodes), op, parents, attrs)
        if all(p.value is not None for p in parents):
            node.value = _OPS[op][0](node, *[p.value for p in parents], **attrs)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def matmul(self, a, b) -> Node:
        return self._record("matmul", (a, b))

    def add(self, a, b) -> Node:
        return self._record("add", (a, b))

    def sub(self, a, b) -> Node:
        return self._record("sub", (a, b))

    def mul(self, a, b) -> Node:
        return self._record("mul", (a, b))

    def add_row(self, a, row) -> Node:
        return self._record("add_row", (a, row))

    def scale(self, a, c: float) -> Node:
        return self._record("scale", (a,), c=float(c))

    def softmax(self, a) -> Node:
        return self._record("softmax", (a,))

    def log(self, a) -> Node:
        return self._record("log", (a,))

    def sum(self, a) -> Node:
        return self._record("sum", (a,))

    def abs(self, a) -> Node:
        return self._record("abs", (a,))

    def tanh(self, a) -> Node:
        return self._record("tanh", (a,))

    def mean_rows(self, a) -> Node:
        """Sum of all entries divided by the row count (batch mean of row sums)."""
        return self._record("mean_rows", (a,))

    # evaluation -----------------------------------------------------------
    def replay(self, bindings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Re-evaluate every node in recording order, rebinding named leaves."""
        bindings = bindings or {}
        unknown = set(bindings) - set(self._leaves)
        if unknown:
            raise KeyError(f"no leaves named {sorted(unknown)}")
        for node in self.nodes:
            if node.op == "leaf":
                if node.name in bindings:
                    node.value = as_matrix(bindings[node.name], node.name)
                elif node.value is None:
                    raise TapeStateError(f"leaf {node!r} has no value")
            else:
                node.value = _OPS[node.op][0](node, *[p.value for p in node.parents], **node.attrs)
        if not self.nodes:
            raise TapeStateError("empty tape")
        return self.nodes[-1].value

    def gradients(self, output: Node | None = None, seed=None) -> dict[int, np.ndarray]:
        """Accumulate d(seed . output)/d(node) for every node upstream of ``output``."""
        if not self.nodes:
            raise TapeStateError("backward on an empty tape")
        out = self.nodes[-1] if output is None else output
        if out.value is None:
            raise TapeStateError("backward called before forward")
        if seed is None:
            seed = np.ones_like(out.value)
        seed = as_matrix(seed, "seed")
        if seed.shape != out.value.shape:
            raise DimensionError(f"seed shape {seed.shape} does not match output {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.index: seed}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.pop(node.index, None) if node.op != "leaf" else grads.get(node.index)
            if g is None or node.op == "leaf":
                continue
            ops = [p.value for p in node.parents]
            for parent, pg in zip(node.parents, _OPS[node.op][1](g, ops, node.value, **node.attrs)):
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return grads

    def backward(self, output: Node | None = None, seed=None, role: str = "model",
                 prefix: str = "") -> ParamSet:
        """Gradients of ``output`` with respect to every ``param`` leaf.

        Only leaves whose name starts with ``prefix`` are returned, with the
        prefix stripped. Params not reached by the graph get zero gradients.
        """
        grads = self.gradients(output, seed)
        entries = {}
        for name, node in self._leaves.items():
            if node.kind != "param" or not name.startswith(prefix):
                continue
            g = grads.get(node.index)
            entries[name[len(prefix):]] = np.zeros_like(node.value) if g is None else g
        return ParamSet(entries, role)


def forward(tape: Tape, params: ParamSet, inputs, input_name: str = "x") -> np.ndarray:
    """Evaluate a recorded graph with ``params`` and ``inputs`` bound by name."""
    bindings = dict(params.entries)
    bindings[input_name] = as_matrix(inputs, input_name)
    return tape.replay(bindings)


def backward(tape: Tape, seed=None, role: str = "model") -> ParamSet:
    return tape.backward(seed=seed, role=role)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(x) for k, x in params.entries.items()},
                   v={k: np.zeros_like(x) for k, x in params.entries.items()}, **kw)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> ParamSet:
    """One bias-corrected Adam update. Advances ``state`` in place."""
    params.check_like(grads, "gradient")
    if not state.m:
        state.m = {k: np.zeros_like(x) for k, x in params.entries.items()}
        state.v = {k: np.zeros_like(x) for k, x in params.entries.items()}
    if {k: m.shape for k, m in state.m.items()} != params.shapes():
        raise DimensionError("Adam moments do not match parameter shapes")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = {}
    for name, p in params.entries.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamSet(out, params.role)
