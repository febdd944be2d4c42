"""Tensor type and the reverse-mode engine.

Every differentiable operation appends a :class:`Node` carrying a
monotonically increasing sequence number, so a node's inputs always come
from earlier nodes.  The nodes reachable from a tensor form its tape.
Backward rules are written with the same tensor operations as the forward
pass; running them with ``create_graph=True`` records the backward pass as
well, which is what makes gradients of gradients possible.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "NotOnTapeError",
    "HigherOrderError",
    "ShapeError",
    "Tensor",
    "Node",
    "GradientResult",
    "as_tensor",
    "grad",
    "backward",
    "no_grad",
    "enable_grad",
    "set_grad_enabled",
    "is_grad_enabled",
]


class AutodiffError(RuntimeError):
    pass


class NotOnTapeError(AutodiffError):
    """Raised when a differentiated quantity has no recorded history."""


class HigherOrderError(AutodiffError):
    """Raised when differentiating through a gradient computed without a graph."""


class ShapeError(ValueError):
    pass


_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(flag: bool) -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = bool(flag)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


def enable_grad():
    return set_grad_enabled(True)


BackwardFn = Callable[["Tensor", tuple], Sequence["Tensor | None"]]


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: BackwardFn):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "node", "name", "plain_grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name
        # set on gradients returned by a backward pass that was not recorded
        self.plain_grad = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        node_tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag}{grad_tag}{node_tag})"

    # -- operators (implemented in ops) ---------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, None)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_result(data: np.ndarray, op: str, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and record it when taping applies."""
    out = Tensor(data)
    if any(t.plain_grad for t in inputs):
        out.plain_grad = True
    if is_grad_enabled() and any(t.tracked for t in inputs):
        out.node = Node(op, inputs, backward_fn)
    return out


# -- the backward pass ---------------------------------------------------------


def _collect(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.seq in seen:
            continue
        seen[n.seq] = n
        for t in n.inputs:
            if t.node is not None and t.node.seq not in seen:
                stack.append(t.node)
    return [seen[k] for k in sorted(seen)]


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
    grad_output: Tensor | np.ndarray | None = None,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``output`` must hold a single element unless ``grad_output`` is given.
    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients can be differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(
                f"grad: output must have exactly one element, got shape {output.shape}"
            )
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ShapeError(f"grad: grad_output shape {seed.shape} != output shape {output.shape}")

    target_ids = {id(t) for t in inputs}
    node_targets = {t.node.seq: t for t in inputs if t.node is not None}

    results: dict[int, Tensor] = {}
    if id(output) in target_ids:
        results[id(output)] = seed

    if output.node is None:
        if output.plain_grad:
            raise HigherOrderError(
                "grad: output was built from gradients computed with create_graph=False; "
                "enable higher-order mode (create_graph=True) on the inner backward pass"
            )
        if id(output) not in target_ids:
            raise NotOnTapeError("grad: output is not on a tape (no recorded history)")
        return _finish(inputs, results, allow_unused, output)

    nodes = _collect(output.node)

    # a node is useful when gradient must flow through it to reach a target
    useful: dict[int, bool] = {}

    def input_useful(t: Tensor) -> bool:
        if id(t) in target_ids:
            return True
        return t.node is not None and useful.get(t.node.seq, False)

    for n in nodes:
        useful[n.seq] = any(input_useful(t) for t in n.inputs)

    pending: dict[int, Tensor] = {output.node.seq: seed}
    leaf_grads: dict[int, Tensor] = {}

    with set_grad_enabled(create_graph):
        for n in reversed(nodes):
            g = pending.pop(n.seq, None)
            if g is None:
                continue
            if n.seq in node_targets:
                results[id(node_targets[n.seq])] = g
            if not useful[n.seq]:
                continue
            needs = tuple(input_useful(t) for t in n.inputs)
            input_grads = n.backward_fn(g, needs)
            for t, gi, need in zip(n.inputs, input_grads, needs):
                if not need or gi is None:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(
                        f"backward of {n.op}: gradient shape {gi.shape} != input shape {t.shape}"
                    )
                if t.node is not None:
                    prev = pending.get(t.node.seq)
                    pending[t.node.seq] = gi if prev is None else prev + gi
                else:
                    prev = leaf_grads.get(id(t))
                    leaf_grads[id(t)] = gi if prev is None else prev + gi

    for t in inputs:
        if t.node is None and id(t) in leaf_grads:
            results[id(t)] = leaf_grads[id(t)]

    if not results and output.plain_grad:
        raise HigherOrderError(
            "grad: no requested tensor is reachable through recorded operations; the "
            "expression contains gradients from a backward pass run without create_graph=True"
        )
    out = _finish(inputs, results, allow_unused, output)
    if not create_graph:
        for t in out:
            t.plain_grad = True
            t.node = None
    return out


def _finish(inputs, results, allow_unused, output) -> list[Tensor]:
    out = []
    for i, t in enumerate(inputs):
        g = results.get(id(t))
        if g is None:
            if not allow_unused:
                if output.plain_grad:
                    raise HigherOrderError(
                        "grad: requested tensor unreachable; the inner gradient was computed "
                        "without create_graph=True, enable higher-order mode"
                    )
                label = t.name or f"inputs[{i}]"
                raise NotOnTapeError(f"grad: {label} is absent from the graph of output")
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


@dataclass
class GradientResult:
    value: Tensor
    grads: dict[str, Tensor] = field(default_factory=dict)


def backward(
    scalar: Tensor,
    wrt: Mapping[str, Tensor] | Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> GradientResult:
    """Keyed variant of :func:`grad`.

    ``wrt`` maps identifiers to tensors; a plain sequence is keyed by each
    tensor's ``name`` (or its position when unnamed).
    """
    if isinstance(wrt, Mapping):
        keys = list(wrt.keys())
        tensors = list(wrt.values())
    else:
        tensors = list(wrt)
        keys = [t.name if t.name is not None else str(i) for i, t in enumerate(tensors)]
    gs = grad(scalar, tensors, create_graph=create_graph, allow_unused=allow_unused)
    return GradientResult(value=scalar, grads=dict(zip(keys, gs)))
