"""Dense float64 tensors and the reverse-mode differentiation tape.

All learnable computation in this package is expressed through Tensor
operations (see ops.py) recorded on an explicit Tape.  Everything runs in
64-bit floats so that finite-difference verification is meaningful.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform to an operation's shape rule."""


class NonFiniteError(ValueError):
    """A tensor holds (or an operation produced) NaN or infinite values."""


class TapeMismatchError(ValueError):
    """A tensor produced on one tape was fed to an operation on another."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape():
    """The innermost open Tape for this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of finite float64 values.

    Tensors are safe to share read-only across threads; gradient tracking
    happens on whichever Tape is open when an operation runs.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"non-finite values in tensor of shape {arr.shape}"
            )
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, op_name: str) -> "Tensor":
        """Wrap a freshly computed array without copying (internal use)."""
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op_name}: non-finite output")
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


class TapeNode:
    """One recorded operation: inputs, saved activations, backward rule."""

    __slots__ = ("op", "inputs", "backward", "index")

    def __init__(self, op, inputs, backward, index):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.index = index


class Tape:
    """Append-only record of operations enabling one reverse pass.

    Use as a context manager; operations run inside record themselves when
    any input requires a gradient.  A tape is single-threaded; distinct
    tapes may run concurrently in different workers.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        for t in inputs:
            if t.node is not None:
                # a node belongs to this tape iff nodes[node.index] is node
                idx = t.node.index
                if idx >= len(self.nodes) or self.nodes[idx] is not t.node:
                    raise TapeMismatchError(
                        f"{op}: input produced on a different tape"
                    )
            elif t.requires_grad:
                self._leaves.setdefault(id(t), t)
        node = TapeNode(op, inputs, backward, len(self.nodes))
        self.nodes.append(node)
        out.node = node
        out.requires_grad = True

    def leaves(self) -> list[Tensor]:
        """Requires-grad leaf tensors used on this tape, in first-use order."""
        return list(self._leaves.values())


def backward(tape: Tape, root: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar root w.r.t. every requires-grad leaf on the tape.

    Accumulation walks nodes in reverse tape order, so identical inputs give
    bit-identical gradients.  Every leaf used on the tape gets exactly one
    entry (zeros if the root does not depend on it).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    node = root.node
    if node is None or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise ValueError("backward: root was not produced on this tape")

    node_grads: dict[int, np.ndarray] = {node.index: np.ones((), dtype=np.float64).reshape(root.shape)}
    leaf_grads: dict[int, np.ndarray] = {}

    for n in reversed(tape.nodes[: node.index + 1]):
        g = node_grads.pop(n.index, None)
        if g is None:
            continue
        input_grads = n.backward(g)
        for t, ig in zip(n.inputs, input_grads):
            if ig is None:
                continue
            if t.node is not None:
                slot = node_grads.get(t.node.index)
                node_grads[t.node.index] = ig if slot is None else slot + ig
            elif t.requires_grad:
                slot = leaf_grads.get(id(t))
                leaf_grads[id(t)] = ig if slot is None else slot + ig

    out: dict[Tensor, Tensor] = {}
    for leaf in tape.leaves():
        g = leaf_grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=np.float64)
        out[leaf] = Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(leaf.shape), "backward")
    return out
