"""Tensors recorded on an explicit reverse-mode autodiff tape.

The tape is an append-only map from integer node ids to recorded operations.
Ids are handed out monotonically, so ascending id order is always a valid
topological order of the graph.  Gradients computed with graph retention are
ordinary tape nodes, which is what makes gradients of gradients possible:
the backward pass of a recorded parameter update can itself be
backpropagated through.

Old subgraphs can be released (``drop_range``) and update chains can be cut
(``sever``) without renumbering, which is how the training engine keeps the
retained unroll window at a fixed memory footprint.
"""

from __future__ import annotations

import os

import numpy as np


class AutodiffError(Exception):
    """Base class for tape/operation failures."""


class ShapeMismatch(AutodiffError):
    """Operands do not conform to the operation's shape rule."""


class NonFiniteError(AutodiffError):
    """A NaN or Inf was produced while checked mode is enabled."""


class TapeError(AutodiffError):
    """Invalid tape usage (wrong tape, pruned node, non-scalar loss, ...)."""


def checked_mode_default() -> bool:
    """NaN/Inf guards are opt-in via the BILEVEL_CHECKED environment variable."""
    return os.environ.get("BILEVEL_CHECKED", "") == "1"


def as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Node:
    """One recorded operation (or leaf) on a tape.

    ``inputs`` are node ids of the operands; leaves have none.  ``value`` is
    the forward result, kept so backward rules can read operand values by id.
    """

    __slots__ = ("kind", "inputs", "value", "attrs", "requires_grad")

    def __init__(self, kind, inputs, value, attrs, requires_grad):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Node({self.kind}, inputs={self.inputs}, shape={self.value.shape})"


class Tensor:
    """A float64 array, optionally attached to a tape node.

    Tensors with ``node_id is None`` are plain values: operations on them
    compute eagerly without recording, which is the mode used by finite
    difference oracles and by backward passes that do not retain a graph.
    """

    __slots__ = ("value", "tape", "node_id", "requires_grad")

    # Make numpy scalars/arrays defer to the reflected operators below.
    __array_ufunc__ = None

    def __init__(self, value, tape=None, node_id=None, requires_grad=False):
        self.value = as_f64(value)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = bool(requires_grad) and node_id is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Arithmetic delegates to the op layer; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class Tape:
    """Append-only record of operations for one experiment or test.

    All tensors of one tape are confined to a single thread; the tape does
    no locking.  ``recording`` can be toggled off to evaluate the same op
    code eagerly (used for plain, non-differentiable gradient passes).
    """

    def __init__(self, checked: bool | None = None):
        self.nodes: dict[int, Node] = {}
        self.checkpoints: list[int] = []
        self.recording = True
        self.checked = checked_mode_default() if checked is None else bool(checked)
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def next_id(self) -> int:
        return self._next_id

    def append(self, node: Node) -> int:
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = node
        return nid

    def node(self, nid: int) -> Node:
        try:
            return self.nodes[nid]
        except KeyError:
            raise TapeError(f"node {nid} is unknown or has been released") from None

    def leaf(self, value, requires_grad: bool = False) -> Tensor:
        arr = as_f64(value)
        if self.checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value contains NaN or Inf")
        nid = self.append(Node("leaf", (), arr, None, requires_grad))
        return Tensor(arr, self, nid, requires_grad)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def checkpoint(self) -> int:
        """Mark the start of a subgraph (one inner training step)."""
        marker = self._next_id
        self.checkpoints.append(marker)
        return marker

    def sever(self, nid: int) -> None:
        """Replace a recorded node with a leaf carrying the same value.

        Gradients no longer flow past this point; the node's old operands
        become unreferenced.  This is the truncation boundary of the unroll
        window.
        """
        old = self.node(nid)
        self.nodes[nid] = Node("leaf", (), old.value, None, old.requires_grad)

    def drop(self, ids) -> None:
        for nid in ids:
            self.nodes.pop(nid, None)

    def drop_range(self, start: int, end: int, keep=()) -> None:
        """Release all nodes with start <= id < end, except ids in ``keep``."""
        kept = set(keep)
        for nid in range(start, end):
            if nid not in kept:
                self.nodes.pop(nid, None)

    def tensor_for(self, nid: int) -> Tensor:
        node = self.node(nid)
        return Tensor(node.value, self, nid, node.requires_grad)


class GradMap:
    """Gradients keyed by the node id of each differentiation target."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def __getitem__(self, target: Tensor) -> Tensor:
        if target.node_id is None or target.node_id not in self._grads:
            raise TapeError("tensor is not a target of this gradient map")
        return self._grads[target.node_id]

    def __contains__(self, target: Tensor) -> bool:
        return target.node_id is not None and target.node_id in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def by_id(self, nid: int) -> Tensor:
        return self._grads[nid]

    def ids(self):
        return self._grads.keys()

    def values(self):
        return self._grads.values()
