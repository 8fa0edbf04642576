"""Minimal n-dimensional tensor engine with reverse-mode autodiff.

Gradients are built out of the same primitive operations as forward passes,
so the output of ``grad`` is itself a differentiable graph node.  This is
what makes gradient-through-update (second-order) training possible: the
inner-loop parameter update is an ordinary subgraph that the outer gradient
flows through.

Everything is backed by numpy.  float32 is the training dtype; tests that
compare against finite differences build float64 leaves instead (finite
differences in float32 are too noisy for tight tolerances).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_id_counter = itertools.count()


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeMismatchError(TensorError):
    """Operand or leaf shapes are incompatible; message names the node."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf; message names the node.

    Silent NaN poisoning makes bi-level training bugs undiagnosable, so any
    non-finite intermediate aborts the step immediately.
    """


class OpDef:
    """A primitive operation: forward on raw arrays, vjp on graph tensors.

    The vjp must be expressed in terms of tensor ops (never raw numpy on
    ``.data``) so that gradients remain differentiable graph nodes.
    """

    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name: str, forward: Callable, vjp: Callable):
        self.name = name
        self.forward = forward
        self.vjp = vjp


OPS: dict[str, OpDef] = {}


def register_op(name: str, forward: Callable, vjp: Callable) -> OpDef:
    if name in OPS:
        raise ValueError(f"duplicate op registration: {name}")
    op = OpDef(name, forward, vjp)
    OPS[name] = op
    return op


class Tensor:
    """A value in the compute graph.

    Leaf tensors have ``op is None``; non-leaf tensors record the op name,
    parent tensors and op attributes, which is enough both to backpropagate
    and to replay the graph on fresh leaf values.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "attrs", "name", "id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: str | None = None,
        _op: str | None = None,
        _parents: tuple = (),
        _attrs: dict | None = None,
    ):
        was_ndarray = isinstance(data, np.ndarray)
        if isinstance(data, Tensor):
            data = data.data
            was_ndarray = True
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype.kind not in "fiu":
            arr = arr.astype(DEFAULT_DTYPE)
        elif _op is None and not was_ndarray and arr.dtype == np.float64:
            # Python floats/lists default to float64; fresh leaves follow the
            # engine default instead.  ndarrays keep their dtype so 64-bit
            # test mode works by passing float64 arrays.
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self.parents = _parents
        self.attrs = _attrs or {}
        self.name = name
        self.id = next(_id_counter)

    # -- basic introspection ------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A leaf copy sharing data; gradients do not flow past it."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = self.op or ("param" if self.requires_grad else "const")
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, {tag}{label})"

    # Operator sugar; the real implementations live in ops.py and are
    # attached there to avoid a circular import.


def apply_op(name: str, parents: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run a registered primitive and append the result to the graph."""
    op = OPS[name]
    attrs = attrs or {}
    try:
        with np.errstate(all="ignore"):  # the finite check below is the authority
            data = op.forward(attrs, *[p.data for p in parents])
    except ValueError as exc:
        raise ShapeMismatchError(f"op '{name}': {exc}") from exc
    # NaN propagates through min/max, so two reductions cover NaN and +/-Inf
    # without materializing a bool temp per op.
    if data.dtype.kind == "f" and data.size and not (
        np.isfinite(data.min()) and np.isfinite(data.max())
    ):
        raise NonFiniteError(
            f"op '{name}' produced non-finite values "
            f"(output shape {tuple(data.shape)}, parents: "
            f"{[p.op or p.name or 'leaf' for p in parents]})"
        )
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _op=name, _parents=tuple(parents), _attrs=attrs)


# -- reverse-mode differentiation -------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-first ordering of the subgraph reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(
    loss: Tensor,
    wrt: "ParamSet | Sequence[Tensor]",
    create_graph: bool = True,
) -> "ParamSet | list[Tensor]":
    """Gradients of a scalar loss with respect to the requested tensors.

    With ``create_graph=True`` (the default) the returned gradients are live
    graph nodes and can be differentiated again; ``create_graph=False``
    detaches them (first-order mode).  Parameters unreachable from the loss
    get zero gradients rather than an error.
    """
    if loss.size != 1:
        raise ShapeMismatchError(
            f"grad requires a scalar loss, got shape {tuple(loss.shape)}"
        )
    if isinstance(wrt, ParamSet):
        targets = list(wrt.values())
    else:
        targets = list(wrt)

    from . import ops  # deferred: ops imports this module

    grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        seed = Tensor(np.ones((), dtype=loss.dtype))
        grads[loss.id] = ops.reshape(seed, loss.shape) if loss.shape != () else seed
        for node in reversed(_topo_order(loss)):
            g = grads.pop(node.id, None)
            if g is None or node.op is None:
                if g is not None and node.op is None:
                    grads[node.id] = g  # keep leaf grads
                continue
            contributions = OPS[node.op].vjp(node, g)
            for parent, contrib in zip(node.parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = contrib if prev is None else ops.add(prev, contrib)

    out: list[Tensor] = []
    for t in targets:
        g = grads.get(t.id)
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        if not create_graph:
            g = g.detach()
        out.append(g)

    if isinstance(wrt, ParamSet):
        return ParamSet(zip(wrt.names(), out))
    return out


# -- parameter collections ---------------------------------------------------


class ParamSet:
    """Ordered name -> Tensor map with deterministic (lexicographic) order."""

    def __init__(self, items: "Mapping[str, Tensor] | Iterable | None" = None):
        self._d: dict[str, Tensor] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for k, v in pairs:
                self[k] = v

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self._d[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._d[name]

    def __contains__(self, name: str) -> bool:
        return name in self._d

    def __len__(self) -> int:
        return len(self._d)

    def names(self) -> list[str]:
        return sorted(self._d)

    def values(self) -> list[Tensor]:
        return [self._d[k] for k in self.names()]

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._d[k]) for k in self.names()]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def copy(self) -> "ParamSet":
        return ParamSet(self.items())

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet((k, fn(k, v)) for k, v in self.items())

    def merged(self, *others: "ParamSet") -> "ParamSet":
        out = self.copy()
        for other in others:
            for k, v in other.items():
                if k in out:
                    raise ValueError(f"duplicate parameter name: {k}")
                out[k] = v
        return out

    def total_size(self) -> int:
        return sum(v.size for v in self.values())

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.total_size()} values)"


# -- recorded graphs ----------------------------------------------------------


class _GraphNode:
    __slots__ = ("op", "parent_ids", "attrs", "shape", "dtype", "leaf_name", "const")

    def __init__(self, op, parent_ids, attrs, shape, dtype, leaf_name=None, const=None):
        self.op = op
        self.parent_ids = parent_ids
        self.attrs = attrs
        self.shape = shape
        self.dtype = dtype
        self.leaf_name = leaf_name
        self.const = const


class ComputeGraph:
    """An append-only record of a tensor computation, replayable on new leaves.

    Nodes are stored parents-first, so replay is a single forward sweep.
    Replaying on identical leaf values reproduces every output bit-exactly
    (all primitives are deterministic numpy code).
    """

    def __init__(self):
        self.nodes: list[_GraphNode] = []
        self.outputs: dict[str, int] = {}

    @classmethod
    def capture(
        cls,
        outputs: Mapping[str, Tensor],
        leaves: Mapping[str, Tensor],
    ) -> "ComputeGraph":
        """Record the subgraph producing ``outputs`` from the named ``leaves``.

        Any leaf tensor reachable from the outputs that is not in ``leaves``
        is frozen into the graph as a constant.
        """
        g = cls()
        leaf_names = {id(t): name for name, t in leaves.items()}
        index: dict[int, int] = {}

        def record(t: Tensor) -> None:
            if t.op is None:
                name = leaf_names.get(id(t))
                if name is not None:
                    node = _GraphNode(None, (), {}, t.shape, t.dtype, leaf_name=name)
                else:
                    node = _GraphNode(None, (), {}, t.shape, t.dtype, const=t.data)
            else:
                pids = tuple(index[p.id] for p in t.parents)
                node = _GraphNode(t.op, pids, t.attrs, t.shape, t.dtype)
            g.nodes.append(node)
            index[t.id] = len(g.nodes) - 1

        seen: set[int] = set()
        for name, root in outputs.items():
            stack: list[tuple[Tensor, bool]] = [(root, False)]
            while stack:
                t, expanded = stack.pop()
                if expanded:
                    record(t)
                    continue
                if t.id in seen:
                    continue
                seen.add(t.id)
                stack.append((t, True))
                for p in t.parents:
                    if p.id not in seen:
                        stack.append((p, False))
            g.outputs[name] = index[root.id]
        return g

    def output_node(self, name: str) -> int:
        return self.outputs[name]

    def eval(self, leaf_values: "Mapping[str, Tensor] | ParamSet") -> dict[int, Tensor]:
        """Replay the graph, returning the value of every node by index."""
        results: dict[int, Tensor] = {}
        for i, node in enumerate(self.nodes):
            if node.op is None:
                if node.leaf_name is not None:
                    if node.leaf_name not in leaf_values:
                        raise ShapeMismatchError(
                            f"graph node {i}: missing value for leaf '{node.leaf_name}'"
                        )
                    v = leaf_values[node.leaf_name]
                    if not isinstance(v, Tensor):
                        v = Tensor(v)
                    if v.shape != node.shape:
                        raise ShapeMismatchError(
                            f"graph node {i}: leaf '{node.leaf_name}' expects shape "
                            f"{tuple(node.shape)}, got {tuple(v.shape)}"
                        )
                    results[i] = v
                else:
                    results[i] = Tensor(node.const)
            else:
                parents = [results[p] for p in node.parent_ids]
                results[i] = apply_op(node.op, parents, dict(node.attrs))
        return results


def eval_graph(graph: ComputeGraph, leaf_values) -> dict[int, Tensor]:
    """Replay ``graph`` on the given leaf values (see ComputeGraph.eval)."""
    return graph.eval(leaf_values)
