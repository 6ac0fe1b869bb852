"""Append-only dataflow graph with static shape inference and reverse-mode autodiff.

A graph is built feedforward: every node's data inputs refer to earlier nodes.
Stitching (replica.py) may later rewrite cross-replica placeholder nodes to
reference nodes appended afterwards, so evaluation walks real dependencies
instead of trusting id order. After finalize() the node list is immutable;
variable storage stays live (reads/writes remain legal during async serving).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EvaluationError,
    GraphError,
    NotDifferentiableError,
    ShapeError,
    UnstitchedGraphError,
)
from .tensor import F64, NP_DTYPES, Tensor
from .variables import DEFAULT_DEVICE, VariableResource, VariableStore

Shape = tuple[int, ...]


@dataclass
class Node:
    nid: int
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    device: str
    shape: Shape
    dtype: str
    control: tuple[int, ...] = ()


class NodeRef:
    """Lightweight handle to a node; supports arithmetic sugar."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def node(self) -> Node:
        return self.graph._nodes[self.nid]

    @property
    def shape(self) -> Shape:
        return self.node.shape

    @property
    def dtype(self) -> str:
        return self.node.dtype

    @property
    def kind(self) -> str:
        return self.node.kind

    def __hash__(self):
        return hash((id(self.graph), self.nid))

    def __eq__(self, other):
        return (
            isinstance(other, NodeRef)
            and other.graph is self.graph
            and other.nid == self.nid
        )

    def __repr__(self):
        n = self.node
        return f"<node {self.nid}:{n.kind} shape={n.shape}>"

    def _coerce(self, other) -> "NodeRef":
        if isinstance(other, NodeRef):
            return other
        return self.graph.add_node("const", [], {"value": Tensor(other, dtype=self.dtype)})

    def __add__(self, other):
        return self.graph.add_node("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return self.graph.add_node("add", [self._coerce(other), self])

    def __sub__(self, other):
        return self.graph.add_node("sub", [self, self._coerce(other)])

    def __rsub__(self, other):
        return self.graph.add_node("sub", [self._coerce(other), self])

    def __mul__(self, other):
        return self.graph.add_node("mul", [self, self._coerce(other)])

    def __rmul__(self, other):
        return self.graph.add_node("mul", [self._coerce(other), self])

    def __truediv__(self, other):
        return self.graph.add_node("div", [self, self._coerce(other)])

    def __rtruediv__(self, other):
        return self.graph.add_node("div", [self._coerce(other), self])

    def __neg__(self):
        return self.graph.add_node("neg", [self])

    def __matmul__(self, other):
        return self.graph.add_node("matmul", [self, self._coerce(other)])


# ---------------------------------------------------------------------------
# Op registry: shape inference, kernels, vector-Jacobian products.
# ---------------------------------------------------------------------------

@dataclass
class OpDef:
    infer: Callable  # (attrs, in_shapes, in_dtypes) -> (shape, dtype)
    kernel: Callable  # (node, input_arrays, exec_ctx) -> ndarray
    vjp: Callable | None = None  # (graph, node, out_ref, g_ref) -> [NodeRef | None]
    stateful: bool = False


KINDS: dict[str, OpDef] = {}


def _register(name: str, **kwargs):
    KINDS[name] = OpDef(**kwargs)


def _same_dtype(kind: str, dtypes: Sequence[str]) -> str:
    if not dtypes:
        return F64
    if any(d != dtypes[0] for d in dtypes):
        raise ShapeError(f"{kind}: mixed dtypes {list(dtypes)}")
    return dtypes[0]


def _elementwise_pair(kind: str, shapes, dtypes):
    a, b = shapes
    dtype = _same_dtype(kind, dtypes)
    # Only scalar-with-tensor and exact-shape broadcasting; nothing general.
    if a == b:
        return a, dtype
    if a == ():
        return b, dtype
    if b == ():
        return a, dtype
    raise ShapeError(f"{kind}: incompatible shapes {a} and {b}")


def _unary(kind: str, shapes, dtypes):
    (s,) = shapes
    return s, _same_dtype(kind, dtypes)


def _sum_to_shape(graph: "Graph", g: NodeRef, target: Shape) -> NodeRef:
    """Collapse a gradient to a scalar when the forward operand was scalar."""
    if g.shape == target:
        return g
    if target == ():
        return graph.add_node("reduce_sum", [g], {"axis": None})
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {target}")


def _const(graph: "Graph", value, dtype: str, device: str | None = None) -> NodeRef:
    return graph.add_node("const", [], {"value": Tensor(value, dtype=dtype)}, device=device)


# -- constants, inputs, variables -------------------------------------------

_register(
    "const",
    infer=lambda attrs, shapes, dtypes: (attrs["value"].shape, attrs["value"].dtype),
    kernel=lambda node, ins, ctx: node.attrs["value"].np,
)

_register(
    "input",
    infer=lambda attrs, shapes, dtypes: (tuple(attrs["shape"]), attrs.get("dtype", F64)),
    kernel=None,  # resolved from feeds
)

_register(
    "var_read",
    infer=lambda attrs, shapes, dtypes: (attrs["var"].shape, attrs["var"].dtype),
    kernel=lambda node, ins, ctx: node.attrs["var"].read(),
)

def _assign_kernel(node, ins, ctx):
    node.attrs["var"].assign(ins[0])
    return node.attrs["var"].read()

_register(
    "assign",
    infer=lambda attrs, shapes, dtypes: (attrs["var"].shape, attrs["var"].dtype),
    kernel=_assign_kernel,
    stateful=True,
)

# -- arithmetic --------------------------------------------------------------

def _vjp_add(graph, node, out, g):
    a, b = node.inputs
    sa, sb = graph._nodes[a].shape, graph._nodes[b].shape
    return [_sum_to_shape(graph, g, sa), _sum_to_shape(graph, g, sb)]

def _vjp_sub(graph, node, out, g):
    a, b = node.inputs
    sa, sb = graph._nodes[a].shape, graph._nodes[b].shape
    return [_sum_to_shape(graph, g, sa),
            _sum_to_shape(graph, graph.add_node("neg", [g]), sb)]

def _vjp_mul(graph, node, out, g):
    a, b = (NodeRef(graph, i) for i in node.inputs)
    return [_sum_to_shape(graph, graph.add_node("mul", [g, b]), a.shape),
            _sum_to_shape(graph, graph.add_node("mul", [g, a]), b.shape)]

def _vjp_div(graph, node, out, g):
    a, b = (NodeRef(graph, i) for i in node.inputs)
    da = graph.add_node("div", [g, b])
    gb = graph.add_node("div", [graph.add_node("mul", [g, a]),
                                graph.add_node("mul", [b, b])])
    return [_sum_to_shape(graph, da, a.shape),
            _sum_to_shape(graph, graph.add_node("neg", [gb]), b.shape)]

_register("add", infer=lambda a, s, d: _elementwise_pair("add", s, d),
          kernel=lambda n, ins, c: ins[0] + ins[1], vjp=_vjp_add)
_register("sub", infer=lambda a, s, d: _elementwise_pair("sub", s, d),
          kernel=lambda n, ins, c: ins[0] - ins[1], vjp=_vjp_sub)
_register("mul", infer=lambda a, s, d: _elementwise_pair("mul", s, d),
          kernel=lambda n, ins, c: ins[0] * ins[1], vjp=_vjp_mul)
_register("div", infer=lambda a, s, d: _elementwise_pair("div", s, d),
          kernel=lambda n, ins, c: ins[0] / ins[1], vjp=_vjp_div)
_register("neg", infer=lambda a, s, d: _unary("neg", s, d),
          kernel=lambda n, ins, c: -ins[0],
          vjp=lambda graph, node, out, g: [graph.add_node("neg", [g])])


def _infer_matmul(attrs, shapes, dtypes):
    a, b = shapes
    if len(a) != 2 or len(b) != 2:
        raise ShapeError(f"matmul: expects rank-2 operands, got {a} and {b}")
    ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
    am, ak = (a[1], a[0]) if ta else (a[0], a[1])
    bk, bn = (b[1], b[0]) if tb else (b[0], b[1])
    if ak != bk:
        raise ShapeError(f"matmul: cannot contract shapes {a} and {b}"
                         f"{' (transposed)' if ta or tb else ''}")
    return (am, bn), _same_dtype("matmul", dtypes)

def _matmul_kernel(node, ins, ctx):
    a, b = ins
    if node.attrs.get("transpose_a", False):
        a = a.T
    if node.attrs.get("transpose_b", False):
        b = b.T
    return a @ b

def _vjp_matmul(graph, node, out, g):
    a, b = (NodeRef(graph, i) for i in node.inputs)
    ta, tb = node.attrs.get("transpose_a", False), node.attrs.get("transpose_b", False)
    if ta and tb:
        raise NotDifferentiableError("matmul: gradient with both operands transposed")
    if not ta and not tb:
        da = graph.add_node("matmul", [g, b], {"transpose_b": True})
        db = graph.add_node("matmul", [a, g], {"transpose_a": True})
    elif ta:
        da = graph.add_node("matmul", [b, g], {"transpose_b": True})
        db = graph.add_node("matmul", [a, g])
    else:  # tb
        da = graph.add_node("matmul", [g, b])
        db = graph.add_node("matmul", [g, a], {"transpose_a": True})
    return [da, db]

_register("matmul", infer=_infer_matmul, kernel=_matmul_kernel, vjp=_vjp_matmul)

# -- nonlinearities ----------------------------------------------------------

def _vjp_relu(graph, node, out, g):
    mask = graph.add_node("relu_mask", [NodeRef(graph, node.inputs[0])])
    return [graph.add_node("mul", [g, mask])]

def _vjp_tanh(graph, node, out, g):
    one = _const(graph, 1.0, out.dtype)
    sq = graph.add_node("mul", [out, out])
    return [graph.add_node("mul", [g, graph.add_node("sub", [one, sq])])]

def _vjp_square(graph, node, out, g):
    x = NodeRef(graph, node.inputs[0])
    two = _const(graph, 2.0, x.dtype)
    return [graph.add_node("mul", [g, graph.add_node("mul", [two, x])])]

def _vjp_sqrt(graph, node, out, g):
    two = _const(graph, 2.0, out.dtype)
    return [graph.add_node("div", [g, graph.add_node("mul", [two, out])])]

def _vjp_exp(graph, node, out, g):
    return [graph.add_node("mul", [g, out])]

def _vjp_log(graph, node, out, g):
    return [graph.add_node("div", [g, NodeRef(graph, node.inputs[0])])]

_register("relu", infer=lambda a, s, d: _unary("relu", s, d),
          kernel=lambda n, ins, c: np.maximum(ins[0], 0), vjp=_vjp_relu)
_register("tanh", infer=lambda a, s, d: _unary("tanh", s, d),
          kernel=lambda n, ins, c: np.tanh(ins[0]), vjp=_vjp_tanh)
_register("square", infer=lambda a, s, d: _unary("square", s, d),
          kernel=lambda n, ins, c: ins[0] * ins[0], vjp=_vjp_square)
_register("sqrt", infer=lambda a, s, d: _unary("sqrt", s, d),
          kernel=lambda n, ins, c: np.sqrt(ins[0]), vjp=_vjp_sqrt)
_register("exp", infer=lambda a, s, d: _unary("exp", s, d),
          kernel=lambda n, ins, c: np.exp(ins[0]), vjp=_vjp_exp)
_register("log", infer=lambda a, s, d: _unary("log", s, d),
          kernel=lambda n, ins, c: np.log(ins[0]), vjp=_vjp_log)

# relu subgradient at exactly 0 is 0, so tests are deterministic.
_register("relu_mask", infer=lambda a, s, d: _unary("relu_mask", s, d),
          kernel=lambda n, ins, c: (ins[0] > 0).astype(ins[0].dtype))

# -- reductions --------------------------------------------------------------

def _infer_reduce(kind):
    def infer(attrs, shapes, dtypes):
        (s,) = shapes
        axis = attrs.get("axis")
        dtype = _same_dtype(kind, dtypes)
        if axis is None:
            return (), dtype
        if not -len(s) <= axis < len(s):
            raise ShapeError(f"{kind}: axis {axis} out of range for shape {s}")
        axis %= len(s)
        return s[:axis] + s[axis + 1:], dtype
    return infer

def _reduce_count(shape: Shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis % len(shape)]

def _vjp_reduce_sum(graph, node, out, g):
    x_shape = graph._nodes[node.inputs[0]].shape
    return [graph.add_node("broadcast_to", [g],
                           {"shape": x_shape, "axis": node.attrs.get("axis")})]

def _vjp_reduce_mean(graph, node, out, g):
    x_shape = graph._nodes[node.inputs[0]].shape
    count = _reduce_count(x_shape, node.attrs.get("axis"))
    scaled = graph.add_node("mul", [g, _const(graph, 1.0 / count, g.dtype)])
    return [graph.add_node("broadcast_to", [scaled],
                           {"shape": x_shape, "axis": node.attrs.get("axis")})]

_register("reduce_sum", infer=_infer_reduce("reduce_sum"),
          kernel=lambda n, ins, c: np.sum(ins[0], axis=n.attrs.get("axis")),
          vjp=_vjp_reduce_sum)
_register("reduce_mean", infer=_infer_reduce("reduce_mean"),
          kernel=lambda n, ins, c: np.mean(ins[0], axis=n.attrs.get("axis")),
          vjp=_vjp_reduce_mean)


def _infer_broadcast_to(attrs, shapes, dtypes):
    (s,) = shapes
    target = tuple(attrs["shape"])
    axis = attrs.get("axis")
    expected = () if axis is None else target[:axis % len(target)] + target[axis % len(target) + 1:]
    if s != expected and s != ():
        raise ShapeError(f"broadcast_to: input shape {s} does not match reduced {expected}")
    return target, _same_dtype("broadcast_to", dtypes)

def _broadcast_to_kernel(node, ins, ctx):
    target = tuple(node.attrs["shape"])
    axis = node.attrs.get("axis")
    g = ins[0]
    if axis is not None and g.shape != ():
        g = np.expand_dims(g, axis % len(target))
    return np.broadcast_to(g, target).copy()

_register("broadcast_to", infer=_infer_broadcast_to, kernel=_broadcast_to_kernel)

# -- classification loss -----------------------------------------------------

def _infer_softmax_xent(attrs, shapes, dtypes):
    logits, labels = shapes
    if len(logits) != 2 or logits != labels:
        raise ShapeError(
            f"softmax_cross_entropy: expects matching rank-2 logits/labels, got {logits}, {labels}")
    return (logits[0],), _same_dtype("softmax_cross_entropy", dtypes)

def _softmax_xent_kernel(node, ins, ctx):
    logits, labels = ins
    m = np.max(logits, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    return lse - np.sum(labels * logits, axis=1)

def _vjp_softmax_xent(graph, node, out, g):
    logits, labels = (NodeRef(graph, i) for i in node.inputs)
    d_logits = graph.add_node("softmax_xent_grad", [logits, labels, g])
    g_col = graph.add_node("broadcast_to", [g], {"shape": logits.shape, "axis": 1})
    d_labels = graph.add_node("neg", [graph.add_node("mul", [g_col, logits])])
    return [d_logits, d_labels]

def _softmax_xent_grad_kernel(node, ins, ctx):
    logits, labels, g = ins
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    softmax = e / np.sum(e, axis=1, keepdims=True)
    return (softmax - labels) * g[:, None]

_register("softmax_cross_entropy", infer=_infer_softmax_xent,
          kernel=_softmax_xent_kernel, vjp=_vjp_softmax_xent)
_register("softmax_xent_grad",
          infer=lambda a, s, d: (s[0], _same_dtype("softmax_xent_grad", d)),
          kernel=_softmax_xent_grad_kernel)

# -- shape manipulation ------------------------------------------------------

def _infer_concat(attrs, shapes, dtypes):
    axis = attrs["axis"]
    first = shapes[0]
    if len(first) == 0:
        raise ShapeError("concat: rank-0 operands cannot be concatenated")
    axis %= len(first)
    total = 0
    for s in shapes:
        if len(s) != len(first) or s[:axis] + s[axis + 1:] != first[:axis] + first[axis + 1:]:
            raise ShapeError(f"concat: shapes {list(shapes)} differ off axis {axis}")
        total += s[axis]
    return first[:axis] + (total,) + first[axis + 1:], _same_dtype("concat", dtypes)

def _vjp_concat(graph, node, out, g):
    axis = node.attrs["axis"] % len(out.shape)
    grads, offset = [], 0
    for i in node.inputs:
        s = graph._nodes[i].shape
        begin = tuple(offset if k == axis else 0 for k in range(len(s)))
        grads.append(graph.add_node("slice", [g], {"begin": begin, "size": s}))
        offset += s[axis]
    return grads

_register("concat", infer=_infer_concat,
          kernel=lambda n, ins, c: np.concatenate(ins, axis=n.attrs["axis"]),
          vjp=_vjp_concat)


def _infer_slice(attrs, shapes, dtypes):
    (s,) = shapes
    begin, size = tuple(attrs["begin"]), tuple(attrs["size"])
    if len(begin) != len(s) or len(size) != len(s):
        raise ShapeError(f"slice: begin/size rank must match input rank {len(s)}")
    for b, z, d in zip(begin, size, s):
        if b < 0 or z < 0 or b + z > d:
            raise ShapeError(f"slice: window begin={begin} size={size} exceeds shape {s}")
    return size, _same_dtype("slice", dtypes)

def _slice_kernel(node, ins, ctx):
    begin, size = node.attrs["begin"], node.attrs["size"]
    window = tuple(np.s_[b:b + z] for b, z in zip(begin, size))
    return ins[0][window].copy()

def _vjp_slice(graph, node, out, g):
    x_shape = graph._nodes[node.inputs[0]].shape
    begin, size = node.attrs["begin"], node.attrs["size"]
    cur = g
    for axis in range(len(x_shape)):
        b, z, full = begin[axis], size[axis], x_shape[axis]
        if b == 0 and z == full:
            continue
        pieces = []
        if b > 0:
            shape = cur.shape[:axis] + (b,) + cur.shape[axis + 1:]
            pieces.append(_const(graph, np.zeros(shape), g.dtype))
        pieces.append(cur)
        if b + z < full:
            shape = cur.shape[:axis] + (full - b - z,) + cur.shape[axis + 1:]
            pieces.append(_const(graph, np.zeros(shape), g.dtype))
        cur = graph.add_node("concat", pieces, {"axis": axis})
    return [cur]

_register("slice", infer=_infer_slice, kernel=_slice_kernel, vjp=_vjp_slice)


def _infer_reshape(attrs, shapes, dtypes):
    (s,) = shapes
    target = tuple(attrs["shape"])
    if int(np.prod(s) if s else 1) != int(np.prod(target) if target else 1):
        raise ShapeError(f"reshape: cannot reshape {s} to {target}")
    return target, _same_dtype("reshape", dtypes)

def _vjp_reshape(graph, node, out, g):
    x_shape = graph._nodes[node.inputs[0]].shape
    return [graph.add_node("reshape", [g], {"shape": x_shape})]

_register("reshape", infer=_infer_reshape,
          kernel=lambda n, ins, c: ins[0].reshape(n.attrs["shape"]),
          vjp=_vjp_reshape)

# -- n-ary folds (gradient accumulation and stitched collectives) ------------

def _infer_nary(kind):
    def infer(attrs, shapes, dtypes):
        first = shapes[0]
        if any(s != first for s in shapes):
            raise ShapeError(f"{kind}: all operands must share shape, got {list(shapes)}")
        return first, _same_dtype(kind, dtypes)
    return infer

def _fold_sum(node, ins, ctx):
    # Ascending input order, pairwise left fold: deterministic bit-exact results.
    acc = ins[0]
    for arr in ins[1:]:
        acc = acc + arr
    return acc

def _fold_mean(node, ins, ctx):
    return _fold_sum(node, ins, ctx) / len(ins)

def _fold_max(node, ins, ctx):
    acc = ins[0]
    for arr in ins[1:]:
        acc = np.maximum(acc, arr)
    return acc

_register("nary_sum", infer=_infer_nary("nary_sum"), kernel=_fold_sum,
          vjp=lambda graph, node, out, g: [g for _ in node.inputs])
_register("nary_mean", infer=_infer_nary("nary_mean"), kernel=_fold_mean)
_register("nary_max", infer=_infer_nary("nary_max"), kernel=_fold_max)

_register("pack", infer=lambda a, s, d: ((len(s),) + s[0], _same_dtype("pack", d)),
          kernel=lambda n, ins, c: np.stack(ins, axis=0))

# pick0 forwards its first input; stitching uses it to alias broadcast results.
_register("pick0", infer=lambda a, s, d: (s[0], d[0]),
          kernel=lambda n, ins, c: ins[0])

# -- cross-replica communication sites ---------------------------------------

def _infer_collective(attrs, shapes, dtypes):
    (s,) = shapes
    kind = attrs["ckind"]
    dtype = _same_dtype("collective", dtypes)
    if kind in ("sum", "mean", "max", "broadcast"):
        return s, dtype
    if kind == "gather":
        n = attrs["num_replicas"]
        if s == ():
            return (n,), dtype
        return (s[0] * n,) + s[1:], dtype
    raise ShapeError(f"collective: unknown kind {kind!r}")

def _placeholder_kernel(node, ins, ctx):
    raise UnstitchedGraphError(
        f"collective placeholder {node.attrs['label']!r} executed: the graph was "
        "not stitched; build all replicas and stitch before evaluating")

_register("collective_placeholder", infer=_infer_collective, kernel=_placeholder_kernel)


def _mesh_collective_kernel(node, ins, ctx):
    comm = (ctx.runtime or {}).get("communicator")
    if comm is None:
        raise EvaluationError(
            f"mesh collective {node.attrs['label']!r} needs a communicator at runtime")
    kind = node.attrs["ckind"]
    label = node.attrs["label"]
    local = Tensor.wrap(np.ascontiguousarray(ins[0]))
    if kind in ("sum", "mean", "max"):
        return comm.all_reduce(local, kind, label).np
    if kind == "gather":
        parts = comm.all_gather(local, label)
        if parts[0].shape == ():
            return np.stack([p.np for p in parts], axis=0)
        return np.concatenate([p.np for p in parts], axis=0)
    if kind == "broadcast":
        root_value = local if comm.rank == 0 else None
        return comm.broadcast(root_value, label, shape=local.shape, dtype=local.dtype).np
    raise EvaluationError(f"mesh collective: unknown kind {kind!r}")

_register("mesh_collective", infer=_infer_collective, kernel=_mesh_collective_kernel,
          stateful=True)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

_LEAF_KINDS = {"const", "input", "var_read"}


class _ExecContext:
    __slots__ = ("feeds", "runtime")

    def __init__(self, feeds, runtime):
        self.feeds = feeds
        self.runtime = runtime


class Graph:
    """Append-only op list plus a variable store shared by name resolution."""

    def __init__(self, variables: VariableStore | None = None,
                 default_device: str = DEFAULT_DEVICE):
        self._nodes: list[Node] = []
        self.finalized = False
        self.variables = variables if variables is not None else VariableStore()
        self._device_stack = [default_device]
        self._control_stack: list[tuple[int, ...]] = []
        self._lock = threading.Lock()

    # -- construction ---------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def node(self, nid: int) -> Node:
        return self._nodes[nid]

    @contextmanager
    def device(self, tag: str):
        self._device_stack.append(tag)
        try:
            yield
        finally:
            self._device_stack.pop()

    @property
    def current_device(self) -> str:
        return self._device_stack[-1]

    @contextmanager
    def control_dependencies(self, refs: Sequence[NodeRef]):
        self._control_stack.append(tuple(r.nid for r in refs))
        try:
            yield
        finally:
            self._control_stack.pop()

    def add_node(self, kind: str, inputs: Sequence[NodeRef] = (), attrs: dict | None = None,
                 device: str | None = None, control: Sequence[NodeRef] = ()) -> NodeRef:
        if self.finalized:
            raise GraphError("graph is finalized; no further construction allowed")
        op = KINDS.get(kind)
        if op is None:
            raise GraphError(f"unknown op kind {kind!r}")
        attrs = dict(attrs or {})
        in_ids = []
        for ref in inputs:
            if not isinstance(ref, NodeRef) or ref.graph is not self:
                raise GraphError(f"{kind}: inputs must be NodeRefs of this graph, got {ref!r}")
            in_ids.append(ref.nid)
        shapes = tuple(self._nodes[i].shape for i in in_ids)
        dtypes = tuple(self._nodes[i].dtype for i in in_ids)
        shape, dtype = op.infer(attrs, shapes, dtypes)
        ctrl = tuple(r.nid for r in control)
        for extra in self._control_stack:
            ctrl = ctrl + extra
        node = Node(
            nid=len(self._nodes), kind=kind, inputs=tuple(in_ids), attrs=attrs,
            device=device or self.current_device, shape=tuple(shape), dtype=dtype,
            control=ctrl,
        )
        self._nodes.append(node)
        return NodeRef(self, node.nid)

    def rewrite_node(self, nid: int, kind: str, inputs: Sequence[NodeRef],
                     attrs: dict | None = None) -> None:
        """Replace a node in place (stitching only); shape must be preserved."""
        if self.finalized:
            raise GraphError("cannot rewrite a finalized graph")
        old = self._nodes[nid]
        op = KINDS.get(kind)
        if op is None:
            raise GraphError(f"unknown op kind {kind!r}")
        attrs = dict(attrs or {})
        shapes = tuple(r.shape for r in inputs)
        dtypes = tuple(r.dtype for r in inputs)
        shape, dtype = op.infer(attrs, shapes, dtypes)
        if tuple(shape) != old.shape or dtype != old.dtype:
            raise GraphError(
                f"rewrite of node {nid} changed signature: {old.shape}/{old.dtype} "
                f"-> {shape}/{dtype}")
        self._nodes[nid] = Node(
            nid=nid, kind=kind, inputs=tuple(r.nid for r in inputs), attrs=attrs,
            device=old.device, shape=old.shape, dtype=old.dtype, control=old.control,
        )

    def finalize(self) -> "Graph":
        self.finalized = True
        return self

    def unresolved_collectives(self) -> list[str]:
        return [n.attrs["label"] for n in self._nodes if n.kind == "collective_placeholder"]

    def nodes_in_range(self, start: int, end: int) -> list[Node]:
        return self._nodes[start:end]

    # -- execution --------------------------------------------------------

    def evaluate(self, fetches: Sequence[NodeRef], feeds: dict | None = None,
                 runtime: dict | None = None) -> list[Tensor]:
        """Execute ancestors of `fetches` and return their values.

        Deterministic: nodes are visited in a fixed depth-first order and each
        node runs at most once per call, so repeated evaluation with identical
        feeds and variable state is bit-identical.
        """
        if not self.finalized:
            raise EvaluationError("graph must be finalized before evaluation")
        feed_map: dict[int, np.ndarray] = {}
        for ref, value in (feeds or {}).items():
            arr = value.np if isinstance(value, Tensor) else np.asarray(value)
            node = self._nodes[ref.nid]
            if node.kind != "input":
                raise EvaluationError(f"only placeholder inputs can be fed, got {node.kind}")
            if arr.shape != node.shape:
                raise EvaluationError(
                    f"feed for input {node.attrs.get('name', ref.nid)!r} has shape "
                    f"{arr.shape}, expected {node.shape}")
            feed_map[ref.nid] = np.asarray(arr, dtype=NP_DTYPES[node.dtype])

        ctx = _ExecContext(feed_map, runtime)
        memo: dict[int, np.ndarray] = {}
        in_progress: set[int] = set()

        for fetch in fetches:
            if fetch.graph is not self:
                raise EvaluationError("fetch does not belong to this graph")
            self._eval_node(fetch.nid, memo, in_progress, ctx)
        return [Tensor.wrap(np.asarray(memo[f.nid])) for f in fetches]

    def _eval_node(self, root: int, memo, in_progress, ctx) -> None:
        stack: list[tuple[int, bool]] = [(root, False)]
        while stack:
            nid, ready = stack.pop()
            if nid in memo:
                continue
            node = self._nodes[nid]
            deps = node.inputs + node.control
            if not ready:
                if nid in in_progress:
                    raise EvaluationError(f"cycle detected at node {nid} ({node.kind})")
                in_progress.add(nid)
                stack.append((nid, True))
                for dep in reversed(deps):
                    if dep not in memo:
                        stack.append((dep, False))
                continue
            in_progress.discard(nid)
            if node.kind == "input":
                if nid not in ctx.feeds:
                    raise EvaluationError(
                        f"placeholder input {node.attrs.get('name', nid)!r} reachable "
                        "from fetches was not fed")
                memo[nid] = ctx.feeds[nid]
                continue
            ins = [memo[i] for i in node.inputs]
            memo[nid] = KINDS[node.kind].kernel(node, ins, ctx)


# ---------------------------------------------------------------------------
# Reverse-mode differentiation
# ---------------------------------------------------------------------------

def backprop(graph: Graph, loss: NodeRef, wrt: Sequence[VariableResource]) -> list[NodeRef]:
    """Append gradient nodes d(loss)/d(var) for each variable, in order.

    Requires a scalar loss. Variables that do not participate in the loss's
    ancestry get a zero gradient of the variable's shape. Differentiation runs
    during construction, when node ids are still topologically ordered.
    """
    if loss.graph is not graph:
        raise GraphError("loss node does not belong to this graph")
    if loss.shape != ():
        raise GraphError(f"backprop: loss must be scalar, got shape {loss.shape}")

    ancestors = _ancestry(graph, loss.nid)
    contributions: dict[int, list[NodeRef]] = {
        loss.nid: [_const(graph, 1.0, loss.dtype)]}
    combined: dict[int, NodeRef] = {}

    for nid in sorted(ancestors, reverse=True):
        contribs = contributions.pop(nid, None)
        if not contribs:
            continue
        g = contribs[0] if len(contribs) == 1 else graph.add_node("nary_sum", contribs)
        combined[nid] = g
        node = graph.node(nid)
        if node.kind in _LEAF_KINDS:
            continue
        op = KINDS[node.kind]
        if op.vjp is None:
            raise NotDifferentiableError(
                f"cannot differentiate through op kind {node.kind!r}")
        input_grads = op.vjp(graph, node, NodeRef(graph, nid), g)
        for in_id, gref in zip(node.inputs, input_grads):
            if gref is not None and in_id in ancestors:
                contributions.setdefault(in_id, []).append(gref)

    grads: list[NodeRef] = []
    for var in wrt:
        reads = [combined[n.nid] for n in graph._nodes
                 if n.kind == "var_read" and n.attrs["var"] is var and n.nid in combined]
        if not reads:
            grads.append(_const(graph, np.zeros(var.shape), var.dtype))
        elif len(reads) == 1:
            grads.append(reads[0])
        else:
            grads.append(graph.add_node("nary_sum", reads))
    return grads


def _ancestry(graph: Graph, root: int) -> set[int]:
    seen = {root}
    stack = [root]
    while stack:
        nid = stack.pop()
        for dep in graph.node(nid).inputs:
            if dep not in seen:
                seen.add(dep)
                stack.append(dep)
    return seen
