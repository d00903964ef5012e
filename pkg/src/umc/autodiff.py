"""Reverse-mode automatic differentiation over a static computation graph.

A :class:`Graph` is built once per architecture and reused for every
training step. Nodes are appended in construction order, which is by
definition a topological order (an op may only consume ids that already
exist), so forward runs front to back and backward back to front.

Values are dense numpy arrays. Training uses float32; gradient checking
runs the same ops in float64. Ops must preserve the dtype of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rng import STREAM_CHECK, make_rng


class GraphError(Exception):
    """Structural misuse of a graph: unbound input, bad wiring, bad state."""


class ShapeError(GraphError):
    """Operand shapes or dtypes violate an op's contract."""


# --------------------------------------------------------------------------
# Op registry
# --------------------------------------------------------------------------

# forward(attrs, *values) -> ndarray
# backward(attrs, values, out, gout) -> tuple of per-input gradients,
#   None for inputs that are not differentiable (e.g. integer label maps).
# branch_state(attrs, values) -> discrete array identifying which linear
#   piece a piecewise op is on (ReLU sign pattern, pool argmax); None for
#   ops that are smooth everywhere.
ForwardFn = Callable[..., np.ndarray]
BackwardFn = Callable[..., tuple]


@dataclass(frozen=True)
class OpDef:
    forward: ForwardFn
    backward: BackwardFn
    branch_state: Optional[Callable] = None


OPS: dict[str, OpDef] = {}


def register_op(kind: str, forward: ForwardFn, backward: BackwardFn,
                branch_state: Callable | None = None) -> None:
    if kind in OPS:
        raise GraphError(f"op kind '{kind}' already registered")
    OPS[kind] = OpDef(forward, backward, branch_state)


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    op: str                       # "input", "param", or a registered op kind
    inputs: list[int]
    attrs: dict
    requires_grad: bool
    name: Optional[str] = None    # set for inputs and params
    channels: Optional[int] = None  # declared channel count for 4-D inputs
    integer: bool = False         # input carries an integer label map
    value: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None


class Graph:
    """Append-only DAG of tensor ops with named inputs, params and outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    # -- construction ------------------------------------------------------

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return node.id

    def input(self, name: str, *, channels: int | None = None,
              integer: bool = False, requires_grad: bool = False) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input '{name}'")
        nid = len(self.nodes)
        self.inputs[name] = nid
        return self._append(Node(nid, "input", [], {}, requires_grad,
                                 name=name, channels=channels, integer=integer))

    def param(self, name: str, value: np.ndarray) -> int:
        if name in self.params:
            raise GraphError(f"duplicate parameter '{name}'")
        nid = len(self.nodes)
        self.params[name] = nid
        node = Node(nid, "param", [], {}, True, name=name)
        node.value = np.asarray(value)
        return self._append(node)

    def apply(self, kind: str, *input_ids: int, **attrs) -> int:
        if kind not in OPS:
            raise GraphError(f"unknown op kind '{kind}'")
        nid = len(self.nodes)
        for i in input_ids:
            if not 0 <= i < nid:
                raise GraphError(f"op '{kind}' consumes nonexistent node {i}")
        requires = any(self.nodes[i].requires_grad for i in input_ids)
        return self._append(Node(nid, kind, list(input_ids), attrs, requires))

    def mark_output(self, name: str, node_id: int) -> None:
        if name in self.outputs:
            raise GraphError(f"duplicate output '{name}'")
        self.outputs[name] = node_id

    # -- parameter access ----------------------------------------------------

    def set_param(self, name: str, value: np.ndarray) -> None:
        node = self.nodes[self.params[name]]
        value = np.asarray(value)
        if node.value is not None and node.value.shape != value.shape:
            raise ShapeError(f"parameter '{name}' shape {node.value.shape} "
                             f"cannot be replaced by {value.shape}")
        node.value = value

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: self.nodes[i].value for name, i in self.params.items()}

    # -- execution -----------------------------------------------------------

    def _bind(self, node: Node, value) -> np.ndarray:
        v = np.asarray(value)
        if node.integer:
            if not np.issubdtype(v.dtype, np.integer):
                raise ShapeError(f"input '{node.name}' expects an integer map, "
                                 f"got dtype {v.dtype}")
        elif not np.issubdtype(v.dtype, np.floating):
            raise ShapeError(f"input '{node.name}' expects a float tensor, "
                             f"got dtype {v.dtype}")
        if node.channels is not None:
            if v.ndim != 4 or v.shape[1] != node.channels:
                raise ShapeError(
                    f"input '{node.name}' declared with {node.channels} channels, "
                    f"bound shape {v.shape}")
        return v

    def forward(self, bindings: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Evaluate every node in topological order; return the outputs.

        Pure: identical bindings (and parameter values) give bit-identical
        results on every call.
        """
        for name in self.inputs:
            if name not in bindings:
                raise GraphError(f"unbound input '{name}'")
        for name in bindings:
            if name not in self.inputs:
                raise GraphError(f"binding '{name}' does not match any input")
        for node in self.nodes:
            if node.op == "input":
                node.value = self._bind(node, bindings[node.name])
            elif node.op == "param":
                if node.value is None:
                    raise GraphError(f"parameter '{node.name}' has no value")
            else:
                vals = [self.nodes[i].value for i in node.inputs]
                node.value = OPS[node.op].forward(node.attrs, *vals)
        return {name: self.nodes[i].value for name, i in self.outputs.items()}

    def backward(self, loss_id: int) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) for every requires-grad node.

        Returns the gradient for each named parameter; parameters the loss
        does not depend on get explicit zeros. Multiple consumers of one
        node sum their contributions.
        """
        loss = self.nodes[loss_id]
        if loss.value is None:
            raise GraphError("backward called before forward")
        if loss.value.size != 1:
            raise GraphError(f"loss node must be scalar, has shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.op in ("input", "param"):
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            gins = OPS[node.op].backward(node.attrs, vals, node.value, node.grad)
            for i, g in zip(node.inputs, gins):
                src = self.nodes[i]
                if g is None or not src.requires_grad:
                    continue
                src.grad = g if src.grad is None else src.grad + g
        grads = {}
        for name, i in self.params.items():
            node = self.nodes[i]
            grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return grads


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def kaiming_init(fan_in: int, shape, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, sqrt(2/fan_in)) samples, deterministic in the rng state."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    return rng.normal(0.0, std, size=tuple(shape)).astype(dtype)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(kind: str, inputs, eps: float = 1e-4, attrs: dict | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The op output is probed through a fixed random linear functional W, so
    the scalar s(x) = sum(W * f(x)) has analytic gradient equal to the op's
    backward run with upstream gradient W. Central differences use
    (s(x+eps) - s(x-eps)) / (2 eps), all in double precision. Non-finite
    values anywhere make the check report infinity.
    """
    attrs = attrs or {}
    op = OPS[kind]
    xs = []
    for x in inputs:
        x = np.asarray(x)
        if np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        xs.append(x.copy())
    out = op.forward(attrs, *xs)
    w = make_rng(seed, STREAM_CHECK).standard_normal(out.shape)
    analytic = op.backward(attrs, xs, out, w)

    worst = 0.0
    for k, x in enumerate(xs):
        if not np.issubdtype(x.dtype, np.floating):
            continue
        a = analytic[k]
        a = np.zeros_like(x) if a is None else np.asarray(a, dtype=np.float64)
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            sp = float(np.sum(w * op.forward(attrs, *xs)))
            flat[j] = orig - eps
            sm = float(np.sum(w * op.forward(attrs, *xs)))
            flat[j] = orig
            nflat[j] = (sp - sm) / (2.0 * eps)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            return float("inf")
        err = _relative_errors(a, numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def _branch_states(graph: Graph) -> list:
    states = []
    for node in graph.nodes:
        op = OPS.get(node.op)
        if op is not None and op.branch_state is not None:
            vals = [graph.nodes[i].value for i in node.inputs]
            states.append(op.branch_state(node.attrs, vals))
    return states


def _same_states(a: list, b: list) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def graph_grad_check(graph: Graph, bindings: dict, loss_name: str,
                     eps: float = 1e-4, probes_per_param: int = 4,
                     seed: int = 0) -> float:
    """End-to-end check of d(loss)/d(params) on a whole graph.

    For each parameter tensor, perturbs along seeded random unit directions
    v and compares the central difference (L(p + eps v) - L(p - eps v)) /
    (2 eps) against the analytic directional derivative sum(grad * v).
    Directions aggregate the whole tensor, so the signal sits at the RMS
    gradient scale instead of whatever luckless single coordinate a
    pointwise probe might land on, where f64 roundoff in an O(1) loss can
    swamp the difference. Parameters and bindings should be float64.

    Two kinds of direction are rejected and redrawn, since neither can
    support a meaningful comparison:

    * a step that flips a ReLU sign or a pool argmax (per the ops' declared
      branch states) puts the two loss evaluations on different linear
      pieces;
    * a draw nearly orthogonal to the gradient leaves a directional
      derivative far below the tensor's RMS gradient, so the f64 loss
      difference carries no significant bits. Orthogonality is judged on
      the analytic side alone, which cannot mask a wrong gradient: if the
      analytic gradient is bogusly tiny everywhere, every draw is rejected
      and the check reports infinity rather than agreement.

    A parameter with no usable direction after several redraws reports
    infinity.
    """
    rng = make_rng(seed, STREAM_CHECK, 1)
    loss_id = graph.outputs[loss_name]
    graph.forward(bindings)
    base_states = _branch_states(graph)
    grads = graph.backward(loss_id)

    worst = 0.0
    for name, node_id in graph.params.items():
        node = graph.nodes[node_id]
        base = node.value.copy()
        analytic_full = grads[name]
        rms = float(np.sqrt(np.mean(analytic_full ** 2)))
        checked = 0
        for _ in range(8 * probes_per_param):
            if checked >= probes_per_param:
                break
            v = rng.standard_normal(base.shape)
            v /= np.sqrt(np.sum(v * v))
            if abs(float(np.sum(analytic_full * v))) < 0.05 * rms:
                continue
            node.value = base + eps * v
            lp = float(graph.forward(bindings)[loss_name])
            clean = _same_states(base_states, _branch_states(graph))
            node.value = base - eps * v
            lm = float(graph.forward(bindings)[loss_name])
            clean = clean and _same_states(base_states, _branch_states(graph))
            node.value = base
            if not clean:
                continue
            checked += 1
            numeric = (lp - lm) / (2.0 * eps)
            analytic = float(np.sum(analytic_full * v))
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                return float("inf")
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
        if checked == 0:
            return float("inf")
    graph.forward(bindings)  # restore values for any later use
    return worst
