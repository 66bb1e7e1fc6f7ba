"""Certified node bounds over an input box.

``interval_bounds`` is a forward walk with one interval transformer per node
kind.  ``backward_linear_bounds`` walks backwards from every ReLU input and
from the sink, carrying linear bounding functions that are concretized on the
box; unstable ReLUs use the triangle upper relaxation and the adaptive
(0 or identity) lower relaxation.  Results are intersected with the interval
bounds, so they are never looser.

Both functions accept ``fixed``: a map from ReLU unit ``(node, index)`` to
``True`` (active, pre-activation >= 0) or ``False`` (inactive, <= 0).  The
bounds are then valid for the part of the box that obeys those phases.
Arithmetic is plain float64 without directed rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import (
    Add, Affine, Concat, Graph, GraphError, Hyperrectangle, Negate, Parameter,
    ReLU, ScaleConst, SelectIndices, Slice, Subtract, lower_with_map,
)

Phases = Mapping[tuple[int, int], bool]


class InfeasibleRegion(Exception):
    """The fixed ReLU phases contradict the bounds: the region is empty."""


@dataclass(frozen=True, eq=False)
class Bounds:
    lower: Mapping[int, np.ndarray]
    upper: Mapping[int, np.ndarray]
    sink: int

    @property
    def sink_lower(self) -> float:
        return float(self.lower[self.sink][0])

    @property
    def sink_upper(self) -> float:
        return float(self.upper[self.sink][0])

    def contains(self, node: int, value, atol: float = 0.0) -> bool:
        value = np.asarray(value)
        return bool(np.all(value >= self.lower[node] - atol) and np.all(value <= self.upper[node] + atol))


def _check_box(graph: Graph, box: Hyperrectangle):
    if box.dim != graph.input_size:
        raise GraphError(f"box has dimension {box.dim}, graph input has {graph.input_size}")


def _apply_phases(node: int, lo: np.ndarray, hi: np.ndarray, fixed: Phases | None):
    """Clip pre-activation bounds of ReLU ``node`` to its fixed phases."""
    if not fixed:
        return lo, hi
    lo, hi = lo.copy(), hi.copy()
    for k in range(lo.size):
        phase = fixed.get((node, k))
        if phase is True:
            lo[k] = max(lo[k], 0.0)
        elif phase is False:
            hi[k] = min(hi[k], 0.0)
    if np.any(lo > hi):
        raise InfeasibleRegion(node)
    return lo, hi


def interval_bounds(graph: Graph, box: Hyperrectangle, fixed: Phases | None = None) -> Bounds:
    """Sound per-node enclosure by forward interval propagation."""
    graph.require_valid()
    _check_box(graph, box)
    lower: dict[int, np.ndarray] = {}
    upper: dict[int, np.ndarray] = {}
    pre: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in graph.order:
        node = graph.nodes[i]
        if node.op.kind == "input":
            lo, hi = box.lower.copy(), box.upper.copy()
        elif isinstance(node.op, ReLU):
            p = node.preds[0]
            plo, phi = _apply_phases(i, lower[p], upper[p], fixed)
            pre[i] = (plo, phi)
            lo, hi = node.op.interval((plo, phi))
        else:
            lo, hi = node.op.interval(*((lower[p], upper[p]) for p in node.preds))
        lower[i] = np.asarray(lo, dtype=np.float64)
        upper[i] = np.asarray(hi, dtype=np.float64)
    return Bounds(lower, upper, graph.sink)


class _Backward:
    """Backward linear bound propagation on a lowered graph."""

    def __init__(self, graph: Graph, box: Hyperrectangle, fixed: Phases | None):
        self.graph = graph
        self.box = box
        self.fixed = fixed
        self.shapes = graph.shapes
        self.lower: dict[int, np.ndarray] = {}
        self.upper: dict[int, np.ndarray] = {}
        self.relax: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}

    def _relaxation(self, relu: int):
        """(lower slope, upper slope, upper intercept) for each unit of ``relu``."""
        if relu in self.relax:
            return self.relax[relu]
        p = self.graph.nodes[relu].preds[0]
        lo, hi = _apply_phases(relu, self.lower[p], self.upper[p], self.fixed)
        lo_slope = np.zeros_like(lo)
        up_slope = np.zeros_like(lo)
        up_icpt = np.zeros_like(lo)
        active = lo >= 0
        lo_slope[active] = up_slope[active] = 1.0
        unstable = (lo < 0) & (hi > 0)
        width = hi[unstable] - lo[unstable]
        up_slope[unstable] = hi[unstable] / width
        up_icpt[unstable] = -lo[unstable] * up_slope[unstable]
        lo_slope[unstable] = (hi[unstable] >= -lo[unstable]).astype(float)
        self.relax[relu] = (lo_slope, up_slope, up_icpt)
        return self.relax[relu]

    def bound(self, target: int) -> tuple[np.ndarray, np.ndarray]:
        g = self.graph
        d = self.shapes[target].size
        la: dict[int, np.ndarray] = {target: np.eye(d)}
        ua: dict[int, np.ndarray] = {target: np.eye(d)}
        lbias = np.zeros(d)
        ubias = np.zeros(d)
        pos = g.order.index(target)

        def push(p, lcoef, ucoef):
            if p in la:
                la[p] = la[p] + lcoef
                ua[p] = ua[p] + ucoef
            else:
                la[p], ua[p] = lcoef, ucoef

        for i in reversed(g.order[: pos + 1]):
            if i not in la or i == g.input:
                continue
            lA, uA = la.pop(i), ua.pop(i)
            node = g.nodes[i]
            op = node.op
            if isinstance(op, Parameter):
                lbias = lbias + lA @ op.value
                ubias = ubias + uA @ op.value
            elif isinstance(op, Affine):
                push(node.preds[0], lA @ op.weight, uA @ op.weight)
                lbias = lbias + lA @ op.bias
                ubias = ubias + uA @ op.bias
            elif isinstance(op, Add):
                push(node.preds[0], lA, uA)
                push(node.preds[1], lA, uA)
            elif isinstance(op, Subtract):
                push(node.preds[0], lA, uA)
                push(node.preds[1], -lA, -uA)
            elif isinstance(op, Negate):
                push(node.preds[0], -lA, -uA)
            elif isinstance(op, ScaleConst):
                push(node.preds[0], op.scale * lA, op.scale * uA)
            elif isinstance(op, Concat):
                maps = op.index_maps([self.shapes[p] for p in node.preds])
                for p, idx in zip(node.preds, maps):
                    push(p, lA[:, idx], uA[:, idx])
            elif isinstance(op, (Slice, SelectIndices)):
                p = node.preds[0]
                size = self.shapes[p].size
                lp, up = np.zeros((d, size)), np.zeros((d, size))
                idx = np.arange(op.start, op.end) if isinstance(op, Slice) else op.indices
                np.add.at(lp, (slice(None), idx), lA)
                np.add.at(up, (slice(None), idx), uA)
                push(p, lp, up)
            elif isinstance(op, ReLU):
                lo_slope, up_slope, up_icpt = self._relaxation(i)
                lpos, lneg = np.maximum(lA, 0), np.minimum(lA, 0)
                upos, uneg = np.maximum(uA, 0), np.minimum(uA, 0)
                push(node.preds[0], lpos * lo_slope + lneg * up_slope, upos * up_slope + uneg * lo_slope)
                lbias = lbias + lneg @ up_icpt
                ubias = ubias + upos @ up_icpt
            else:
                raise GraphError(f"no linear bound rule for {op.kind}; lower the graph first")
        if g.input in la:
            lA, uA = la[g.input], ua[g.input]
            box = self.box
            lo = np.maximum(lA, 0) @ box.lower + np.minimum(lA, 0) @ box.upper + lbias
            hi = np.maximum(uA, 0) @ box.upper + np.minimum(uA, 0) @ box.lower + ubias
        else:
            lo, hi = lbias, ubias
        return lo, hi

    def run(self, interval: Bounds) -> Bounds:
        g = self.graph
        needs_linear = {g.nodes[i].preds[0] for i in g.order if isinstance(g.nodes[i].op, ReLU)}
        needs_linear.add(g.sink)
        for i in g.order:
            node = g.nodes[i]
            if node.op.kind == "input":
                lo, hi = self.box.lower.copy(), self.box.upper.copy()
            elif isinstance(node.op, ReLU):
                p = node.preds[0]
                plo, phi = _apply_phases(i, self.lower[p], self.upper[p], self.fixed)
                lo, hi = node.op.interval((plo, phi))
            else:
                lo, hi = node.op.interval(*((self.lower[p], self.upper[p]) for p in node.preds))
            lo = np.maximum(lo, interval.lower[i])
            hi = np.minimum(hi, interval.upper[i])
            if i in needs_linear and node.op.kind not in ("input", "parameter"):
                blo, bhi = self.bound(i)
                lo = np.maximum(lo, blo)
                hi = np.minimum(hi, bhi)
            if np.any(lo > hi):
                # only possible through float noise or contradictory phases
                if np.any(lo - hi > 1e-9 * (1 + np.abs(hi))):
                    raise InfeasibleRegion(i)
                lo = np.minimum(lo, hi)
            self.lower[i], self.upper[i] = lo, hi
        return Bounds(self.lower, self.upper, g.sink)


def backward_linear_bounds(graph: Graph, box: Hyperrectangle, fixed: Phases | None = None) -> Bounds:
    """Linear-relaxation bounds, never looser than :func:`interval_bounds`.

    Non-ReLU nonlinear nodes are lowered to ReLU gadgets first; the returned
    bounds are keyed by the ids of ``graph`` itself.  ``fixed`` refers to
    ReLU units of the lowered graph.
    """
    graph.require_valid()
    _check_box(graph, box)
    lowered, ids = lower_with_map(graph)
    interval = interval_bounds(lowered, box, fixed)
    result = _Backward(lowered, box, fixed).run(interval)
    if lowered is graph:
        return result
    return Bounds(
        {i: result.lower[j] for i, j in ids.items()},
        {i: result.upper[j] for i, j in ids.items()},
        graph.sink,
    )


def compute_bounds(graph: Graph, box: Hyperrectangle, method: str = "backward_linear", fixed: Phases | None = None) -> Bounds:
    if method == "interval":
        return interval_bounds(graph, box, fixed)
    if method == "backward_linear":
        return backward_linear_bounds(graph, box, fixed)
    raise ValueError(f"unknown bound method {method!r}")
