"""Small reference networks used by tests, scripts and the CLI examples."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .graph import Graph, GraphBuilder


def mlp(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> Graph:
    """Affine layers with ReLU between them (none after the last)."""
    if len(weights) != len(biases) or not weights:
        raise ValueError("need one bias per weight matrix and at least one layer")
    b = GraphBuilder()
    x = b.input(np.asarray(weights[0]).shape[1])
    for k, (w, c) in enumerate(zip(weights, biases)):
        x = b.affine(x, w, c)
        if k < len(weights) - 1:
            x = b.relu(x)
    return b.build(x)


def random_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> Graph:
    """ReLU network with layer sizes ``sizes`` and standard-normal parameters."""
    weights = [scale * rng.standard_normal((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [scale * rng.standard_normal(o) for o in sizes[1:]]
    return mlp(weights, biases)


def linear(weight, bias=None) -> Graph:
    w = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    return mlp([w], [np.zeros(w.shape[0]) if bias is None else np.atleast_1d(bias)])


def identity(dim: int = 1) -> Graph:
    return linear(np.eye(dim))


def constant(value, input_dim: int = 1) -> Graph:
    value = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return linear(np.zeros((value.size, input_dim)), value)


def residual_block(w1, b1, w2, b2) -> Graph:
    """``relu(x + W2 relu(W1 x + b1) + b2)``: an affine stand-in for a residual unit."""
    b = GraphBuilder()
    x = b.input(np.asarray(w1).shape[1])
    h = b.relu(b.affine(x, w1, b1))
    return b.build(b.relu(b.add(x, b.affine(h, w2, b2))))
