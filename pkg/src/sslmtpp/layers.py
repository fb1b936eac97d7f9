"""Parameterized building blocks: dense, embedding, dropout and recurrent cells."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = {
    None: None,
    "none": None,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softmax": ad.softmax,
}


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map ``x @ W + b`` followed by an optional activation."""

    def __init__(self, in_dim: int, out_dim: int, activation: str | None = None,
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = Tensor(_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(_uniform(rng, (out_dim,), in_dim), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense: expected last dim {self.in_dim}, got shape {x.shape}")
        y = ad.add(ad.matmul(x, self.weight), self.bias)
        fn = ACTIVATIONS[self.activation]
        return fn(y) if fn is not None else y


class Embedding:
    """Lookup table mapping class ids in ``[0, num_classes)`` to learned vectors."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator | None = None,
                 name: str = "embedding"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = num_classes
        self.dim = dim
        self.weight = Tensor(_uniform(rng, (num_classes, dim), 1), requires_grad=True, name=f"{name}.weight")

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_classes):
            raise IndexError(f"embedding: index out of range [0, {self.num_classes})")
        return ad.take(self.weight, idx)


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None


class RecurrentCell:
    """A plain (Elman, tanh) or gated LSTM cell.

    Gate pre-activations are ``(x @ w_x + b) + h @ w_h``; LSTM gate blocks are
    laid out as ``[input, forget, output, candidate]``.
    """

    KINDS = {"plain": 1, "lstm": 4}

    def __init__(self, kind: str, input_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, name: str = "cell"):
        if kind not in self.KINDS:
            raise ValueError(f"unknown cell kind {kind!r}; expected one of {sorted(self.KINDS)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        width = self.KINDS[kind] * hidden_dim
        fan_in = input_dim + hidden_dim
        self.w_x = Tensor(_uniform(rng, (input_dim, width), fan_in), requires_grad=True, name=f"{name}.w_x")
        self.w_h = Tensor(_uniform(rng, (hidden_dim, width), fan_in), requires_grad=True, name=f"{name}.w_h")
        bias = _uniform(rng, (width,), fan_in)
        if kind == "lstm":
            bias[hidden_dim:2 * hidden_dim] = 1.0
        self.b = Tensor(bias, requires_grad=True, name=f"{name}.b")

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_state(self, batch: int) -> RecurrentState:
        zeros = np.zeros((batch, self.hidden_dim))
        return RecurrentState(Tensor(zeros), Tensor(zeros) if self.kind == "lstm" else None)


def cell_step(cell: RecurrentCell, x: Tensor, state: RecurrentState) -> tuple[Tensor, RecurrentState]:
    """One recurrence update; returns ``(output, new_state)`` with output = new hidden state."""
    if x.ndim != 2 or x.shape[1] != cell.input_dim:
        raise ShapeError(f"cell_step: expected input [batch x {cell.input_dim}], got {x.shape}")
    if state.h.shape != (x.shape[0], cell.hidden_dim):
        raise ShapeError(f"cell_step: expected state [{x.shape[0]} x {cell.hidden_dim}], got {state.h.shape}")
    z = ad.add(ad.add(ad.matmul(x, cell.w_x), cell.b), ad.matmul(state.h, cell.w_h))
    if cell.kind == "plain":
        h = ad.tanh(z)
        return h, RecurrentState(h)
    H = cell.hidden_dim
    gates = ad.sigmoid(ad.slice(z, (np.s_[:], np.s_[: 3 * H])))
    i = ad.slice(gates, (np.s_[:], np.s_[:H]))
    f = ad.slice(gates, (np.s_[:], np.s_[H: 2 * H]))
    o = ad.slice(gates, (np.s_[:], np.s_[2 * H:]))
    g = ad.tanh(ad.slice(z, (np.s_[:], np.s_[3 * H:])))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, RecurrentState(h, c)


def check_chain(cells: Sequence[RecurrentCell], input_dim: int) -> None:
    expected = input_dim
    for k, cell in enumerate(cells):
        if cell.input_dim != expected:
            raise ShapeError(f"stack_unroll: layer {k} expects input dim {cell.input_dim}, receives {expected}")
        expected = cell.hidden_dim


def unroll_steps(cells: Sequence[RecurrentCell], steps: Sequence[Tensor],
                 initial: Sequence[RecurrentState] | None = None
                 ) -> tuple[list[list[Tensor]], list[RecurrentState]]:
    """Unroll a stack over per-step inputs ``[batch x dim]``.

    Returns per-layer lists of per-step outputs and the final state per layer.
    """
    if not steps:
        raise ShapeError("stack_unroll: empty sequence")
    check_chain(cells, steps[0].shape[1])
    batch = steps[0].shape[0]
    layer_outputs: list[list[Tensor]] = []
    finals: list[RecurrentState] = []
    current = list(steps)
    for k, cell in enumerate(cells):
        state = initial[k] if initial is not None else cell.zero_state(batch)
        outs = []
        for x in current:
            h, state = cell_step(cell, x, state)
            outs.append(h)
        layer_outputs.append(outs)
        finals.append(state)
        current = outs
    return layer_outputs, finals


def split_time(sequence: Tensor) -> list[Tensor]:
    """``[batch x T x dim]`` -> T tensors of ``[batch x dim]``."""
    return [ad.slice(sequence, (np.s_[:], t)) for t in range(sequence.shape[1])]


def stack_unroll(cells: Sequence[RecurrentCell], sequence: Tensor) -> Tensor:
    """Run stacked cells over ``[batch x T x input_dim]`` from zero states."""
    if sequence.ndim != 3:
        raise ShapeError(f"stack_unroll: expected [batch x T x dim], got {sequence.shape}")
    if sequence.shape[1] == 0:
        raise ShapeError("stack_unroll: empty sequence")
    layers, _ = unroll_steps(cells, split_time(sequence))
    return ad.stack(layers[-1], axis=1)


def dropout_apply(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return ad.mul(x, keep / (1.0 - rate))
