"""GRU and LSTM cell primitives with exact parameter accounting.

Both cells operate on batched rows: inputs are ``(batch, d_x)``, hidden
states ``(batch, d_g)``. Weight matrices follow the ``(d_g, d_x)`` /
``(d_g, d_g)`` layout, so a step computes ``x @ W.T`` internally.

The GRU update uses the convex-combination form
``g_k = g~_k + z_k * (g_{k-1} - g~_k)`` and keeps the candidate branch's
second bias ``b_n`` inside the reset product: ``r_k * (U g_{k-1} + b_n)``.
Folding ``b_n`` into ``b`` changes the function; do not.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, sigmoid, tanh

GRU_ARCHETYPES = ("gru-p", "gru-m", "gru-l", "gru-v", "gru-jadp")
LSTM_ARCHETYPES = ("lstm-p",)


@dataclass
class GruParams:
    """The ten parameter arrays of one GRU cell (update, reset, candidate)."""

    w_z: object
    u_z: object
    b_z: object
    w_r: object
    u_r: object
    b_r: object
    w: object
    u: object
    b: object
    b_n: object

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.as_dict().items()})


@dataclass
class LstmParams:
    """The twelve parameter arrays of one LSTM cell (input, forget, squash, output)."""

    w_i: object
    u_i: object
    b_i: object
    w_f: object
    u_f: object
    b_f: object
    w_m: object
    u_m: object
    b_m: object
    w_o: object
    u_o: object
    b_o: object

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.as_dict().items()})


def gru_step(x: Tensor, g_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step: gates from (x, g_prev), then the convex update."""
    z = sigmoid(matmul(x, p.w_z, transpose_b=True) + p.b_z + matmul(g_prev, p.u_z, transpose_b=True))
    r = sigmoid(matmul(x, p.w_r, transpose_b=True) + p.b_r + matmul(g_prev, p.u_r, transpose_b=True))
    g_cand = tanh(matmul(x, p.w, transpose_b=True) + p.b
                  + r * (matmul(g_prev, p.u, transpose_b=True) + p.b_n))
    return g_cand + z * (g_prev - g_cand)


def lstm_step(x: Tensor, g_prev: Tensor, c_prev: Tensor, p: LstmParams):
    """One LSTM step; returns (hidden, cell)."""
    if c_prev is None:
        raise ShapeError("lstm_step requires a cell state")
    i = sigmoid(matmul(x, p.w_i, transpose_b=True) + p.b_i + matmul(g_prev, p.u_i, transpose_b=True))
    f = sigmoid(matmul(x, p.w_f, transpose_b=True) + p.b_f + matmul(g_prev, p.u_f, transpose_b=True))
    m = tanh(matmul(x, p.w_m, transpose_b=True) + p.b_m + matmul(g_prev, p.u_m, transpose_b=True))
    o = sigmoid(matmul(x, p.w_o, transpose_b=True) + p.b_o + matmul(g_prev, p.u_o, transpose_b=True))
    c = f * c_prev + i * m
    g = o * tanh(c)
    return g, c


def param_count(archetype: str, d_g: int, d_x: int) -> int:
    """Exact trainable-parameter count for one cell of the given archetype.

    GRU family: 3*d_g*d_x + 3*d_g^2 + 4*d_g (three W, three U, three b plus b_n).
    LSTM: 4*(d_g*d_x + d_g^2 + d_g).
    ``ja`` has five scalar parameters and ignores the dimensions. Counts are
    formula-exact; tallies from frameworks with other bias layouts can differ.
    """
    if d_g < 1 or d_x < 1:
        raise ValueError("d_g and d_x must be >= 1")
    key = archetype.lower()
    if key in GRU_ARCHETYPES or key == "gru":
        return 3 * d_g * d_x + 3 * d_g * d_g + 4 * d_g
    if key in LSTM_ARCHETYPES or key == "lstm":
        return 4 * (d_g * d_x + d_g * d_g + d_g)
    if key == "ja":
        return 5
    raise ValueError(f"unknown archetype {archetype!r}")


def init_gru_params(d_g: int, d_x: int, rng: np.random.Generator, dtype=np.float64) -> GruParams:
    """Uniform +-sqrt(1/d_g) for U-family, +-sqrt(1/d_x) for W-family, zero biases."""
    su, sw = np.sqrt(1.0 / d_g), np.sqrt(1.0 / d_x)

    def un(scale, shape):
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    zeros = lambda: np.zeros(d_g, dtype=dtype)
    return GruParams(
        w_z=un(sw, (d_g, d_x)), u_z=un(su, (d_g, d_g)), b_z=zeros(),
        w_r=un(sw, (d_g, d_x)), u_r=un(su, (d_g, d_g)), b_r=zeros(),
        w=un(sw, (d_g, d_x)), u=un(su, (d_g, d_g)), b=zeros(), b_n=zeros(),
    )


def init_lstm_params(d_g: int, d_x: int, rng: np.random.Generator, dtype=np.float64) -> LstmParams:
    su, sw = np.sqrt(1.0 / d_g), np.sqrt(1.0 / d_x)

    def un(scale, shape):
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    zeros = lambda: np.zeros(d_g, dtype=dtype)
    return LstmParams(
        w_i=un(sw, (d_g, d_x)), u_i=un(su, (d_g, d_g)), b_i=zeros(),
        w_f=un(sw, (d_g, d_x)), u_f=un(su, (d_g, d_g)), b_f=zeros(),
        w_m=un(sw, (d_g, d_x)), u_m=un(su, (d_g, d_g)), b_m=zeros(),
        w_o=un(sw, (d_g, d_x)), u_o=un(su, (d_g, d_g)), b_o=zeros(),
    )
