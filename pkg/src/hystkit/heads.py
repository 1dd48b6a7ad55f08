"""Prediction heads: recurrent rollouts that turn feature windows into field estimates.

Rollout protocol shared by all archetypes: a window of L samples splits at
the warmup length w into a conditioning part (target values known) and an
open-loop part. Warmup consumes feature steps 1..w-1, prediction consumes
steps w..L-1; each prediction step emits one normalized target estimate.

Archetypes:

* ``gru-p``   — hidden element 0 is the normalized field estimate; warmup
  overwrites element 0 with the true value after every step (state
  injection), so the remaining elements adapt without accumulating error.
* ``gru-m``   — element 0 is a magnetization surrogate; the estimate is
  tanh(B~ - g0) and warmup injects the inverse, B~ - atanh(H~). A raw-unit
  variant (B/mu0 - g0*H_max) exists behind ``gru_m_physical`` but is
  numerically poor and off by default.
* ``gru-l``   — element 0 is a normalized inverse permeability; estimate
  g0 * B~, warmup injects H~/B~ (guarded against tiny B~).
* ``lstm-p``  — like gru-p; only the hidden state receives injections, the
  cell state evolves freely.
* ``gru-v``   — hidden state read as a (N+1)x(N+1) grid of 2-vectors whose
  first components sum to a magnetization estimate: H~ = B~ - sum. No
  state interpretation supports injection, so warmup runs without it from a
  zero state.
* ``gru-jadp`` — the first five hidden elements parameterize a
  Jiles-Atherton substep each sample; no injection, integration starts from
  the last known field sample.
* ``ja``      — the five-parameter Jiles-Atherton integrator alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, dtype_of, tanh, tsum
from .cells import (
    GruParams,
    LstmParams,
    gru_step,
    init_gru_params,
    init_lstm_params,
    lstm_step,
    param_count,
)
from .dataset import DEFAULT_TAU_S, MiniBatch, NormConstants
from .physics import (
    DEFAULT_ETA,
    MU0,
    ja_initial_state,
    ja_params_from_theta,
    ja_step_euler,
    gru_jadp_step,
)

ARCHETYPES = ("gru-p", "gru-m", "gru-l", "lstm-p", "gru-v", "gru-jadp", "ja")

#: Division guard for the inverse-permeability warmup.
EPS_B = 1e-6


class HeadError(ValueError):
    pass


class WarmupError(HeadError):
    """A warmup sample lies outside the head's invertible domain."""


@dataclass
class HeadConfig:
    archetype: str
    d_g: int
    d_x: int = 4
    warmup_length: int = 16
    eta: tuple = DEFAULT_ETA
    gru_m_physical: bool = False

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise HeadError(f"unknown archetype {self.archetype!r}")
        if self.warmup_length < 1:
            raise HeadError("warmup_length must be >= 1")
        if self.archetype == "gru-v":
            side = np.sqrt(self.d_g / 2.0)
            if side != int(side) or int(side) < 2:
                raise HeadError(f"gru-v needs d_g = 2*(N+1)^2 with N >= 1, got d_g={self.d_g}")
        if self.archetype == "gru-jadp" and self.d_g < 5:
            raise HeadError("gru-jadp needs d_g >= 5")

    @property
    def grid_side(self) -> int:
        return int(np.sqrt(self.d_g / 2.0))

    def count_params(self) -> int:
        return param_count(self.archetype, max(self.d_g, 1), self.d_x)


@dataclass
class RolloutInputs:
    """One batch of aligned windows, direction-agnostic.

    ``drive`` is the signal the model reads every step (normalized flux in
    the standard field-prediction direction) and ``target_warm`` holds the
    known normalized target values over the warmup part. The raw-unit
    context is only required by the JA-family heads.
    """

    x: np.ndarray               # (rows, L, d_x)
    drive_norm: np.ndarray      # (rows, L)
    target_warm_norm: np.ndarray  # (rows, w)
    warmup_length: int
    drive_raw: np.ndarray | None = None
    target_warm_raw: np.ndarray | None = None
    target_max: float | None = None
    tau_s: float = DEFAULT_TAU_S

    @property
    def rows(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]


@dataclass
class RolloutResult:
    """Open-loop predictions over one window plus the final hidden state."""

    pred_norm: np.ndarray
    pred: np.ndarray
    final_state: object


def inputs_from_batch(batch: MiniBatch, norm: NormConstants) -> RolloutInputs:
    w = batch.warmup_length
    return RolloutInputs(
        x=batch.x,
        drive_norm=batch.b_norm,
        target_warm_norm=batch.h_norm[:, :w],
        warmup_length=w,
        drive_raw=batch.b_raw,
        target_warm_raw=batch.h_raw[:, :w],
        target_max=norm.h_max,
        tau_s=batch.tau_s,
    )


def init_head_params(config: HeadConfig, seed, precision: str = "double") -> dict:
    """Named parameter arrays for one archetype, deterministically seeded."""
    dt = dtype_of(precision)
    rng = np.random.default_rng(seed)
    if config.archetype == "lstm-p":
        return {k: v for k, v in init_lstm_params(config.d_g, config.d_x, rng, dt).as_dict().items()}
    if config.archetype == "ja":
        return {"theta_ja": rng.normal(0.0, 0.5, size=5).astype(dt)}
    return {k: v for k, v in init_gru_params(config.d_g, config.d_x, rng, dt).as_dict().items()}


def wrap_params(arrays: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor(v, dtype=v.dtype, requires_grad=requires_grad) for k, v in arrays.items()}


def _gru_container(params: dict) -> GruParams:
    return GruParams(**{k: params[k] for k in GruParams.names()})


def _lstm_container(params: dict) -> LstmParams:
    return LstmParams(**{k: params[k] for k in LstmParams.names()})


def _inject_values(config: HeadConfig, inputs: RolloutInputs) -> np.ndarray:
    """Per-step warmup injection values for element 0 of the hidden state."""
    w = inputs.warmup_length
    target = np.asarray(inputs.target_warm_norm, dtype=np.float64)
    if config.archetype in ("gru-p", "lstm-p"):
        return target
    drive = np.asarray(inputs.drive_norm[:, :w], dtype=np.float64)
    if config.archetype == "gru-m":
        if config.gru_m_physical:
            _require_raw(inputs)
            return inputs.drive_raw[:, :w] / (MU0 * inputs.target_max) - target
        bad = np.abs(target) >= 1.0
        if np.any(bad):
            idx = int(np.argwhere(bad)[0][1])
            raise WarmupError(f"|H~| >= 1 at warmup step {idx}: magnetization inverse undefined")
        return drive - np.arctanh(target)
    if config.archetype == "gru-l":
        bad = np.abs(drive) <= EPS_B
        if np.any(bad):
            idx = int(np.argwhere(bad)[0][1])
            raise WarmupError(f"|B~| <= {EPS_B} at warmup step {idx}: permeability inverse undefined")
        return target / drive
    raise HeadError(f"{config.archetype} does not use state injection")


def _inject(state: Tensor, column: np.ndarray) -> Tensor:
    """Overwrite element 0 of every row, leaving elements 1.. untouched."""
    col = Tensor(column.astype(state.data.dtype))
    return concat([col, state[:, 1:]], axis=1)


def warmup_direct(config: HeadConfig, params: dict, inputs: RolloutInputs):
    """State-injection warmup; returns the conditioned state after step w-1.

    The initial state is the first injection value padded with zeros; after
    each recurrent step, element 0 is overwritten with the true value. With
    warmup length 1 no recurrent step executes.
    """
    dt = params[next(iter(params))].data.dtype
    w = inputs.warmup_length
    if w < 1 or inputs.target_warm_norm.shape[1] != w:
        raise WarmupError("empty or mismatched warmup window")
    inject = _inject_values(config, inputs)
    if not np.all(np.isfinite(inject)):
        raise WarmupError("non-finite warmup injection values")
    rows = inputs.rows
    zeros = Tensor(np.zeros((rows, config.d_g - 1), dtype=dt))
    g = concat([Tensor(inject[:, 0:1].astype(dt)), zeros], axis=1)
    c = None
    if config.archetype == "lstm-p":
        c = Tensor(np.zeros((rows, config.d_g), dtype=dt))
        p = _lstm_container(params)
        for t in range(1, w):
            x_t = Tensor(inputs.x[:, t, :].astype(dt))
            g, c = lstm_step(x_t, g, c, p)
            g = _inject(g, inject[:, t:t + 1])
        return g, c
    p = _gru_container(params)
    for t in range(1, w):
        x_t = Tensor(inputs.x[:, t, :].astype(dt))
        g = gru_step(x_t, g, p)
        g = _inject(g, inject[:, t:t + 1])
    return g, c


def _warmup_free(config: HeadConfig, params: dict, inputs: RolloutInputs, dt):
    """Warmup without injection (gru-v, gru-jadp): zero state, ordinary steps."""
    rows = inputs.rows
    g = Tensor(np.zeros((rows, config.d_g), dtype=dt))
    p = _gru_container(params)
    for t in range(1, inputs.warmup_length):
        g = gru_step(Tensor(inputs.x[:, t, :].astype(dt)), g, p)
    return g, p


def gru_v_readout(g: Tensor, drive_col) -> Tensor:
    """Grid readout: drive minus the summed first components of the grid's 2-vectors.

    The flat hidden state stores the (N+1)x(N+1) grid of 2-vectors
    contiguously, so the first components sit at even indices.
    """
    grid_sum = tsum(g[:, 0::2], axis=1, keepdims=True)
    return Tensor(np.asarray(drive_col, dtype=g.data.dtype)) - grid_sum


def rollout(config: HeadConfig, params: dict, inputs: RolloutInputs):
    """Full warmup + open-loop prediction for one batch of windows.

    ``params`` maps names to tape Tensors. Returns the normalized
    predictions as a tape Tensor of shape (rows, L - w) plus the final
    state (Tensor, (hidden, cell) pair, or JaState).
    """
    if inputs.x.shape[2] != config.d_x and config.archetype != "ja":
        raise HeadError(f"feature width {inputs.x.shape[2]} != d_x {config.d_x}")
    if config.archetype == "ja":
        return _rollout_ja(config, params, inputs)
    if config.archetype == "gru-jadp":
        return _rollout_jadp(config, params, inputs)
    dt = params[next(iter(params))].data.dtype
    w = inputs.warmup_length
    length = inputs.length
    preds = []
    if config.archetype == "gru-v":
        g, p = _warmup_free(config, params, inputs, dt)
        for t in range(w, length):
            g = gru_step(Tensor(inputs.x[:, t, :].astype(dt)), g, p)
            preds.append(gru_v_readout(g, inputs.drive_norm[:, t:t + 1]))
        return concat(preds, axis=1), g
    g, c = warmup_direct(config, params, inputs)
    if config.archetype == "lstm-p":
        p = _lstm_container(params)
        for t in range(w, length):
            g, c = lstm_step(Tensor(inputs.x[:, t, :].astype(dt)), g, c, p)
            preds.append(g[:, 0:1])
        return concat(preds, axis=1), (g, c)
    p = _gru_container(params)
    for t in range(w, length):
        g = gru_step(Tensor(inputs.x[:, t, :].astype(dt)), g, p)
        preds.append(_readout(config, g, inputs, t, dt))
    return concat(preds, axis=1), g


def _readout(config: HeadConfig, g: Tensor, inputs: RolloutInputs, t: int, dt):
    if config.archetype == "gru-p":
        return g[:, 0:1]
    if config.archetype == "gru-m":
        if config.gru_m_physical:
            scale = inputs.drive_raw[:, t:t + 1] / (MU0 * inputs.target_max)
            return Tensor(scale.astype(dt)) - g[:, 0:1]
        return tanh(Tensor(inputs.drive_norm[:, t:t + 1].astype(dt)) - g[:, 0:1])
    if config.archetype == "gru-l":
        return g[:, 0:1] * Tensor(inputs.drive_norm[:, t:t + 1].astype(dt))
    raise HeadError(f"no scalar readout for {config.archetype}")


def _require_raw(inputs: RolloutInputs):
    if inputs.drive_raw is None or inputs.target_warm_raw is None or inputs.target_max is None:
        raise HeadError("JA-family rollouts need raw-unit drive/target context")


def _rollout_ja(config: HeadConfig, params: dict, inputs: RolloutInputs):
    _require_raw(inputs)
    theta = params["theta_ja"]
    if theta.data.dtype != np.float64:
        raise HeadError("JA rollouts require double precision")
    from .autodiff import reshape
    phys = ja_params_from_theta(reshape(theta, (1, 5)), config.eta)
    w = inputs.warmup_length
    state = ja_initial_state(inputs.target_warm_raw[:, w - 1:w], inputs.drive_raw[:, w - 1:w])
    preds = []
    inv_max = 1.0 / inputs.target_max
    for t in range(w, inputs.length):
        state = ja_step_euler(state, inputs.drive_raw[:, t - 1:t], inputs.drive_raw[:, t:t + 1],
                              inputs.tau_s, phys)
        preds.append(state.h * inv_max)
    return concat(preds, axis=1), state


def _rollout_jadp(config: HeadConfig, params: dict, inputs: RolloutInputs):
    _require_raw(inputs)
    dt = params[next(iter(params))].data.dtype
    if dt != np.float64:
        raise HeadError("gru-jadp rollouts require double precision")
    w = inputs.warmup_length
    g, p = _warmup_free(config, params, inputs, dt)
    state = ja_initial_state(inputs.target_warm_raw[:, w - 1:w], inputs.drive_raw[:, w - 1:w])
    preds = []
    inv_max = 1.0 / inputs.target_max
    for t in range(w, inputs.length):
        state, g = gru_jadp_step(Tensor(inputs.x[:, t, :].astype(dt)), g, p, config.eta,
                                 state, inputs.drive_raw[:, t - 1:t], inputs.drive_raw[:, t:t + 1],
                                 inputs.tau_s)
        preds.append(state.h * inv_max)
    return concat(preds, axis=1), (state, g)


def predict_window(config: HeadConfig, params_arrays: dict, seq, task, norm: NormConstants,
                   precision: str = "double") -> RolloutResult:
    """Open-loop prediction for one task window of one sequence."""
    from .dataset import featurize

    fm = featurize(seq, task, norm)
    w = task.warmup_length
    sl = slice(task.k0, task.k2 + 1)
    inputs = RolloutInputs(
        x=fm.values.T[None, :, :],
        drive_norm=(seq.b[sl] / norm.b_max)[None, :],
        target_warm_norm=(seq.h[task.k0:task.k1] / norm.h_max)[None, :],
        warmup_length=w,
        drive_raw=seq.b[sl][None, :],
        target_warm_raw=seq.h[task.k0:task.k1][None, :],
        target_max=norm.h_max,
        tau_s=seq.tau_s,
    )
    params = wrap_params({k: np.asarray(v, dtype=dtype_of(precision)) for k, v in params_arrays.items()},
                         requires_grad=False)
    pred_t, final_state = rollout(config, params, inputs)
    pred_norm = pred_t.data[0].astype(np.float64)
    return RolloutResult(pred_norm=pred_norm, pred=pred_norm * norm.h_max, final_state=final_state)
