"""Training loop, Adam optimizer, checkpoint I/O, and model-size sweeps.

A run is fully determined by (seed, config, data, precision): parameter
initialization, per-epoch batch regeneration, and the update sequence all
draw from seeded generators, and every numpy kernel involved is
deterministic on CPU. Two runs with identical inputs produce bit-identical
checkpoints.

Checkpoints are a versioned JSON header (metadata + named parameter layout)
next to a little-endian binary blob of the flattened parameters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor, dtype_of, reshape
from .dataset import MiniBatch, NormConstants, PredictionTask, compute_norm_constants, make_minibatches
from .heads import HeadConfig, init_head_params, inputs_from_batch, predict_window, rollout, wrap_params
from .metrics import MetricReport, batch_mean, mae, mse, sre, nere, wce, weighted_loss_rows
from .physics import DEFAULT_ETA, ja_params_from_theta, pinn_ja_residual

CHECKPOINT_FORMAT_VERSION = 1

JA_FAMILY = ("ja", "gru-jadp")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    archetype: str = "gru-p"
    d_g: int = 8
    d_x: int = 4
    subseq_len: int = 256
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0
    precision: str | None = None  # resolved by archetype when unset
    lambda_w: float = 0.0
    warmup_length: int = 16
    patience: int = 20
    eval_every: int = 1
    eta: tuple = DEFAULT_ETA
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_w < 0:
            raise ConfigError("lambda_w must be >= 0")
        for name in ("d_g", "subseq_len", "batch_size", "epochs", "warmup_length", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr < 0 or self.clip_norm <= 0:
            raise ConfigError("lr must be >= 0 and clip_norm > 0")
        if self.precision is None:
            self.precision = "double" if self._uses_ja() else "single"
        dtype_of(self.precision)
        if self._uses_ja() and self.precision != "double":
            raise ConfigError(f"{self.archetype!r}/lambda_w>0 requires double precision")

    def _uses_ja(self) -> bool:
        return self.archetype in JA_FAMILY or self.lambda_w > 0

    def head_config(self) -> HeadConfig:
        return HeadConfig(archetype=self.archetype, d_g=self.d_g, d_x=self.d_x,
                          warmup_length=self.warmup_length, eta=self.eta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = list(self.eta)
        d["betas"] = list(self.betas)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def config_param_count(config: TrainConfig) -> int:
    n = config.head_config().count_params()
    if config.lambda_w > 0 and config.archetype != "ja":
        n += 5  # co-trained JA parameters of the physics regularizer
    return n


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients by max_norm/|g| when the global L2 norm exceeds it."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, total


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float,
                   clip_norm: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Adam with bias correction; global-norm clipping runs before the update."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    grads, _ = clip_global_norm(grads, clip_norm)
    b1, b2 = betas
    state.t += 1
    t = state.t
    new_params = {}
    for k in sorted(params):
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(params[k])
            v = np.zeros_like(params[k])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[k] = (params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params[k].dtype)
    return new_params, state


# -- loss assembly -----------------------------------------------------------

def batch_loss(config: TrainConfig, params_t: dict, batch: MiniBatch, norm: NormConstants) -> Tensor:
    """Mini-batch objective: flux-weighted RMSE rows (+ physics penalty), meaned."""
    head_cfg = config.head_config()
    inputs = inputs_from_batch(batch, norm)
    pred, _ = rollout(head_cfg, params_t, inputs)
    w = batch.warmup_length
    rows = weighted_loss_rows(batch.h_norm[:, w:], pred, batch.b_norm[:, w - 1:],
                              norm.h_max, batch.h_rms)
    if config.lambda_w > 0:
        phys = ja_params_from_theta(reshape(params_t["theta_ja"], (1, 5)), config.eta)
        anchor = Tensor(batch.h_raw[:, w - 1:w].astype(pred.data.dtype))
        h_traj = _concat_traj(anchor, pred * norm.h_max)
        _, l_ja_rows = pinn_ja_residual(h_traj, batch.b_raw[:, w - 1:], phys, batch.tau_s)
        rows = rows + config.lambda_w * l_ja_rows
    return batch_mean(rows)


def _concat_traj(anchor: Tensor, pred_raw: Tensor) -> Tensor:
    from .autodiff import concat
    return concat([anchor, pred_raw], axis=1)


def init_params(config: TrainConfig) -> dict:
    arrays = init_head_params(config.head_config(), [config.seed, 0], config.precision)
    if config.lambda_w > 0 and config.archetype != "ja":
        rng = np.random.default_rng([config.seed, 5])
        arrays["theta_ja"] = rng.normal(0.0, 0.5, size=5).astype(dtype_of(config.precision))
    return arrays


# -- evaluation ----------------------------------------------------------------

def full_sequence_task(seq, warmup_length: int) -> PredictionTask:
    return PredictionTask(k0=0, k1=warmup_length, k2=seq.k3, k3=seq.k3)


def evaluate_sequences(config: HeadConfig, params: dict, sequences, norm: NormConstants,
                       precision: str = "double") -> MetricReport:
    """Open-loop metrics per sequence (full-window task) plus aggregates."""
    report = MetricReport()
    for i, seq in enumerate(sequences):
        task = full_sequence_task(seq, config.warmup_length)
        result = predict_window(config, params, seq, task, norm, precision)
        h_true = seq.h[task.k1:task.k2 + 1]
        b_prev = seq.b[task.k1 - 1:task.k2 + 1]
        report.add(
            i,
            sre=sre(result.pred, h_true),
            nere=nere(result.pred, h_true, b_prev, seq.h, seq.b),
            mse=mse(result.pred_norm, h_true / norm.h_max),
            mae=mae(result.pred_norm, h_true / norm.h_max),
            wce=wce(result.pred_norm, h_true / norm.h_max),
        )
    return report


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    norm: NormConstants
    config: TrainConfig
    train_losses: list
    eval_sre: list
    best_epoch: int

    def checkpoint(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            archetype=self.config.archetype,
            params={k: v.copy() for k, v in self.params.items()},
            norm=self.norm,
            train_config=self.config.to_dict(),
            seed=self.config.seed,
        )


def train(config: TrainConfig, train_seqs, eval_seqs=None, norm: NormConstants | None = None) -> TrainResult:
    """Epoch loop: regenerate batches, roll out, backprop, Adam-update.

    Keeps the parameters with the best evaluation SRE (when an eval set is
    given) and stops early after ``patience`` evaluations without
    improvement.
    """
    train_seqs = list(train_seqs)
    if not train_seqs:
        raise ConfigError("empty training set")
    norm = norm or compute_norm_constants(train_seqs)
    params = init_params(config)
    adam = AdamState()
    head_cfg = config.head_config()

    train_losses: list[float] = []
    eval_curve: list[float] = []
    best = {k: v.copy() for k, v in params.items()}
    best_sre = np.inf
    best_epoch = 0
    stale = 0

    for epoch in range(config.epochs):
        batches = make_minibatches(train_seqs, config.subseq_len, config.batch_size,
                                   [config.seed, 1, epoch], config.warmup_length, norm)
        if not batches:
            raise TrainingError(f"no full batches: {len(train_seqs)} sequences, "
                                f"l={config.subseq_len}, b={config.batch_size}")
        epoch_losses = []
        for bi, batch in enumerate(batches):
            params_t = wrap_params(params)
            loss = batch_loss(config, params_t, batch, norm)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in params_t.items()}
            params, adam = optimizer_step(params, grads, adam, config.lr, config.clip_norm,
                                          config.betas, config.adam_eps)
            epoch_losses.append(value)
        train_losses.append(float(np.mean(epoch_losses)))

        if eval_seqs and (epoch + 1) % config.eval_every == 0:
            report = evaluate_sequences(head_cfg, params, eval_seqs, norm, config.precision)
            current = report.aggregate()["avg_sre"]
            eval_curve.append(current)
            if current < best_sre:
                best_sre = current
                best = {k: v.copy() for k, v in params.items()}
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if eval_seqs:
        final_params = best
    else:
        final_params = params
        best_epoch = config.epochs - 1
    return TrainResult(params=final_params, norm=norm, config=config,
                       train_losses=train_losses, eval_sre=eval_curve, best_epoch=best_epoch)


# -- checkpoint I/O ------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    archetype: str
    params: dict
    norm: NormConstants
    train_config: dict
    seed: int
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def head_config(self) -> HeadConfig:
        tc = self.train_config
        return HeadConfig(archetype=self.archetype, d_g=int(tc["d_g"]), d_x=int(tc["d_x"]),
                          warmup_length=int(tc["warmup_length"]), eta=tuple(tc["eta"]))

    def count_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def precision(self) -> str:
        return self.train_config["precision"]


def save_checkpoint(path: Path, ckpt: ModelCheckpoint) -> tuple[Path, Path]:
    """Write ``<path>.json`` + ``<path>.bin``; returns both paths."""
    path = Path(path)
    json_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    wire = "<f8" if ckpt.precision == "double" else "<f4"
    layout = []
    blob = bytearray()
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        layout.append({"name": name, "shape": list(arr.shape), "dtype": wire, "offset": len(blob)})
        blob.extend(arr.astype(wire).tobytes())
    header = {
        "format_version": ckpt.format_version,
        "archetype": ckpt.archetype,
        "seed": ckpt.seed,
        "norm": ckpt.norm.as_dict(),
        "train_config": ckpt.train_config,
        "config_hash": hashlib.sha256(
            json.dumps(ckpt.train_config, sort_keys=True).encode()).hexdigest()[:16],
        "param_count": ckpt.count_params(),
        "layout": layout,
        "blob": bin_path.name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(bytes(blob))
    return json_path, bin_path


def load_checkpoint(json_path: Path) -> ModelCheckpoint:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {header['format_version']}")
    blob = (json_path.parent / header["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ConfigError("checkpoint blob hash mismatch")
    params = {}
    for entry in header["layout"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        flat = np.frombuffer(blob, dtype=dt, count=count, offset=entry["offset"])
        native = "double" if dt.itemsize == 8 else "single"
        params[entry["name"]] = flat.reshape(entry["shape"]).astype(dtype_of(native))
    return ModelCheckpoint(
        archetype=header["archetype"],
        params=params,
        norm=NormConstants.from_dict(header["norm"]),
        train_config=header["train_config"],
        seed=header["seed"],
        format_version=header["format_version"],
    )


# -- Preisach trainer ------------------------------------------------------------

def train_preisach(preisach, train_seqs, norm: NormConstants, subseq_len: int = 256,
                   batch_size: int = 16, epochs: int = 60, lr: float = 3e-3,
                   seed: int = 0, warmup_length: int = 16, clip_norm: float = 1.0):
    """Fit the hysteron density and output map in the flux-from-field direction.

    Uses the same flux-weighted objective as the recurrent heads with the
    signal roles transposed: weights follow the drive (H) increments and the
    normalization uses B_max over the full-sequence RMS of B. The first
    ``warmup_length`` samples of each window are excluded from the loss so
    the hysteron states settle, mirroring the recurrent warmup.
    """
    from .dataset import reversed_minibatches
    from .physics import preisach_predict

    params = {"mu": preisach.mu.astype(np.float64), "omega": preisach.omega.astype(np.float64)}
    adam = AdamState()
    losses = []
    for epoch in range(epochs):
        batches = reversed_minibatches(train_seqs, subseq_len, batch_size,
                                       [seed, 1, epoch], warmup_length, norm)
        epoch_losses = []
        for bi, batch in enumerate(batches):
            mu_t = Tensor(params["mu"], requires_grad=True)
            omega_t = Tensor(params["omega"], requires_grad=True)
            pred = preisach_predict(batch.b_norm, preisach, mu_t, omega_t)
            w = batch.warmup_length
            rows = weighted_loss_rows(batch.h_norm[:, w:], pred[:, w:], batch.b_norm[:, w - 1:],
                                      norm.b_max, batch.h_rms)
            loss = batch_mean(rows)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            grads = {"mu": mu_t.grad, "omega": omega_t.grad}
            params, adam = optimizer_step(params, grads, adam, lr, clip_norm)
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
    preisach.mu = params["mu"]
    preisach.omega = params["omega"]
    return preisach, losses


# -- Pareto sweep ---------------------------------------------------------------

SWEEP_COLUMNS = ("archetype", "d_g", "params", "seed", "sre", "nere", "status")


def _run_trial(args):
    config, train_seqs, eval_seqs, score_seqs = args
    try:
        result = train(config, train_seqs, eval_seqs)
        report = evaluate_sequences(config.head_config(), result.params, score_seqs,
                                    result.norm, config.precision)
        agg = report.aggregate()
        return {"archetype": config.archetype, "d_g": config.d_g,
                "params": config_param_count(config), "seed": config.seed,
                "sre": agg["avg_sre"], "nere": agg["avg_nere"], "status": "ok"}
    except Exception as exc:  # failures are recorded, never dropped
        from .cells import param_count
        try:
            n_params = param_count(config.archetype, config.d_g, config.d_x)
        except ValueError:
            n_params = 0
        return {"archetype": config.archetype, "d_g": config.d_g,
                "params": n_params, "seed": config.seed,
                "sre": float("nan"), "nere": float("nan"),
                "status": f"failed:{type(exc).__name__}"}


def pareto_sweep(archetypes, d_g_values, seeds, train_seqs, eval_seqs, score_seqs=None,
                 base_config: TrainConfig | None = None, workers: int = 1):
    """Trial grid over (archetype, d_g, seed); returns (rows, medians).

    ``score_seqs`` defaults to the eval set. Medians aggregate successful
    trials per (archetype, d_g); rows are ordered by that key so merged
    concurrent results stay deterministic.
    """
    base = base_config or TrainConfig()
    score_seqs = score_seqs if score_seqs is not None else eval_seqs
    jobs = []
    for archetype in archetypes:
        for d_g in d_g_values:
            for seed in seeds:
                cfg = dict(base.to_dict())
                cfg.update({"archetype": archetype, "d_g": d_g, "seed": seed,
                            "precision": None})
                cfg["eta"] = tuple(cfg["eta"])
                cfg["betas"] = tuple(cfg["betas"])
                jobs.append((TrainConfig(**cfg), train_seqs, eval_seqs, score_seqs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_trial, jobs))
    else:
        rows = [_run_trial(j) for j in jobs]
    rows.sort(key=lambda r: (r["archetype"], r["d_g"], r["seed"]))
    medians = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        medians.setdefault((row["archetype"], row["d_g"]), []).append(row)
    medians = {
        key: {"params": trials[0]["params"],
              "median_sre": float(np.median([t["sre"] for t in trials])),
              "median_nere": float(np.median([t["nere"] for t in trials]))}
        for key, trials in medians.items()
    }
    return rows, medians


def write_sweep_csv(path: Path, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([r["archetype"], r["d_g"], r["params"], r["seed"],
                             f"{r['sre']:.9g}", f"{r['nere']:.9g}", r["status"]])
