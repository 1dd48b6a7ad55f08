"""Measurement ingestion, normalization, featurization, batching, and splits.

A measurement couples a magnetic-flux-density trajectory B (tesla) with the
magnetic-field trajectory H (ampere/meter) at a fixed core temperature and
sampling period. Signals are normalized per material by their training-set
maximum absolute value. Model inputs are four feature rows per time step:
normalized B, its first and second backward differences (unit time step),
and the constant normalized temperature.

On-disk layout (one directory per material):

* ``manifest.json`` — ``{"material": ..., "sequences": [...], "count": n}``
* ``seq_XXXXX.csv`` — header ``k,B_T,H_Am``, one row per sample
* ``seq_XXXXX.json`` — ``{"material", "temperature_C", "f_sw_Hz", "tau_s"}``
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TAU_S = 62.5e-9  # 1/16 MHz sampling


class DataError(ValueError):
    """Malformed measurement data or an invalid data request."""


@dataclass
class MeasuredSequence:
    """One raw measurement sequence.

    ``f_sw_hz`` is optional acquisition metadata used only for stratified
    splitting; it is never fed to a model.
    """

    b: np.ndarray
    h: np.ndarray
    temperature_c: float
    tau_s: float = DEFAULT_TAU_S
    material_id: str = ""
    f_sw_hz: float | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.b.ndim != 1 or self.h.ndim != 1 or len(self.b) != len(self.h):
            raise DataError("B and H must be 1-D arrays of equal length")
        if len(self.b) < 2:
            raise DataError("sequence needs at least 2 samples")
        if not self.tau_s > 0:
            raise DataError("sampling period must be positive")

    def __len__(self):
        return len(self.b)

    @property
    def k3(self) -> int:
        return len(self.b) - 1

    def h_rms(self) -> float:
        """RMS of H over the full sequence 0..k3."""
        return float(np.sqrt(np.mean(self.h ** 2)))


@dataclass
class NormConstants:
    """Per-material max-abs normalizers; z~ = z / z_max maps training data into [-1, 1]."""

    h_max: float
    b_max: float
    theta_max: float

    def __post_init__(self):
        for name in ("h_max", "b_max", "theta_max"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive (all-zero signal?)")

    def as_dict(self):
        return {"h_max": self.h_max, "b_max": self.b_max, "theta_max": self.theta_max}

    @classmethod
    def from_dict(cls, d):
        return cls(h_max=d["h_max"], b_max=d["b_max"], theta_max=d["theta_max"])


@dataclass
class PredictionTask:
    """Index quadruple delimiting the warmup window [k0, k1) and prediction window [k1, k2]."""

    k0: int
    k1: int
    k2: int
    k3: int

    def __post_init__(self):
        if not (0 <= self.k0 < self.k1 < self.k2 <= self.k3):
            raise DataError(f"task indices must satisfy 0 <= k0 < k1 < k2 <= k3, got {self}")

    @property
    def warmup_length(self) -> int:
        return self.k1 - self.k0

    def validate_for(self, seq: MeasuredSequence):
        if self.k3 >= len(seq):
            raise DataError(f"k3={self.k3} out of range for sequence of length {len(seq)}")


@dataclass
class FeatureMatrix:
    """4 x L model-input rows: (B~, dB~, d2B~, theta~) over window samples k0..k2."""

    values: np.ndarray  # (4, L)

    @property
    def b_norm(self):
        return self.values[0]

    @property
    def db_norm(self):
        return self.values[1]

    @property
    def d2b_norm(self):
        return self.values[2]

    @property
    def theta_norm(self):
        return self.values[3]


@dataclass
class MiniBatch:
    """One training batch of aligned subsequences.

    All blocks are ``(b, l)``; ``x`` is ``(b, l, 4)``. ``h_rms`` is the RMS
    of raw H over each row's *full* source sequence, and ``tasks`` holds the
    local (k0, k1, k2) indices (identical across rows).
    """

    x: np.ndarray
    b_norm: np.ndarray
    b_raw: np.ndarray
    h_norm: np.ndarray
    h_raw: np.ndarray
    theta_norm: np.ndarray  # (b,)
    h_rms: np.ndarray  # (b,)
    tasks: np.ndarray  # (b, 3) int
    sources: np.ndarray  # (b, 2) int: (sequence index, window offset)
    warmup_length: int
    tau_s: float

    @property
    def rows(self) -> int:
        return self.b_norm.shape[0]

    @property
    def length(self) -> int:
        return self.b_norm.shape[1]


def compute_norm_constants(sequences) -> NormConstants:
    """Max absolute value of each raw signal over the given (training) sequences."""
    sequences = list(sequences)
    if not sequences:
        raise DataError("need at least one sequence to compute normalization")
    h_max = max(float(np.max(np.abs(s.h))) for s in sequences)
    b_max = max(float(np.max(np.abs(s.b))) for s in sequences)
    theta_max = max(abs(float(s.temperature_c)) for s in sequences)
    return NormConstants(h_max=h_max, b_max=b_max, theta_max=theta_max)


def feature_rows(b_norm: np.ndarray, theta_norm) -> np.ndarray:
    """Feature block for row-wise windows of normalized B.

    ``b_norm`` is ``(rows, L)``; returns ``(rows, L, 4)``. Differences use a
    unit time step (no division by the physical sampling period). The first
    column of each difference row replicates the first interior value, so a
    window start never injects a spurious jump.
    """
    b_norm = np.atleast_2d(np.asarray(b_norm, dtype=np.float64))
    rows, length = b_norm.shape
    if length < 3:
        raise DataError(f"feature window needs >= 3 samples, got {length}")
    d1 = np.empty_like(b_norm)
    d1[:, 1:] = b_norm[:, 1:] - b_norm[:, :-1]
    d1[:, 0] = d1[:, 1]
    d2 = np.empty_like(b_norm)
    d2[:, 1:] = d1[:, 1:] - d1[:, :-1]
    d2[:, 0] = d2[:, 1]
    theta = np.broadcast_to(np.asarray(theta_norm, dtype=np.float64).reshape(-1, 1), (rows, length))
    return np.stack([b_norm, d1, d2, theta], axis=2)


def featurize(seq: MeasuredSequence, task: PredictionTask, norm: NormConstants) -> FeatureMatrix:
    """Feature matrix over the task window k0..k2 of one sequence."""
    task.validate_for(seq)
    window = seq.b[task.k0:task.k2 + 1] / norm.b_max
    theta = seq.temperature_c / norm.theta_max
    block = feature_rows(window[None, :], [theta])[0]  # (L, 4)
    return FeatureMatrix(values=block.T.copy())


def split_dataset(sequences, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint, exhaustive (train, eval, test) partition.

    Stratified by (f_sw, temperature) when that metadata is present: within
    each stratum the split is shuffled deterministically and every stratum
    with at least one member contributes to the training set first.
    """
    sequences = list(sequences)
    if not sequences:
        raise DataError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise DataError("fractions must be three values summing to 1")
    strata: dict = {}
    for i, s in enumerate(sequences):
        key = (s.f_sw_hz, s.temperature_c)
        strata.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    buckets = ([], [], [])
    for key in sorted(strata, key=lambda k: (repr(k[0]), repr(k[1]))):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = len(idx)
        ideal = [f * n for f in fractions]
        counts = [int(np.floor(v)) for v in ideal]
        order = sorted(range(3), key=lambda j: ideal[j] - counts[j], reverse=True)
        for j in order[: n - sum(counts)]:
            counts[j] += 1
        if counts[0] == 0:  # every nonempty stratum trains
            donor = max(range(1, 3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[0] += 1
        lo = 0
        for bucket, c in zip(buckets, counts):
            bucket.extend(int(i) for i in idx[lo:lo + c])
            lo += c
    return tuple([sequences[i] for i in sorted(b)] for b in buckets)


def make_minibatches(sequences, subseq_len: int, batch_size: int, rng_seed,
                     warmup_length: int, norm: NormConstants) -> list[MiniBatch]:
    """Chop sequences into length-l subsequences and group them into batches.

    Each call draws a fresh random window offset per sequence and a fresh
    row ordering (pass a per-epoch seed to regenerate), so successive epochs
    see a new set of subsequences. Rows that do not fill a final batch are
    dropped to keep shapes fixed.
    """
    sequences = list(sequences)
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    if subseq_len < warmup_length + 2:
        raise DataError(f"subsequence length {subseq_len} too short for warmup {warmup_length}")
    rng = np.random.default_rng(rng_seed)
    rows = []  # (seq_idx, offset)
    for si, seq in enumerate(sequences):
        n_sub = len(seq) // subseq_len
        if n_sub == 0:
            raise DataError(f"sequence {si} shorter than subsequence length {subseq_len}")
        slack = len(seq) - n_sub * subseq_len
        offset = int(rng.integers(0, slack + 1))
        rows.extend((si, offset + j * subseq_len) for j in range(n_sub))
    order = rng.permutation(len(rows))
    taus = {s.tau_s for s in sequences}
    if len(taus) != 1:
        raise DataError("mixed sampling periods in one batch set are not supported")
    tau_s = taus.pop()

    batches = []
    task = np.array([0, warmup_length, subseq_len - 1], dtype=np.int64)
    for start in range(0, len(rows) - batch_size + 1, batch_size):
        chosen = [rows[i] for i in order[start:start + batch_size]]
        b_raw = np.stack([sequences[si].b[off:off + subseq_len] for si, off in chosen])
        h_raw = np.stack([sequences[si].h[off:off + subseq_len] for si, off in chosen])
        theta = np.array([sequences[si].temperature_c for si, _ in chosen]) / norm.theta_max
        b_norm = b_raw / norm.b_max
        h_norm = h_raw / norm.h_max
        batches.append(MiniBatch(
            x=feature_rows(b_norm, theta),
            b_norm=b_norm, b_raw=b_raw, h_norm=h_norm, h_raw=h_raw,
            theta_norm=theta,
            h_rms=np.array([sequences[si].h_rms() for si, _ in chosen]),
            tasks=np.tile(task, (len(chosen), 1)),
            sources=np.array(chosen, dtype=np.int64),
            warmup_length=warmup_length,
            tau_s=tau_s,
        ))
    return batches


def reversed_minibatches(sequences, subseq_len: int, batch_size: int, rng_seed,
                         warmup_length: int, norm: NormConstants) -> list[MiniBatch]:
    """Batches for the flux-from-field direction (drive H~, predict B~).

    Mirrors :func:`make_minibatches` with the signal roles swapped: the
    ``b_*`` blocks hold the drive (H) and the ``h_*`` blocks the prediction
    target (B), ``h_rms`` is the full-sequence RMS of raw B, and ``x`` is the
    single-feature drive row (d_x = 1).
    """
    swapped = [MeasuredSequence(b=s.h, h=s.b, temperature_c=s.temperature_c, tau_s=s.tau_s,
                                material_id=s.material_id, f_sw_hz=s.f_sw_hz)
               for s in sequences]
    swapped_norm = NormConstants(h_max=norm.b_max, b_max=norm.h_max, theta_max=norm.theta_max)
    batches = make_minibatches(swapped, subseq_len, batch_size, rng_seed,
                               warmup_length, swapped_norm)
    for batch in batches:
        batch.x = batch.b_norm[:, :, None].copy()
    return batches


# -- sequence file I/O -------------------------------------------------------

def write_sequence(path: Path, seq: MeasuredSequence) -> None:
    """Write one sequence as CSV (k,B_T,H_Am) plus a JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "B_T", "H_Am"])
        for k in range(len(seq)):
            writer.writerow([k, f"{seq.b[k]:.9g}", f"{seq.h[k]:.9g}"])
    sidecar = {
        "material": seq.material_id,
        "temperature_C": seq.temperature_c,
        "f_sw_Hz": seq.f_sw_hz,
        "tau_s": seq.tau_s,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def read_sequence(path: Path) -> MeasuredSequence:
    """Read one canonical sequence CSV and its JSON sidecar."""
    path = Path(path)
    b_vals, h_vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["k", "B_T", "H_Am"]:
            raise DataError(f"{path}: expected header 'k,B_T,H_Am', got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                _, b_str, h_str = row
                b_vals.append(float(b_str))
                h_vals.append(float(h_str))
            except (ValueError, TypeError):
                raise DataError(f"{path}: corrupt row {lineno}: {row!r}")
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    return MeasuredSequence(
        b=np.array(b_vals), h=np.array(h_vals),
        temperature_c=float(meta["temperature_C"]),
        tau_s=float(meta.get("tau_s") or DEFAULT_TAU_S),
        material_id=str(meta.get("material", "")),
        f_sw_hz=None if meta.get("f_sw_Hz") is None else float(meta["f_sw_Hz"]),
    )


def write_material(out_dir: Path, material: str, sequences) -> Path:
    """Write sequences plus the per-material manifest; returns the material directory."""
    mat_dir = Path(out_dir) / material
    mat_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, seq in enumerate(sequences):
        name = f"seq_{i:05d}.csv"
        write_sequence(mat_dir / name, seq)
        names.append(name)
    manifest = {"material": material, "sequences": names, "count": len(names)}
    (mat_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mat_dir


def load_material(data_dir: Path, material: str) -> list[MeasuredSequence]:
    """Load every sequence listed in a material's manifest."""
    mat_dir = Path(data_dir) / material
    manifest_path = mat_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest for material {material!r} under {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    return [read_sequence(mat_dir / name) for name in manifest["sequences"]]


def list_materials(data_dir: Path) -> list[str]:
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return sorted(p.parent.name for p in root.glob("*/manifest.json"))


# -- raw-layout adapters -----------------------------------------------------

def _read_csv_matrix(path: Path) -> list[list[float]]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataError(f"{path}: corrupt row {lineno}")
    return rows


def _adapt_magnetx(raw_dir: Path, material: str) -> list[MeasuredSequence]:
    """Adapter for the public MagNetX-style layout.

    One directory per material with row-per-sequence CSV matrices:
    ``B_waveform[T].csv``, ``H_waveform[Am-1].csv``, ``Temperature[C].csv``,
    and optionally ``Frequency[Hz].csv`` and ``Sampling_Time[s].csv``.
    """
    b_rows = _read_csv_matrix(raw_dir / "B_waveform[T].csv")
    h_rows = _read_csv_matrix(raw_dir / "H_waveform[Am-1].csv")
    t_rows = _read_csv_matrix(raw_dir / "Temperature[C].csv")
    if not (len(b_rows) == len(h_rows) == len(t_rows)):
        raise DataError(f"{raw_dir}: B/H/Temperature row counts differ")
    f_path = raw_dir / "Frequency[Hz].csv"
    f_rows = _read_csv_matrix(f_path) if f_path.exists() else None
    tau_path = raw_dir / "Sampling_Time[s].csv"
    tau_rows = _read_csv_matrix(tau_path) if tau_path.exists() else None
    sequences = []
    for i, (b_row, h_row, t_row) in enumerate(zip(b_rows, h_rows, t_rows)):
        if len(b_row) != len(h_row):
            raise DataError(f"{raw_dir}: sequence {i}: B and H lengths differ")
        sequences.append(MeasuredSequence(
            b=np.array(b_row), h=np.array(h_row),
            temperature_c=t_row[0],
            tau_s=tau_rows[i][0] if tau_rows else DEFAULT_TAU_S,
            material_id=material,
            f_sw_hz=f_rows[i][0] if f_rows else None,
        ))
    return sequences


def _adapt_canonical(raw_dir: Path, material: str) -> list[MeasuredSequence]:
    paths = sorted(raw_dir.glob("*.csv"))
    seqs = [read_sequence(p) for p in paths]
    for s in seqs:
        s.material_id = s.material_id or material
    return seqs


ADAPTERS = {"magnetx": _adapt_magnetx, "canonical": _adapt_canonical}


def detect_adapter(raw_dir: Path) -> str:
    raw_dir = Path(raw_dir)
    if (raw_dir / "B_waveform[T].csv").exists():
        return "magnetx"
    csvs = [p for p in raw_dir.glob("*.csv") if p.with_suffix(".json").exists()]
    if csvs:
        return "canonical"
    raise DataError(f"unknown raw layout under {raw_dir}: no sequences found")


def ingest_material(raw_dir: Path, out_dir: Path, material: str | None = None,
                    adapter: str | None = None) -> tuple[str, int]:
    """Convert one raw material directory into the canonical layout.

    Returns (material name, sequence count).
    """
    raw_dir = Path(raw_dir)
    material = material or raw_dir.name
    name = adapter or detect_adapter(raw_dir)
    if name not in ADAPTERS:
        raise DataError(f"unknown adapter {name!r}")
    sequences = ADAPTERS[name](raw_dir, material)
    if not sequences:
        raise DataError(f"no sequences found under {raw_dir}")
    write_material(out_dir, material, sequences)
    return material, len(sequences)
