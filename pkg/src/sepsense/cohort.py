"""Synthetic admission cohorts with a known generative process.

Each patient is driven by a smooth low-dimensional latent trajectory plus a
deterioration ramp for sepsis cases; all 27 variables are linear readouts of
that latent state with additive bounded noise. Because the noise-free value
of every cell is retained on the generated record, exact oracles exist for
imputation error, revealed measurements, and correlation structure.

Cohorts persist to a fixed CSV layout (one row per collection, empty cell =
missing) with a JSON schema sidecar.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

# name, mean, scale, vital?, deterioration shift, benign-transient shift
# (shifts in scale units at full ramp/bump). Vitals respond identically to
# true deterioration and benign stress; only labs separate the two.
_VARIABLE_TABLE = [
    ("HeartRate", 86.0, 16.0, True, 0.55, 0.55),
    ("RespRate", 19.0, 5.0, True, 0.60, 0.60),
    ("Temperature", 37.0, 0.8, True, 0.50, 0.50),
    ("SpO2", 96.5, 2.5, True, -0.40, -0.40),
    ("SysBP", 120.0, 18.0, True, -0.55, -0.55),
    ("DiasBP", 68.0, 12.0, True, -0.40, -0.40),
    ("MeanBP", 85.0, 13.0, True, -0.50, -0.50),
    ("Glucose", 130.0, 45.0, True, 0.25, 0.25),
    ("Bicarbonate", 24.0, 4.5, False, -0.55, -0.30),
    ("WBC", 10.0, 4.5, False, 1.75, 0.25),
    ("Bands", 8.0, 7.0, False, 2.00, 0.10),
    ("CReactive", 60.0, 60.0, False, 2.10, 0.30),
    ("BUN", 22.0, 14.0, False, 0.55, 0.35),
    ("GCS", 13.0, 2.5, False, -0.50, -0.25),
    ("UrineOutput", 110.0, 70.0, False, -0.50, -0.30),
    ("Creatinine", 1.2, 0.8, False, 0.60, 0.35),
    ("Platelet", 230.0, 90.0, False, -0.45, -0.25),
    ("Sodium", 139.0, 4.5, False, -0.30, -0.20),
    ("Hemoglobin", 11.0, 2.0, False, -0.35, -0.25),
    ("Chloride", 103.0, 5.5, False, 0.30, 0.20),
    ("Lactate", 1.9, 1.3, False, 1.90, 0.15),
    ("INR", 1.4, 0.6, False, 0.45, 0.25),
    ("PTT", 36.0, 14.0, False, 0.40, 0.25),
    ("Magnesium", 2.0, 0.35, False, 0.25, 0.18),
    ("AnionGap", 13.0, 4.0, False, 0.60, 0.30),
    ("Hematocrit", 33.0, 6.0, False, -0.35, -0.25),
    ("PT", 14.5, 4.5, False, 0.45, 0.25),
]

# Cohort-level lab missing-rate targets (fraction of cells unobserved).
_LAB_MISSING_RATES = {
    "WBC": 0.69, "BUN": 0.66, "GCS": 0.33, "UrineOutput": 0.33,
    "Creatinine": 0.80, "Platelet": 0.82, "Sodium": 0.65, "Hemoglobin": 0.69,
    "Chloride": 0.66, "Bicarbonate": 0.67, "Lactate": 0.89, "INR": 0.80,
    "PTT": 0.79, "Magnesium": 0.69, "AnionGap": 0.67, "Hematocrit": 0.64,
    "PT": 0.80,
    # not in the published missing-rate table; rarely ordered panels
    "Bands": 0.85, "CReactive": 0.85,
}

VARIABLE_MEANS = np.array([row[1] for row in _VARIABLE_TABLE])
VARIABLE_SCALES = np.array([row[2] for row in _VARIABLE_TABLE])
_DETERIORATION_SHIFT = np.array([row[4] for row in _VARIABLE_TABLE])
_BENIGN_SHIFT = np.array([row[5] for row in _VARIABLE_TABLE])

META_COLUMNS = ["patient_id", "t_hours", "label"]


@dataclass(frozen=True)
class VariableSchema:
    """Ordered variable list with per-variable observability targets."""

    names: tuple[str, ...]
    vital_flags: tuple[bool, ...]
    target_missing_rate: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.vital_flags) == len(self.target_missing_rate)):
            raise ValueError("schema field lengths disagree")
        for name, vital, rate in zip(self.names, self.vital_flags, self.target_missing_rate):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"missing rate for {name} outside [0,1): {rate}")
            if vital and rate != 0.0:
                raise ValueError(f"vital {name} must have missing rate 0")

    @property
    def k(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "vital_flags": list(self.vital_flags),
            "target_missing_rate": list(self.target_missing_rate),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VariableSchema":
        return cls(
            names=tuple(obj["names"]),
            vital_flags=tuple(bool(v) for v in obj["vital_flags"]),
            target_missing_rate=tuple(float(r) for r in obj["target_missing_rate"]),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_schema() -> VariableSchema:
    names = tuple(row[0] for row in _VARIABLE_TABLE)
    vitals = tuple(row[3] for row in _VARIABLE_TABLE)
    rates = tuple(0.0 if row[3] else _LAB_MISSING_RATES[row[0]] for row in _VARIABLE_TABLE)
    return VariableSchema(names=names, vital_flags=vitals, target_missing_rate=rates)


@dataclass
class PatientRecord:
    """One admission: hourly variable collections, missingness mask, labels.

    Z holds NaN where a value is unobserved; M_obs is the authoritative
    mask. `truth` carries the noise-free generative values and exists only
    on records produced by `generate_cohort` (never round-trips via CSV).
    """

    id: str
    Z: np.ndarray
    T: np.ndarray
    M_obs: np.ndarray
    Y: np.ndarray
    truth: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def copy(self) -> "PatientRecord":
        return PatientRecord(
            id=self.id,
            Z=self.Z.copy(),
            T=self.T.copy(),
            M_obs=self.M_obs.copy(),
            Y=self.Y.copy(),
            truth=None if self.truth is None else self.truth.copy(),
        )

    def validate(self) -> None:
        n, k = self.Z.shape
        if self.T.shape != (n,) or self.M_obs.shape != (n, k) or self.Y.shape != (n,):
            raise ValueError(f"record {self.id}: inconsistent field shapes")
        if n == 0:
            raise ValueError(f"record {self.id}: empty record")
        if self.T[0] != 0.0 or np.any(np.diff(self.T) <= 0):
            raise ValueError(f"record {self.id}: timestamps must start at 0 and increase")
        if np.any(np.isnan(self.Z) == self.M_obs):
            raise ValueError(f"record {self.id}: Z present iff observed violated")


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_patients: int = 100
    sepsis_rate: float = 0.32
    latent_dim: int = 4
    noise_frac: float = 0.30
    missingness: str = "uniform"
    # multiplier on every lab's target missing rate; 0 = fully observed.
    # Patient trajectories are invariant to this knob (same seed, same Z).
    missing_scale: float = 1.0
    # how strongly early hours are over-missing relative to the cohort target
    early_missing_boost: float = 0.97
    early_missing_tau: float = 3.0

    def __post_init__(self):
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        if not 0.0 < self.sepsis_rate < 1.0:
            raise ValueError("sepsis_rate must lie in (0,1)")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.missingness not in ("uniform", "burst"):
            raise ValueError(f"unknown missingness mode {self.missingness!r}")
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be non-negative")
        if self.missing_scale < 0:
            raise ValueError("missing_scale must be non-negative")


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Round to the 6-decimal precision the CSV format carries."""
    return np.round(arr, 6)


def generate_cohort(config: GeneratorConfig,
                    schema: VariableSchema | None = None) -> list[PatientRecord]:
    """Generate a cohort of hourly admission records.

    Case/control status is assigned to exactly round(rate * n) patients, so
    realized prevalence matches the target up to rounding. Lab missingness
    is drawn per-cell with an early-admission boost, then corrected per
    variable to hit the cohort-level target count exactly.
    """
    schema = schema or default_schema()
    k = schema.k
    rng = np.random.default_rng(config.seed)
    struct_rng = np.random.default_rng((config.seed, 9151))

    lab_idx = np.array([i for i, v in enumerate(schema.vital_flags) if not v])
    m_shared = config.latent_dim - 1
    # shared-factor loadings: labs and vitals both read the latent state
    loadings = struct_rng.normal(0.0, 0.45, size=(k, m_shared))

    n = config.n_patients
    n_cases = int(round(config.sepsis_rate * n))
    case_flags = np.zeros(n, dtype=bool)
    case_flags[rng.permutation(n)[:n_cases]] = True

    lengths = np.clip(rng.geometric(1.0 / 24.0, size=n), 8, 72)

    noise_scale = VARIABLE_SCALES * config.noise_frac

    records: list[PatientRecord] = []
    missing_masks: list[np.ndarray] = []
    for p in range(n):
        L = int(lengths[p])
        t = np.arange(L, dtype=np.float64)

        base = rng.normal(0.0, 0.8, size=m_shared)
        amp = rng.uniform(0.15, 0.5, size=m_shared)
        period = rng.uniform(18.0, 40.0, size=m_shared)
        phase = rng.uniform(0.0, 2 * np.pi, size=m_shared)
        latent = base + amp * np.sin(2 * np.pi * t[:, None] / period + phase)

        bump = np.zeros(L)
        if case_flags[p]:
            onset = L - 1 + rng.uniform(0.05, 0.95)
            # deterioration becomes visible inside the 4h pre-onset window;
            # severity varies per patient and overlaps the benign range
            ramp = rng.uniform(0.65, 1.0) * _expit((t - (onset - 3.0)) / 1.8)
            Y = ((t < onset) & (onset <= t + 4.0)).astype(np.int8)
            if rng.random() < 0.6:
                bump = _benign_event(rng, t, 0.5 * L)
        else:
            Y = np.zeros(L, dtype=np.int8)
            ramp = np.zeros(L)
            if rng.random() < 0.85:
                bump = _benign_event(rng, t, float(L))

        zval = (latent @ loadings.T
                + ramp[:, None] * _DETERIORATION_SHIFT
                + bump[:, None] * _BENIGN_SHIFT)
        truth = _quantize(VARIABLE_MEANS + VARIABLE_SCALES * zval)
        if config.noise_frac > 0:
            eps = rng.normal(0.0, noise_scale, size=(L, k))
            bound = 3.0 * noise_scale - 1e-6
            eps = np.clip(eps, -bound, bound)
        else:
            eps = np.zeros((L, k))
        Z = _quantize(truth + eps)

        missing = np.zeros((L, k), dtype=bool)
        for j in lab_idx:
            target = min(schema.target_missing_rate[j] * config.missing_scale, 0.995)
            boost = max(config.early_missing_boost, target)
            p_t = target + (boost - target) * np.exp(-t / config.early_missing_tau)
            if config.missing_scale == 0.0:
                p_t = np.zeros(L)
            p_t = np.clip(p_t, 0.0, 0.995)
            if config.missingness == "uniform":
                missing[:, j] = rng.random(L) < p_t
            else:
                run = 0
                for i in range(L):
                    if run > 0:
                        missing[i, j] = True
                        run -= 1
                    elif rng.random() < p_t[i] / 4.0:
                        run = int(rng.geometric(1.0 / 4.0))
                        missing[i, j] = True
                        run -= 1

        records.append(PatientRecord(
            id=f"p{p:05d}", Z=Z, T=t, M_obs=~missing, Y=Y, truth=truth,
        ))
        missing_masks.append(missing)

    _correct_missing_counts(records, missing_masks, schema, lab_idx, rng,
                            missing_scale=config.missing_scale)

    for rec, missing in zip(records, missing_masks):
        rec.M_obs = ~missing
        rec.Z = rec.Z.copy()
        rec.Z[missing] = np.nan
        rec.validate()
    return records


def _benign_event(rng: np.random.Generator, t: np.ndarray,
                  start_max: float) -> np.ndarray:
    """Benign stress transient whose rise is shaped exactly like onset.

    In vital-sign space a rising benign event is indistinguishable from true
    deterioration; only the lab response pattern separates them.
    """
    level = rng.uniform(0.35, 0.9)
    start = rng.uniform(0.0, start_max)
    hold = rng.uniform(2.0, 8.0)
    return level * _expit((t - start) / 1.8) * _expit((start + hold - t) / 2.5)


def _correct_missing_counts(records, missing_masks, schema, lab_idx, rng, missing_scale=1.0):
    """Flip cells (preferring hours >= 6) so each lab hits its target count."""
    for j in lab_idx:
        target_rate = min(schema.target_missing_rate[j] * missing_scale, 0.995)
        cells = []  # (record index, hour, currently missing)
        for ri, (rec, mask) in enumerate(zip(records, missing_masks)):
            for t in range(rec.n):
                cells.append((ri, t, mask[t, j]))
        total = len(cells)
        target = int(round(target_rate * total))
        current = sum(1 for _, _, m in cells if m)
        delta = current - target
        if delta == 0:
            continue
        want_missing = delta < 0
        candidates = [
            (ri, t) for ri, t, m in cells
            if m != want_missing and t >= 6
        ]
        if len(candidates) < abs(delta):
            candidates = [(ri, t) for ri, t, m in cells if m != want_missing]
        pick = rng.choice(len(candidates), size=abs(delta), replace=False)
        for idx in pick:
            ri, t = candidates[int(idx)]
            missing_masks[ri][t, j] = want_missing


def true_conditional(patient: PatientRecord, i: int, j: int) -> float:
    """Noise-free generative value of variable j at collection i.

    Serves as the measurement oracle when sensing reveals a cell that was
    never collected. Only synthetic records carry the required ground truth.
    """
    if patient.truth is None:
        raise ValueError(
            f"record {patient.id} was not produced by generate_cohort; "
            "no generative oracle available"
        )
    return float(patient.truth[i, j])


# -- CSV persistence ---------------------------------------------------------


def _schema_sidecar(path) -> str:
    return str(path) + ".schema.json"


def save_cohort(cohort: list[PatientRecord], path, schema: VariableSchema) -> None:
    """Write cohort CSV (UTF-8, LF, <=6 decimals) plus schema sidecar."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(META_COLUMNS + list(schema.names))
        for rec in cohort:
            for i in range(rec.n):
                row = [rec.id, _fmt(rec.T[i]), str(int(rec.Y[i]))]
                for j in range(schema.k):
                    row.append(_fmt(rec.Z[i, j]) if rec.M_obs[i, j] else "")
                writer.writerow(row)
    with open(_schema_sidecar(path), "w", encoding="utf-8") as f:
        json.dump(schema.to_json(), f, indent=2)
        f.write("\n")


def _fmt(v: float) -> str:
    s = f"{v:.6f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-0") else "0"


def load_schema(path) -> VariableSchema:
    with open(_schema_sidecar(path), encoding="utf-8") as f:
        return VariableSchema.from_json(json.load(f))


def load_cohort(path, schema: VariableSchema | None = None) -> list[PatientRecord]:
    """Load a cohort CSV; validation failures name the offending file row."""
    schema = schema or load_schema(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty cohort file") from None
        expected = META_COLUMNS + list(schema.names)
        if header != expected:
            for col in header:
                if col not in expected:
                    raise ValueError(f"unknown variable column {col!r}")
            raise ValueError("cohort header does not match schema order")

        records: list[PatientRecord] = []
        cur_id = None
        rows: list[tuple[float, int, list[float], list[bool]]] = []

        def flush():
            if cur_id is None:
                return
            T = np.array([r[0] for r in rows])
            Y = np.array([r[1] for r in rows], dtype=np.int8)
            Z = np.array([r[2] for r in rows])
            M = np.array([r[3] for r in rows], dtype=bool)
            rec = PatientRecord(id=cur_id, Z=Z, T=T, M_obs=M, Y=Y)
            rec.validate()
            _validate_label_window(rec)
            records.append(rec)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            pid, t_str, y_str = row[0], row[1], row[2]
            if pid != cur_id:
                flush()
                cur_id = pid
                rows = []
            try:
                t = float(t_str)
            except ValueError:
                raise ValueError(f"row {lineno}: invalid timestamp {t_str!r}") from None
            if rows and t <= rows[-1][0]:
                raise ValueError(f"row {lineno}: non-monotone timestamp for {pid}")
            if not rows and t != 0.0:
                raise ValueError(f"row {lineno}: first timestamp for {pid} must be 0")
            if y_str not in ("0", "1"):
                raise ValueError(f"row {lineno}: non-binary label {y_str!r}")
            vals: list[float] = []
            mask: list[bool] = []
            for j, cell in enumerate(row[3:]):
                if cell == "":
                    if schema.vital_flags[j]:
                        raise ValueError(
                            f"row {lineno}: vital {schema.names[j]} is missing"
                        )
                    vals.append(np.nan)
                    mask.append(False)
                else:
                    vals.append(float(cell))
                    mask.append(True)
            rows.append((t, int(y_str), vals, mask))
        flush()
    return records


def _validate_label_window(rec: PatientRecord) -> None:
    ones = np.flatnonzero(rec.Y)
    if ones.size == 0:
        return
    first = ones[0]
    if not np.all(rec.Y[first:] == 1):
        raise ValueError(f"record {rec.id}: labels must stay 1 after onset flag")
    if rec.n - first > 4:
        raise ValueError(
            f"record {rec.id}: record continues more than 4 collections past onset flag"
        )


def split_cohort(cohort: list[PatientRecord], fractions, seed: int):
    """Partition by patient id, deterministic under seed."""
    fractions = list(fractions)
    if any(f <= 0 for f in fractions):
        raise ValueError("split fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(cohort)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    out = []
    start = 0
    for b in bounds:
        out.append([cohort[i] for i in order[start:b]])
        start = b
    return tuple(out)
