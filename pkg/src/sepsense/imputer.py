"""Gaussian imputation of missing clinical variables.

Architecture: per-collection embedding of [mean-filled variables; time
embedding] -> LSTM over collections -> linear mean head and ReLU deviation
head. Training runs in two phases: the mean head (with everything else) on
a masked squared error, then the deviation head alone on the likelihood
loss whose per-entry optimum is sigma^4 = residual^2.

All model math happens in per-variable standardized units; interfaces
report original units and pass observed values through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .cohort import PatientRecord, VariableSchema

SIGMA_FLOOR = 1e-3  # standardized units; keeps the likelihood loss finite


def time_embed(t: float, d: int, t_max: float) -> np.ndarray:
    """Sinusoidal clock for one timestamp: [sin(t*j/(t_max*d)); cos(...)]."""
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    j = np.arange(d, dtype=np.float64)
    arg = t * j / (t_max * d)
    return np.concatenate([np.sin(arg), np.cos(arg)])


def time_embedding_matrix(T: np.ndarray, d: int, t_max: float) -> np.ndarray:
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    j = np.arange(d, dtype=np.float64)
    arg = np.asarray(T, dtype=np.float64)[:, None] * j / (t_max * d)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class Standardizer:
    """Per-variable z-scoring fit on the observed entries of a train split."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, cohort: list[PatientRecord]) -> "Standardizer":
        stacked = np.concatenate([r.Z for r in cohort], axis=0)
        mean = np.nanmean(stacked, axis=0)
        std = np.nanstd(stacked, axis=0)
        mean = np.where(np.isnan(mean), 0.0, mean)
        std = np.where(np.isnan(std) | (std < 1e-8), 1.0, std)
        return cls(mean, std)

    def transform(self, Z: np.ndarray) -> np.ndarray:
        return (Z - self.mean) / self.std

    def inverse(self, Zs: np.ndarray) -> np.ndarray:
        return Zs * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "Standardizer":
        return cls(np.array(obj["mean"]), np.array(obj["std"]))


@dataclass
class ImputationDistribution:
    """Per-cell Gaussian (mu, sigma) plus the assembled matrix X.

    All three arrays are (n, k) in original units. X copies the observed
    value wherever one exists and mu elsewhere.
    """

    mu: np.ndarray
    sigma: np.ndarray
    X: np.ndarray


@dataclass
class MaskPlan:
    """Training mask: observed entries hidden for supervision."""

    M: np.ndarray
    mask_fraction: float = 0.2


def draw_mask_plan(record: PatientRecord, schema: VariableSchema,
                   fraction: float, rng: np.random.Generator) -> MaskPlan:
    """Hide a random `fraction` of observed lab entries; vitals never masked."""
    maskable = record.M_obs & ~np.array(schema.vital_flags)[None, :]
    M = maskable & (rng.random(record.M_obs.shape) < fraction)
    return MaskPlan(M=M, mask_fraction=fraction)


def masked_mse(mu: np.ndarray, z: np.ndarray, mask: np.ndarray) -> float:
    """Sum over masked entries of (mu - z)^2."""
    diff = np.where(mask, mu - z, 0.0)
    return float(np.sum(diff * diff))


@dataclass
class ImputerConfig:
    d: int = 32
    hidden: int = 64
    seed: int = 0
    mask_fraction: float = 0.2
    epochs_mean: int = 25
    epochs_sigma: int = 40
    lr: float = 3e-3
    batch_size: int = 32


class Imputer:
    """Recurrent Gaussian imputer over one admission's collections."""

    def __init__(self, schema: VariableSchema, d: int = 32, hidden: int = 64,
                 seed: int = 0):
        self.schema = schema
        self.d = d
        self.hidden = hidden
        self.sigma_floor = SIGMA_FLOOR
        self.t_max: float = 1.0
        self.stats: Standardizer | None = None
        self.mean_trained = False
        self.sigma_trained = False

        k = schema.k
        rng = np.random.default_rng(seed)
        H = hidden
        self.params: dict[str, Value] = {
            "w_e": Value(ad.uniform_init(rng, (k + 2 * d, d)), requires_grad=True),
            "b_e": Value(np.zeros(d), requires_grad=True),
            "w_x": Value(ad.uniform_init(rng, (d, 4 * H)), requires_grad=True),
            "w_h": Value(ad.uniform_init(rng, (H, 4 * H)), requires_grad=True),
            "b_l": Value(np.zeros(4 * H), requires_grad=True),
            "w_mu": Value(ad.uniform_init(rng, (H, k)), requires_grad=True),
            "b_mu": Value(np.zeros(k), requires_grad=True),
            "w_sigma": Value(ad.uniform_init(rng, (H, k)), requires_grad=True),
            "b_sigma": Value(np.full(k, 0.5), requires_grad=True),
        }
        # forget-gate bias starts open so early sequences keep state
        self.params["b_l"].data[H:2 * H] = 1.0

    # -- forward pieces ----------------------------------------------------

    def embed(self, z_row, et_row) -> Value:
        x = ad.concat([ad.as_value(z_row), ad.as_value(et_row)], axis=-1)
        return ad.dense(x, self.params["w_e"], self.params["b_e"])

    def cell(self, e: Value, h, c):
        return ad.lstm_step(e, h, c, self.params["w_x"], self.params["w_h"],
                            self.params["b_l"])

    def heads(self, s: Value) -> tuple[Value, Value]:
        mu = ad.dense(s, self.params["w_mu"], self.params["b_mu"])
        sig = ad.clamp(
            ad.relu(ad.dense(s, self.params["w_sigma"], self.params["b_sigma"])),
            lo=self.sigma_floor,
        )
        return mu, sig

    def step_numpy(self, z_row: np.ndarray, et_row: np.ndarray, state):
        """One inference step: (B,k),(B,2d),(h,c) -> mu,sigma,(h,c) in std units."""
        with ad.no_grad():
            e = self.embed(z_row, et_row)
            h, c = self.cell(e, Value(state[0]), Value(state[1]))
            mu, sig = self.heads(h)
        return mu.data, sig.data, (h.data, c.data)

    def init_state(self, batch: int):
        return (np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden)))

    def run_standardized(self, z_in: np.ndarray, et: np.ndarray):
        """Full-sequence inference. z_in: (n,k) mean-filled std units."""
        state = self.init_state(1)
        mu = np.empty_like(z_in)
        sig = np.empty_like(z_in)
        for i in range(z_in.shape[0]):
            m, s, state = self.step_numpy(z_in[i:i + 1], et[i:i + 1], state)
            mu[i] = m[0]
            sig[i] = s[0]
        return mu, sig

    # -- inference interface -------------------------------------------------

    def impute(self, patient: PatientRecord) -> ImputationDistribution:
        if not self.mean_trained:
            raise ValueError("imputer is not trained")
        if patient.n == 0:
            raise ValueError("empty record")
        if patient.T[-1] > 1.5 * self.t_max:
            raise ValueError(
                f"timestamp {patient.T[-1]} outside supported range "
                f"[0, {1.5 * self.t_max}]"
            )
        zs = self.stats.transform(patient.Z)
        z_in = np.where(patient.M_obs, zs, 0.0)
        et = time_embedding_matrix(patient.T, self.d, self.t_max)
        mu_s, sig_s = self.run_standardized(z_in, et)
        mu = self.stats.inverse(mu_s)
        sigma = sig_s * self.stats.std
        X = np.where(patient.M_obs, patient.Z, mu)
        return ImputationDistribution(mu=mu, sigma=sigma, X=X)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        ad.save_arrays(path, {k: v.data for k, v in self.params.items()})
        meta = {
            "schema_hash": self.schema.hash(),
            "d": self.d,
            "hidden": self.hidden,
            "t_max": self.t_max,
            "sigma_floor": self.sigma_floor,
            "stats": self.stats.to_json() if self.stats else None,
            "mean_trained": self.mean_trained,
            "sigma_trained": self.sigma_trained,
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)

    @classmethod
    def load(cls, path, schema: VariableSchema) -> "Imputer":
        with open(str(path) + ".json", encoding="utf-8") as f:
            meta = json.load(f)
        if meta["schema_hash"] != schema.hash():
            raise ValueError("schema hash mismatch: snapshot was trained on a different schema")
        model = cls(schema, d=meta["d"], hidden=meta["hidden"])
        arrays = ad.load_arrays(path)
        for k, v in model.params.items():
            v.data = arrays[k]
        model.t_max = meta["t_max"]
        model.sigma_floor = meta["sigma_floor"]
        model.stats = Standardizer.from_json(meta["stats"])
        model.mean_trained = meta["mean_trained"]
        model.sigma_trained = meta["sigma_trained"]
        return model


# -- training ------------------------------------------------------------------


def _prepared(cohort, schema, stats, d, t_max):
    out = []
    for rec in cohort:
        zs = stats.transform(rec.Z)
        zs = np.where(rec.M_obs, zs, 0.0)
        et = time_embedding_matrix(rec.T, d, t_max)
        out.append((zs, et, rec.M_obs))
    return out


def _batches(items, batch_size, rng):
    order = rng.permutation(len(items))
    lengths = np.array([items[i][0].shape[0] for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def _pad_batch(batch):
    B = len(batch)
    T = max(item[0].shape[0] for item in batch)
    k = batch[0][0].shape[1]
    twd = batch[0][1].shape[1]
    z = np.zeros((B, T, k))
    et = np.zeros((B, T, twd))
    obs = np.zeros((B, T, k), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    for b, (zs, e, m) in enumerate(batch):
        n = zs.shape[0]
        z[b, :n] = zs
        et[b, :n] = e
        obs[b, :n] = m
        valid[b, :n] = True
    return z, et, obs, valid


def train_imputer_mean(cohort: list[PatientRecord], schema: VariableSchema,
                       config: ImputerConfig | None = None) -> Imputer:
    """Phase 1: fit everything but the deviation head on masked squared error."""
    config = config or ImputerConfig()
    if not cohort:
        raise ValueError("training cohort is empty")
    vitals = np.array(schema.vital_flags)
    lab_observed = sum(int((rec.M_obs & ~vitals).sum()) for rec in cohort)
    if lab_observed == 0:
        raise ValueError("cohort has zero observed lab values; nothing to learn")

    model = Imputer(schema, d=config.d, hidden=config.hidden, seed=config.seed)
    model.stats = Standardizer.fit(cohort)
    model.t_max = float(max(rec.T[-1] for rec in cohort))

    items = _prepared(cohort, schema, model.stats, config.d, model.t_max)
    rng = np.random.default_rng((config.seed, 1))
    head_params = [model.params[k] for k in
                   ("w_e", "b_e", "w_x", "w_h", "b_l", "w_mu", "b_mu")]
    opt = ad.Adam(head_params, lr=config.lr)

    for _ in range(config.epochs_mean):
        for batch in _batches(items, config.batch_size, rng):
            z, et, obs, valid = _pad_batch(batch)
            maskable = obs & ~vitals[None, None, :]
            plan = maskable & (rng.random(z.shape) < config.mask_fraction)
            n_masked = plan.sum()
            if n_masked == 0:
                continue
            z_in = np.where(plan, 0.0, z)
            B, T, _ = z.shape
            h = Value(np.zeros((B, model.hidden)))
            c = Value(np.zeros((B, model.hidden)))
            loss = None
            for t in range(T):
                e = model.embed(z_in[:, t], et[:, t])
                h, c = model.cell(e, h, c)
                mu = ad.dense(h, model.params["w_mu"], model.params["b_mu"])
                diff = mu - z[:, t]
                term = ad.vsum(ad.mul(ad.mul(diff, diff), plan[:, t].astype(float)))
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / n_masked)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()

    model.mean_trained = True
    return model


def train_imputer_sigma(cohort: list[PatientRecord], model: Imputer,
                        config: ImputerConfig | None = None) -> Imputer:
    """Phase 2: fit only the deviation head; every other parameter is frozen.

    Loss per masked entry: (mu - z)^2 / (2 sigma^2) + sigma^2 / 2, whose
    optimum satisfies sigma^2 = |mu - z|.
    """
    config = config or ImputerConfig()
    if not model.mean_trained:
        raise ValueError("sigma phase requires a completed mean phase")
    vitals = np.array(model.schema.vital_flags)
    items = _prepared(cohort, model.schema, model.stats, model.d, model.t_max)
    rng = np.random.default_rng((config.seed, 2))
    opt = ad.Adam([model.params["w_sigma"], model.params["b_sigma"]],
                  lr=5 * config.lr)

    for _ in range(config.epochs_sigma):
        for batch in _batches(items, config.batch_size, rng):
            z, et, obs, valid = _pad_batch(batch)
            maskable = obs & ~vitals[None, None, :]
            plan = maskable & (rng.random(z.shape) < config.mask_fraction)
            if plan.sum() == 0:
                continue
            z_in = np.where(plan, 0.0, z)
            B, T, _ = z.shape
            # states and residuals never touch the deviation head: no tape
            states = np.empty((B, T, model.hidden))
            mu_all = np.empty_like(z)
            state = model.init_state(B)
            for t in range(T):
                mu_t, _, state = model.step_numpy(z_in[:, t], et[:, t], state)
                states[:, t] = state[0]
                mu_all[:, t] = mu_t
            rows = plan.nonzero()
            s_sel = Value(states[rows[0], rows[1]])
            resid2 = (mu_all[rows] - z[rows]) ** 2
            col = rows[2]
            w_cols = _gather_cols(model.params["w_sigma"], col)
            b_cols = _gather_vec(model.params["b_sigma"], col)
            pre = ad.vsum(ad.mul(s_sel, w_cols), axis=1) + b_cols
            sig = ad.clamp(ad.relu(pre), lo=model.sigma_floor)
            sig2 = ad.mul(sig, sig)
            loss = ad.vmean(ad.div(Value(resid2 / 2.0), sig2) + sig2 * 0.5)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()

    model.sigma_trained = True
    return model


def _gather_cols(w: Value, cols: np.ndarray) -> Value:
    """Select columns of (H,k) weight per row index -> (R,H) on the tape."""
    data = w.data[:, cols].T

    def backward(g):
        full = np.zeros_like(w.data)
        np.add.at(full, (slice(None), cols), g.T)
        return (full,)

    return ad._make(data, (w,), backward)


def _gather_vec(b: Value, cols: np.ndarray) -> Value:
    data = b.data[cols]

    def backward(g):
        full = np.zeros_like(b.data)
        np.add.at(full, cols, g)
        return (full,)

    return ad._make(data, (b,), backward)


def heldout_masked_mse(model: Imputer, cohort: list[PatientRecord],
                       mask_seed: int = 1234, fraction: float = 0.2) -> float:
    """Masked-entry MSE on a fixed held-out mask (mean per entry)."""
    rng = np.random.default_rng(mask_seed)
    vitals = np.array(model.schema.vital_flags)
    total, count = 0.0, 0
    for rec in cohort:
        maskable = rec.M_obs & ~vitals[None, :]
        plan = maskable & (rng.random(rec.Z.shape) < fraction)
        if plan.sum() == 0:
            continue
        hidden = rec.copy()
        hidden.Z = np.where(plan, np.nan, hidden.Z)
        hidden.M_obs = hidden.M_obs & ~plan
        dist = model.impute(hidden)
        zs = model.stats.transform(rec.Z)
        ms = model.stats.transform(dist.mu)
        diff = np.where(plan, ms - zs, 0.0)
        total += float(np.sum(diff * diff))
        count += int(plan.sum())
    return total / max(count, 1)


def heldout_coverage(model: Imputer, cohort: list[PatientRecord],
                     mask_seed: int = 1234, fraction: float = 0.2) -> float:
    """Fraction of held-out masked entries with |z - mu| <= 2 sigma."""
    rng = np.random.default_rng(mask_seed)
    vitals = np.array(model.schema.vital_flags)
    hit, count = 0, 0
    for rec in cohort:
        maskable = rec.M_obs & ~vitals[None, :]
        plan = maskable & (rng.random(rec.Z.shape) < fraction)
        if plan.sum() == 0:
            continue
        hidden = rec.copy()
        hidden.Z = np.where(plan, np.nan, hidden.Z)
        hidden.M_obs = hidden.M_obs & ~plan
        dist = model.impute(hidden)
        ok = np.abs(rec.Z - dist.mu) <= 2.0 * dist.sigma
        hit += int(np.sum(ok & plan))
        count += int(plan.sum())
    return hit / max(count, 1)
