"""Active sensing: which unobserved variables to measure, and the hourly
replay loop that reveals them under a budget.

Policies score the current collection's unobserved variables and reveal the
top ones; the measurement comes from the record itself when present,
otherwise from the synthetic generator's noise-free oracle. Episodes operate
on copies, never on the caller's records.

All per-patient randomness (dropout masks, policy draws) is keyed by the
patient id, so running one patient alone reproduces its batch-run results
bit for bit.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cohort import PatientRecord, VariableSchema, true_conditional
from .imputer import Imputer
from .predictor import RiskModel, StepContext
from .uncertainty import UncertaintyReport, delta_scores

POLICY_KINDS = ("random", "mc_sampling", "ras_n", "ras_l", "ras")


@dataclass(frozen=True)
class SensingPolicy:
    """What to reveal and how much.

    budget is the fraction of the record's initially-unobserved lab cells
    that may be revealed over the whole episode. The ras_* kinds query the
    correspondingly trained predictor; random and mc_sampling run against
    the plain (ras_n) predictor.
    """

    kind: str
    budget: float
    mc_samples: int = 100
    # dropout masks averaged in the gradient scoring; 0 = single
    # deterministic pass (no dropout)
    score_masks: int = 3
    uw_samples: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError(f"budget must lie in [0,1], got {self.budget}")
        if self.score_masks < 0 or self.uw_samples < 2:
            raise ValueError("score_masks must be >= 0 and uw_samples >= 2")


@dataclass
class HourLog:
    hour: int
    risk_pre: float
    risk_post: float
    ux_pre: float
    ux_post: float
    uw: float
    revealed: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class SensingEpisode:
    patient_id: str
    hours: list[HourLog]
    reveal_count: int
    labels: np.ndarray

    def to_jsonl(self) -> list[str]:
        import json
        lines = []
        for log in self.hours:
            lines.append(json.dumps({
                "patient": self.patient_id,
                "hour": log.hour,
                "risk_pre": log.risk_pre,
                "risk_post": log.risk_post,
                "Ux_pre": log.ux_pre,
                "Ux_post": log.ux_post,
                "Uw": log.uw,
                "revealed": [{"name": n, "value": v} for n, v in log.revealed],
            }))
        return lines


def select_variables(report: UncertaintyReport | np.ndarray, unobserved,
                     m: int) -> list[int]:
    """The m unobserved variables with the highest reduction scores.

    Descending by score; ties broken toward the lower variable index.
    """
    scores = report.per_variable if isinstance(report, UncertaintyReport) else np.asarray(report)
    unobserved = list(unobserved)
    if m > len(unobserved):
        raise ValueError(
            f"cannot select {m} of {len(unobserved)} unobserved variables"
        )
    ranked = sorted(unobserved, key=lambda j: (-scores[j], j))
    return ranked[:m]


def reveal(patient: PatientRecord, hour: int, var: int,
           value: float | None = None) -> PatientRecord:
    """Mark (hour, var) observed with the measured value.

    Falls back to the generative oracle when no value is supplied (synthetic
    records only). Rejects cells that are already observed.
    """
    if patient.M_obs[hour, var]:
        raise ValueError(
            f"variable {var} at hour {hour} of {patient.id} is already observed"
        )
    if value is None:
        value = true_conditional(patient, hour, var)
    if not np.isfinite(value):
        raise ValueError(f"measurement for variable {var} must be finite")
    patient.Z[hour, var] = value
    patient.M_obs[hour, var] = True
    return patient


def reveal_allowance(record: PatientRecord, schema: VariableSchema,
                     budget: float) -> int:
    vitals = np.array(schema.vital_flags)
    maskable = int((~record.M_obs & ~vitals[None, :]).sum())
    return int(np.floor(budget * maskable))


def _hour_quota(allowance: int, capacities) -> np.ndarray:
    """Spread the allowance uniformly over hours, remainder to the earliest.

    No hour is allocated beyond its capacity (its unobserved-cell count);
    excess re-spreads over the hours that still have room, so the total
    always equals the allowance (reveals act on the current hour only, so
    capacity cannot be deferred).
    """
    capacities = np.asarray(capacities, dtype=int)
    n = len(capacities)
    quota = np.zeros(n, dtype=int)
    remaining = min(int(allowance), int(capacities.sum()))
    while remaining > 0:
        room = np.flatnonzero(quota < capacities)
        base, rem = divmod(remaining, room.size)
        made_progress = False
        for i, h in enumerate(room):
            give = min(base + (1 if i < rem else 0), capacities[h] - quota[h])
            quota[h] += give
            remaining -= give
            made_progress = made_progress or give > 0
        if not made_progress:
            break
    return quota


def _id_key(patient_id: str) -> int:
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class EpisodeRunner:
    """Hourly sensing replay over a batch of patients with shared models.

    Keeps incremental LSTM states for the imputer, the deterministic
    predictor pass, `uw_samples` dropout passes (epistemic variance) and
    `score_masks` dropout passes (delta-method scoring), so each hour costs
    one batched step per group plus one batched gradient tape.
    """

    def __init__(self, imputer: Imputer, predictor: RiskModel,
                 rho: np.ndarray, schema: VariableSchema,
                 policy: SensingPolicy, collect_details: bool = False):
        self.imputer = imputer
        self.model = predictor
        self.rho = rho
        self.schema = schema
        self.policy = policy
        self.vitals = np.array(schema.vital_flags)
        self.decision_seconds = 0.0
        self.decisions = 0
        self.collect_details = collect_details
        self.details: dict[str, list[dict]] = {}

    def run(self, records: list[PatientRecord]) -> list[SensingEpisode]:
        policy = self.policy
        records = [r.copy() for r in records]
        P = len(records)
        k = self.schema.k
        stats = self.imputer.stats
        n_hours = np.array([r.n for r in records])
        H = int(n_hours.max())
        S_w, S_x = policy.uw_samples, policy.score_masks

        S_x = max(S_x, 1)
        det_scoring = policy.score_masks == 0

        allowance = np.array([reveal_allowance(r, self.schema, policy.budget)
                              for r in records])
        capacities = [(~r.M_obs & ~self.vitals[None, :]).sum(axis=1)
                      for r in records]
        quotas = [_hour_quota(a, cap) for a, cap in zip(allowance, capacities)]

        et_imp = [  # per patient, per model: time embeddings are cheap to precompute
            np.ascontiguousarray(_te(r.T, self.imputer.d, self.imputer.t_max))
            for r in records]
        et_prd = [np.ascontiguousarray(_te(r.T, self.model.d, self.model.t_max))
                  for r in records]

        imp_h = np.zeros((P, self.imputer.hidden))
        imp_c = np.zeros((P, self.imputer.hidden))
        det_h = np.zeros((P, self.model.hidden))
        det_c = np.zeros((P, self.model.hidden))
        w_h = np.zeros((S_w * P, self.model.hidden))
        w_c = np.zeros((S_w * P, self.model.hidden))
        x_h = np.zeros((S_x * P, self.model.hidden))
        x_c = np.zeros((S_x * P, self.model.hidden))

        keys = [_id_key(r.id) for r in records]
        w_emb = np.empty((S_w, P, self.model.d))
        w_hid = np.empty((S_w, P, self.model.hidden))
        x_emb = np.empty((S_x, P, self.model.d))
        x_hid = np.empty((S_x, P, self.model.hidden))
        for s in range(S_w):
            for p in range(P):
                rng = np.random.default_rng((policy.seed, 101, s, keys[p]))
                w_emb[s, p], w_hid[s, p] = self.model.sample_masks(rng)
        for s in range(S_x):
            for p in range(P):
                if det_scoring:
                    x_emb[s, p] = 1.0
                    x_hid[s, p] = 1.0
                else:
                    rng = np.random.default_rng((policy.seed, 202, s, keys[p]))
                    x_emb[s, p], x_hid[s, p] = self.model.sample_masks(rng)

        episodes = [SensingEpisode(r.id, [], 0, r.Y.copy()) for r in records]
        if self.collect_details:
            self.details = {r.id: [] for r in records}

        for h in range(H):
            act = np.flatnonzero(n_hours > h)
            A = act.size
            imp_pre = (imp_h[act].copy(), imp_c[act].copy())

            def imputer_step(idx, state):
                z = np.stack([stats.transform(records[p].Z[h]) for p in idx])
                obs = np.stack([records[p].M_obs[h] for p in idx])
                z_in = np.where(obs, z, 0.0)
                e_rows = np.stack([et_imp[p][h] for p in idx])
                mu, sig, new_state = self.imputer.step_numpy(z_in, e_rows, state)
                x_row = np.where(obs, z, mu)
                sig_vec = np.where(obs, 0.0, sig)
                return x_row, sig_vec, mu, sig, obs, new_state

            x_row, sig_vec, mu_std, sig_std, obs_row, imp_state = imputer_step(act, imp_pre)
            ep_rows = np.stack([et_prd[p][h] for p in act])

            p_pre = self._det_step(x_row, ep_rows, det_h[act], det_c[act])[0]
            uw = self._uw_var(x_row, ep_rows, act, P, w_h, w_c, w_emb, w_hid, S_w)

            t0 = time.perf_counter()
            ux_pre, per_var, grads = self._delta_scores(
                x_row, sig_vec, ep_rows, act, P, x_h, x_c, x_emb, x_hid, S_x)
            if policy.kind == "random":
                scores = np.stack([
                    np.random.default_rng((policy.seed, 303, keys[p], h)).random(k)
                    for p in act])
            elif policy.kind == "mc_sampling":
                scores = self._mc_scores(x_row, sig_vec, ep_rows, act, det_h, det_c,
                                         policy.mc_samples, h, [keys[p] for p in act])
            else:
                scores = per_var
            self.decision_seconds += time.perf_counter() - t0
            self.decisions += A

            revealed: list[list[tuple[str, float]]] = [[] for _ in range(A)]
            any_reveal = False
            for a, p in enumerate(act):
                rec = records[p]
                unobs = np.flatnonzero(~rec.M_obs[h] & ~self.vitals)
                m = min(int(quotas[p][h]), unobs.size)
                if m == 0:
                    continue
                chosen = select_variables(scores[a], unobs, m)
                for j in chosen:
                    reveal(rec, h, j)
                    revealed[a].append((self.schema.names[j],
                                        float(rec.Z[h, j])))
                episodes[p].reveal_count += m
                any_reveal = True

            if any_reveal:
                x_row, sig_vec, mu_std, sig_std, obs_row, imp_state = \
                    imputer_step(act, imp_pre)
                p_post = self._det_step(x_row, ep_rows, det_h[act], det_c[act])[0]
                ux_post, _, grads = self._delta_scores(
                    x_row, sig_vec, ep_rows, act, P, x_h, x_c, x_emb, x_hid, S_x)
            else:
                p_post, ux_post = p_pre, ux_pre

            imp_h[act], imp_c[act] = imp_state
            _, dh, dc = self._det_step(x_row, ep_rows, det_h[act], det_c[act])
            det_h[act], det_c[act] = dh, dc
            self._advance_passes(x_row, ep_rows, act, P, w_h, w_c, w_emb, w_hid, S_w)
            self._advance_passes(x_row, ep_rows, act, P, x_h, x_c, x_emb, x_hid, S_x)

            for a, p in enumerate(act):
                episodes[p].hours.append(HourLog(
                    hour=h, risk_pre=float(p_pre[a]), risk_post=float(p_post[a]),
                    ux_pre=float(ux_pre[a]), ux_post=float(ux_post[a]),
                    uw=float(uw[a]), revealed=revealed[a]))
                if self.collect_details:
                    self.details[records[p].id].append({
                        "x_std": x_row[a].copy(),
                        "sigma_std": sig_vec[a].copy(),
                        "grads": grads[:, a, :].copy(),
                        "mu": stats.inverse(mu_std[a]),
                        "sigma": sig_std[a] * stats.std,
                        "observed": obs_row[a].copy(),
                        "risk": float(p_post[a]),
                        "uw": float(uw[a]),
                        "ux": float(ux_post[a]),
                    })
        return episodes

    # -- batched model steps --------------------------------------------------

    def _det_step(self, x_row, ep_rows, h, c):
        ctx = StepContext(h, c, ep_rows)
        with ad.no_grad():
            p, h2, c2 = self.model.step_risk(x_row, ctx)
        return p.data, h2.data, c2.data

    def _pass_rows(self, act, P, S):
        return (act[None, :] + np.arange(S)[:, None] * P).ravel()

    def _uw_var(self, x_row, ep_rows, act, P, w_h, w_c, w_emb, w_hid, S_w):
        rows = self._pass_rows(act, P, S_w)
        A = act.size
        xs = np.tile(x_row, (S_w, 1))
        es = np.tile(ep_rows, (S_w, 1))
        ctx = StepContext(w_h[rows], w_c[rows], es,
                          w_emb[:, act].reshape(S_w * A, -1),
                          w_hid[:, act].reshape(S_w * A, -1))
        with ad.no_grad():
            p, _, _ = self.model.step_risk(xs, ctx)
        return np.var(p.data.reshape(S_w, A), axis=0, ddof=1)

    def _delta_scores(self, x_row, sig_vec, ep_rows, act, P, x_h, x_c,
                      x_emb, x_hid, S_x):
        rows = self._pass_rows(act, P, S_x)
        A = act.size
        xs = np.tile(x_row, (S_x, 1))
        es = np.tile(ep_rows, (S_x, 1))
        ctx = StepContext(x_h[rows], x_c[rows], es,
                          x_emb[:, act].reshape(S_x * A, -1),
                          x_hid[:, act].reshape(S_x * A, -1))
        _, grads = self.model.f_and_grad(xs, ctx)
        grads = grads.reshape(S_x, A, -1)
        totals = np.zeros(A)
        per_var = np.zeros((A, x_row.shape[1]))
        for s in range(S_x):
            v = grads[s] * sig_vec
            pv = v * (v @ self.rho)
            per_var += pv
            totals += np.maximum(pv.sum(axis=1), 0.0)
        return totals / S_x, per_var / S_x, grads

    def _mc_scores(self, x_row, sig_vec, ep_rows, act, det_h, det_c, S,
                   hour, keys):
        """One-at-a-time output variance per unobserved variable."""
        A, k = x_row.shape
        scores = np.zeros((A, k))
        rows_x, rows_var = np.nonzero(sig_vec > 0)
        if rows_x.size == 0:
            return scores
        R = rows_x.size
        base = x_row[rows_x]
        samples = np.repeat(base, S, axis=0)
        draws = np.concatenate([
            np.random.default_rng((self.policy.seed, 404, keys[a], hour))
            .standard_normal(int((rows_x == a).sum()) * S)
            for a in range(A)]) if A else np.empty(0)
        draws = draws * np.repeat(sig_vec[rows_x, rows_var], S)
        flat_var = np.repeat(rows_var, S)
        samples[np.arange(R * S), flat_var] = (
            np.repeat(base[np.arange(R), rows_var], S) + draws)
        es = np.repeat(ep_rows[rows_x], S, axis=0)
        hh = np.repeat(det_h[act][rows_x], S, axis=0)
        cc = np.repeat(det_c[act][rows_x], S, axis=0)
        ctx = StepContext(hh, cc, es)
        with ad.no_grad():
            p, _, _ = self.model.step_risk(samples, ctx)
        var = np.var(p.data.reshape(R, S), axis=1, ddof=1)
        scores[rows_x, rows_var] = var
        return scores

    def _advance_passes(self, x_row, ep_rows, act, P, hs, cs, embs, hids, S):
        rows = self._pass_rows(act, P, S)
        A = act.size
        xs = np.tile(x_row, (S, 1))
        es = np.tile(ep_rows, (S, 1))
        ctx = StepContext(hs[rows], cs[rows], es,
                          embs[:, act].reshape(S * A, -1),
                          hids[:, act].reshape(S * A, -1))
        with ad.no_grad():
            _, h2, c2 = self.model.step_risk(xs, ctx)
        hs[rows] = h2.data
        cs[rows] = c2.data

    @property
    def decision_latency_ms(self) -> float:
        if self.decisions == 0:
            return 0.0
        return 1000.0 * self.decision_seconds / self.decisions


def _te(T, d, t_max):
    from .imputer import time_embedding_matrix
    return time_embedding_matrix(T, d, t_max)


def run_episode(patient: PatientRecord, policy: SensingPolicy,
                imputer: Imputer, predictor: RiskModel, rho: np.ndarray,
                schema: VariableSchema) -> SensingEpisode:
    """Hourly sensing replay for a single patient (batch runner of one)."""
    runner = EpisodeRunner(imputer, predictor, rho, schema, policy)
    return runner.run([patient])[0]


def mc_sampling_policy_score(model: RiskModel, ctx: StepContext,
                             x_std: np.ndarray, sigma_std: np.ndarray,
                             S: int = 100, seed: int = 0) -> np.ndarray:
    """Per-variable one-at-a-time Monte-Carlo output variance.

    Score for unobserved variable i: variance of the risk over S draws of
    x_i alone (all other coordinates pinned at their means).
    """
    if S < 2:
        raise ValueError(f"Monte-Carlo scoring needs S >= 2 samples, got {S}")
    k = x_std.shape[0]
    scores = np.zeros(k)
    free = np.flatnonzero(sigma_std > 0)
    if free.size == 0:
        return scores
    rng = np.random.default_rng(seed)
    R = free.size
    samples = np.repeat(x_std[None, :], R * S, axis=0)
    flat_var = np.repeat(free, S)
    draws = rng.standard_normal(R * S) * sigma_std[flat_var]
    samples[np.arange(R * S), flat_var] = x_std[flat_var] + draws
    ctxR = StepContext(np.repeat(ctx.h, R * S, axis=0),
                       np.repeat(ctx.c, R * S, axis=0),
                       np.repeat(ctx.et, R * S, axis=0))
    with ad.no_grad():
        p, _, _ = model.step_risk(samples, ctxR)
    scores[free] = np.var(p.data.reshape(R, S), axis=1, ddof=1)
    return scores
