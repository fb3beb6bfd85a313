"""Output-variance quantification and its decomposition.

Total predictive variance splits into U_x (propagated from the imputation
distribution of unobserved inputs) and U_w (model-parameter uncertainty via
Monte-Carlo dropout). U_x is computed in closed form from the input
gradient and the imputation sigmas (delta method); a joint-sampling
Monte-Carlo estimator serves as the reference implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cohort import PatientRecord, VariableSchema
from .imputer import Imputer
from .predictor import FrozenStep, RiskModel


@dataclass
class CorrelationMatrix:
    """Pairwise variable correlations with co-observation support counts."""

    rho: np.ndarray
    support: np.ndarray

    def save(self, path) -> None:
        ad.save_arrays(path, {"rho": self.rho, "support": self.support.astype(float)})

    @classmethod
    def load(cls, path) -> "CorrelationMatrix":
        arrays = ad.load_arrays(path)
        return cls(rho=arrays["rho"], support=arrays["support"].astype(int))


@dataclass
class UncertaintyReport:
    """One collection's variance decomposition.

    per_variable holds the expected propagated-variance reduction from
    observing each currently-unobserved variable (raw, unclamped); observed
    variables score exactly 0.
    """

    U: float
    U_x: float
    U_w: float
    per_variable: np.ndarray
    samples_used: int

    def to_json(self, schema: VariableSchema) -> str:
        return json.dumps({
            "U": self.U,
            "U_x": self.U_x,
            "U_w": self.U_w,
            "per_variable": {name: float(s) for name, s
                             in zip(schema.names, self.per_variable)},
            "samples_used": self.samples_used,
        })


MIN_SUPPORT = 30  # pairs co-observed fewer times are shrunk to zero


def estimate_correlations(cohort: list[PatientRecord]) -> CorrelationMatrix:
    """Pearson correlations over same-collection co-observed pairs.

    Pairs with support below MIN_SUPPORT shrink to 0; the result is then
    repaired to be positive semidefinite with a unit diagonal.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    Z = np.concatenate([rec.Z for rec in cohort], axis=0)
    M = np.concatenate([rec.M_obs for rec in cohort], axis=0)
    k = Z.shape[1]
    rho = np.eye(k)
    support = np.zeros((k, k), dtype=int)
    np.fill_diagonal(support, M.sum(axis=0))
    for i in range(k):
        for j in range(i + 1, k):
            both = M[:, i] & M[:, j]
            n = int(both.sum())
            support[i, j] = support[j, i] = n
            if n < 2:
                continue
            xi = Z[both, i]
            xj = Z[both, j]
            sx = xi.std()
            sy = xj.std()
            if sx < 1e-12 or sy < 1e-12:
                continue
            r = float(np.mean((xi - xi.mean()) * (xj - xj.mean())) / (sx * sy))
            if n >= MIN_SUPPORT:
                rho[i, j] = rho[j, i] = r
    rho = _repair_psd(rho)
    return CorrelationMatrix(rho=rho, support=support)


def estimate_residual_correlations(cohort: list[PatientRecord],
                                   imputer: Imputer, mask_seed: int = 424242,
                                   fraction: float = 0.35,
                                   rounds: int = 3) -> CorrelationMatrix:
    """Correlations of standardized imputation residuals.

    Propagation needs the joint law of the *conditional* imputation
    distribution, so the relevant rho is measured on (z - mu)/sigma over
    cells hidden together at the same collection, not on raw marginal
    values (whose co-movement the imputer already explains away). Repeated
    masking rounds grow the co-hidden support; weakly supported pairs
    shrink to zero exactly like the marginal estimator.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    k = cohort[0].Z.shape[1]
    rng = np.random.default_rng(mask_seed)
    residual_rows = []
    for _ in range(rounds):
        for rec in cohort:
            maskable = rec.M_obs.copy()
            plan = maskable & (rng.random(rec.Z.shape) < fraction)
            if plan.sum() < 2:
                continue
            hidden = rec.copy()
            hidden.Z = np.where(plan, np.nan, hidden.Z)
            hidden.M_obs = hidden.M_obs & ~plan
            dist = imputer.impute(hidden)
            resid = np.where(plan, (rec.Z - dist.mu) / dist.sigma, np.nan)
            residual_rows.append(resid)
    R = np.concatenate(residual_rows, axis=0)
    M = ~np.isnan(R)
    rho = np.eye(k)
    support = np.zeros((k, k), dtype=int)
    np.fill_diagonal(support, M.sum(axis=0))
    for i in range(k):
        for j in range(i + 1, k):
            both = M[:, i] & M[:, j]
            n = int(both.sum())
            support[i, j] = support[j, i] = n
            if n < MIN_SUPPORT:
                continue
            xi, xj = R[both, i], R[both, j]
            sx, sy = xi.std(), xj.std()
            if sx < 1e-12 or sy < 1e-12:
                continue
            r = float(np.mean((xi - xi.mean()) * (xj - xj.mean())) / (sx * sy))
            rho[i, j] = rho[j, i] = r
    return CorrelationMatrix(rho=_repair_psd(rho), support=support)


def _repair_psd(rho: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(rho)
    if vals.min() >= -tol:
        return rho
    vals = np.clip(vals, 0.0, None)
    fixed = (vecs * vals) @ vecs.T
    d = np.sqrt(np.clip(np.diag(fixed), 1e-12, None))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return fixed


def propagate_linear(w: np.ndarray, sigma: np.ndarray, rho: np.ndarray) -> float:
    """Exact output variance of w.x under per-variable sigma and correlation rho."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    v = np.asarray(w, dtype=float) * sigma
    return float(v @ rho @ v)


def delta_scores(grad: np.ndarray, sigma: np.ndarray, rho: np.ndarray):
    """Propagated variance and per-variable reduction from a local gradient.

    Score for variable i: g_i^2 s_i^2 + sum_{j != i} g_i g_j rho_ij s_i s_j,
    which is v_i * (rho v)_i for v = g * s. The scores sum to the full
    bilinear form, so the total is their sum (clamped at zero against
    numerical noise); raw per-variable scores are not clamped.
    """
    v = grad * sigma
    per_var = v * (rho @ v)
    total = max(float(per_var.sum()), 0.0)
    return total, per_var


def propagated_uncertainty_delta(step, x: np.ndarray, sigma: np.ndarray,
                                 rho: np.ndarray):
    """Delta-method U_x at one collection plus per-variable reductions.

    `step` maps input rows to (values, gradients); see predictor.FrozenStep.
    """
    _, grad = step(np.asarray(x, dtype=float)[None, :])
    g = grad[0]
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite input gradient")
    return delta_scores(g, sigma, rho)


def epistemic_uncertainty(model: RiskModel, X_std: np.ndarray, T: np.ndarray,
                          S: int = 30, seed=0) -> float:
    """Variance of the final-collection risk over S dropout passes at x = mu."""
    if S < 2:
        raise ValueError(f"epistemic estimate needs S >= 2 samples, got {S}")
    seeds = np.random.SeedSequence(seed).spawn(S)
    outs = np.empty(S)
    n = X_std.shape[0]
    for s in range(S):
        rng = np.random.default_rng(seeds[s])
        masks = model.sample_masks(rng)
        ctx = model.context_at(X_std, T, n - 1, masks=masks)
        with ad.no_grad():
            p, _, _ = model.step_risk(X_std[n - 1:n], ctx)
        outs[s] = p.data[0]
    return float(np.var(outs, ddof=1))


def _factor_covariance(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-6 * max(vals.max(), 1.0):
        raise np.linalg.LinAlgError(
            "covariance is not positive semidefinite after repair"
        )
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def propagated_uncertainty_mc(forward, x: np.ndarray, sigma: np.ndarray,
                              rho: np.ndarray, S: int = 10_000,
                              seed: int = 0) -> float:
    """Monte-Carlo U_x: sample unobserved coordinates jointly, forward each.

    `forward` maps input rows (S,k) to outputs (S,); a FrozenStep works
    (its gradients are ignored).
    """
    if S < 2:
        raise ValueError(f"Monte-Carlo estimate needs S >= 2 samples, got {S}")
    sigma = np.asarray(sigma, dtype=float)
    x = np.asarray(x, dtype=float)
    free = np.flatnonzero(sigma > 0)
    if free.size == 0:
        return 0.0
    sub = (np.outer(sigma[free], sigma[free])
           * rho[np.ix_(free, free)])
    L = _factor_covariance(sub)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((S, free.size))
    rows = np.repeat(x[None, :], S, axis=0)
    rows[:, free] += z @ L.T
    out = forward(rows)
    if isinstance(out, tuple):
        out = out[0]
    return float(np.var(out, ddof=1))


def full_report(patient: PatientRecord, model: RiskModel, imputer: Imputer,
                rho: np.ndarray, S_w: int = 30, S_x: int = 10,
                hour: int | None = None, seed: int = 0) -> UncertaintyReport:
    """Variance decomposition at one collection (default: the latest).

    U_x and the per-variable reductions average the delta-method estimate
    over S_x dropout masks; U_w comes from S_w dropout passes.
    """
    dist = imputer.impute(patient)
    i = patient.n - 1 if hour is None else hour
    if not 0 <= i < patient.n:
        raise ValueError(f"hour {hour} outside record of length {patient.n}")
    X_std = imputer.stats.transform(dist.X[:i + 1])
    sigma_std = np.where(patient.M_obs[i], 0.0,
                         dist.sigma[i] / imputer.stats.std)
    T = patient.T[:i + 1]

    mask_seeds = np.random.SeedSequence((seed, 1)).spawn(S_x)
    total = 0.0
    per_var = np.zeros(patient.Z.shape[1])
    for s in range(S_x):
        masks = model.sample_masks(np.random.default_rng(mask_seeds[s]))
        ctx = model.context_at(X_std, T, i, masks=masks)
        ux, pv = propagated_uncertainty_delta(FrozenStep(model, ctx),
                                              X_std[i], sigma_std, rho)
        total += ux
        per_var += pv
    U_x = total / S_x
    per_var /= S_x

    U_w = epistemic_uncertainty(model, X_std, T, S=S_w, seed=(seed, 2))
    return UncertaintyReport(U=U_x + U_w, U_x=U_x, U_w=U_w,
                             per_variable=per_var, samples_used=S_w + S_x)
