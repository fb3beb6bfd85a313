"""End-to-end pipelines: training, trend experiments, and the sensing sweep.

The sweep reproduces the shape of the headline comparisons on synthetic
cohorts: a full (policy x budget x seed) grid of AUROC, residual
uncertainties and per-decision latency, persisted as CSV and resumable
cell by cell.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import (GeneratorConfig, PatientRecord, VariableSchema,
                     default_schema, generate_cohort, split_cohort)
from .imputer import Imputer, ImputerConfig, train_imputer_mean, train_imputer_sigma
from .metrics import auroc, spearman
from .predictor import (AdversarialConfig, PredictorConfig, RiskModel,
                        mean_gamma, prepare_sequences, train_predictor)
from .sensing import EpisodeRunner, SensingPolicy
from .uncertainty import (CorrelationMatrix, estimate_correlations,
                          estimate_residual_correlations)

SWEEP_HEADER = ["policy", "budget", "seed", "auroc", "mean_ux", "mean_uw", "latency_ms"]
DEFAULT_POLICIES = ("random", "mc_sampling", "ras_n", "ras_l", "ras")
DEFAULT_BUDGETS = (0.02, 0.04, 0.06, 0.08)


@dataclass
class ExperimentConfig:
    cohort: GeneratorConfig = field(default_factory=GeneratorConfig)
    imputer: ImputerConfig = field(default_factory=ImputerConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    policies: tuple = DEFAULT_POLICIES
    budgets: tuple = DEFAULT_BUDGETS
    seeds: tuple = (0, 1, 2, 3, 4)
    split_fractions: tuple = (0.7, 0.1, 0.2)
    split_seed: int = 97
    mc_samples: int = 100
    score_masks: int = 3
    uw_samples: int = 15
    out_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if list(self.budgets) != sorted(self.budgets):
            raise ValueError("budgets must be sorted ascending")
        for pol in self.policies:
            if pol not in DEFAULT_POLICIES:
                raise ValueError(f"unknown policy {pol!r}")


@dataclass
class TrainedStack:
    """Everything one seed's evaluation needs."""

    schema: VariableSchema
    imputer: Imputer
    predictors: dict[str, RiskModel]
    rho: CorrelationMatrix
    train: list[PatientRecord]
    validation: list[PatientRecord]
    test: list[PatientRecord]


def train_stack(config: ExperimentConfig, seed: int,
                modes: tuple = ("ras_n", "ras_l", "ras")) -> TrainedStack:
    """Generate the cohort for one seed and train imputer + predictors."""
    schema = default_schema()
    cohort_cfg = replace(config.cohort, seed=config.cohort.seed + seed)
    cohort = generate_cohort(cohort_cfg, schema)
    train, val, test = split_cohort(cohort, config.split_fractions,
                                    seed=config.split_seed)
    icfg = replace(config.imputer, seed=seed)
    imputer = train_imputer_mean(train, schema, icfg)
    imputer = train_imputer_sigma(train, imputer, icfg)
    # propagation uses the correlation of the conditional imputation
    # distribution (residual correlations), not marginal co-movement
    rho = estimate_residual_correlations(train, imputer)
    seqs = prepare_sequences(train, imputer)
    val_seqs = prepare_sequences(val, imputer) if config.predictor.select_best else None
    predictors = {}
    for mode in modes:
        pcfg = replace(config.predictor, seed=seed)
        predictors[mode] = train_predictor(seqs, schema, mode, pcfg,
                                           t_max=imputer.t_max,
                                           stats=imputer.stats,
                                           val_seqs=val_seqs)
    return TrainedStack(schema=schema, imputer=imputer, predictors=predictors,
                        rho=rho, train=train, validation=val, test=test)


def _policy_model(stack: TrainedStack, kind: str) -> RiskModel:
    # the baselines run against the plain classifier
    if kind in ("random", "mc_sampling"):
        return stack.predictors["ras_n"]
    return stack.predictors[kind]


def run_cell(stack: TrainedStack, kind: str, budget: float,
             config: ExperimentConfig, seed: int) -> dict:
    """One sweep cell: episodes over the test split under one policy."""
    policy = SensingPolicy(kind=kind, budget=budget, seed=seed,
                           mc_samples=config.mc_samples,
                           score_masks=config.score_masks,
                           uw_samples=config.uw_samples)
    runner = EpisodeRunner(stack.imputer, _policy_model(stack, kind),
                           stack.rho.rho, stack.schema, policy)
    episodes = runner.run(stack.test)
    scores, labels, uxs, uws = [], [], [], []
    for ep in episodes:
        for log in ep.hours:
            scores.append(log.risk_post)
            uxs.append(log.ux_post)
            uws.append(log.uw)
        labels.extend(ep.labels.astype(bool))
    return {
        "policy": kind,
        "budget": budget,
        "seed": seed,
        "auroc": auroc(scores, labels),
        "mean_ux": float(np.mean(uxs)),
        "mean_uw": float(np.mean(uws)),
        "latency_ms": runner.decision_latency_ms,
    }


# -- trajectory scans (no sensing) -------------------------------------------


def trajectory_scan(stack: TrainedStack, records: list[PatientRecord],
                    model: RiskModel | None = None, seed: int = 0,
                    score_masks: int = 5, uw_samples: int = 20):
    """Per (patient, hour) risk and uncertainty without any reveals."""
    model = model or stack.predictors.get("ras") or next(iter(stack.predictors.values()))
    policy = SensingPolicy(kind="random", budget=0.0, seed=seed,
                           score_masks=score_masks, uw_samples=uw_samples)
    runner = EpisodeRunner(stack.imputer, model, stack.rho.rho, stack.schema, policy)
    return runner.run(records)


def uncertainty_bins_experiment(stack: TrainedStack, records: list[PatientRecord],
                                n_bins: int = 6, model: RiskModel | None = None,
                                out_csv=None) -> list[dict]:
    """Equal-width bins over total U with per-bin AUROC.

    Bins containing a single label class get a null AUROC cell; the run
    continues.
    """
    episodes = trajectory_scan(stack, records, model=model)
    u, p, y = [], [], []
    for ep in episodes:
        for log in ep.hours:
            u.append(log.ux_pre + log.uw)
            p.append(log.risk_pre)
        y.extend(ep.labels.astype(bool))
    u = np.array(u)
    p = np.array(p)
    y = np.array(y)
    lo, hi = u.min(), u.max()
    edges = np.linspace(lo, hi, n_bins + 1)
    rows = []
    for b in range(n_bins):
        sel = (u >= edges[b]) & (u <= edges[b + 1] if b == n_bins - 1
                                 else u < edges[b + 1])
        row = {"bin": b, "u_lo": float(edges[b]), "u_hi": float(edges[b + 1]),
               "count": int(sel.sum()), "mean_u": float(u[sel].mean()) if sel.any() else None}
        if sel.any() and 0 < y[sel].sum() < sel.sum():
            row["auroc"] = auroc(p[sel], y[sel])
        else:
            row["auroc"] = None
        rows.append(row)
    if out_csv:
        _write_dict_csv(out_csv, rows, ["bin", "u_lo", "u_hi", "count", "mean_u", "auroc"])
    return rows


def bins_spearman(rows: list[dict]) -> float:
    """Spearman correlation between bin uncertainty and bin AUROC."""
    pts = [(r["mean_u"], r["auroc"]) for r in rows
           if r["auroc"] is not None and r["mean_u"] is not None]
    if len(pts) < 2:
        raise ValueError("not enough scored bins for a correlation")
    return spearman([p[0] for p in pts], [p[1] for p in pts])


def uncertainty_over_time_experiment(stack: TrainedStack,
                                     records: list[PatientRecord],
                                     model: RiskModel | None = None,
                                     out_csv=None) -> list[dict]:
    """Mean U_x and U_w per hour since admission over still-admitted patients."""
    episodes = trajectory_scan(stack, records, model=model)
    by_hour: dict[int, list[tuple[float, float]]] = {}
    for ep in episodes:
        for log in ep.hours:
            by_hour.setdefault(log.hour, []).append((log.ux_pre, log.uw))
    rows = []
    for hour in sorted(by_hour):
        vals = np.array(by_hour[hour])
        rows.append({"hour": hour, "count": len(vals),
                     "mean_ux": float(vals[:, 0].mean()),
                     "mean_uw": float(vals[:, 1].mean())})
    if out_csv:
        _write_dict_csv(out_csv, rows, ["hour", "count", "mean_ux", "mean_uw"])
    return rows


# -- the sweep ------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return f"{v:.6f}"


def _row_key(row: dict) -> tuple:
    return (row["policy"], _fmt_float(float(row["budget"])), int(row["seed"]))


def read_sweep_csv(path) -> dict[tuple, dict]:
    rows = {}
    if not os.path.exists(path):
        return rows
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            rows[_row_key(row)] = row
    return rows


def write_sweep_csv(path, rows: dict[tuple, dict]) -> None:
    order = {p: i for i, p in enumerate(DEFAULT_POLICIES)}
    items = sorted(rows.values(),
                   key=lambda r: (order.get(r["policy"], 99),
                                  float(r["budget"]), int(r["seed"])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in items:
        writer.writerow([
            r["policy"], _fmt_float(float(r["budget"])), int(r["seed"]),
            _fmt_float(float(r["auroc"])), _fmt_float(float(r["mean_ux"])),
            _fmt_float(float(r["mean_uw"])), _fmt_float(float(r["latency_ms"])),
        ])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def sensing_sweep(config: ExperimentConfig, out_csv, workers: int = 1,
                  progress=None, stack_cache: dict | None = None) -> dict[tuple, dict]:
    """Fill the (policy x budget x seed) grid, skipping completed cells.

    Models are trained once per seed and shared by that seed's cells (the
    cells stay logically independent: frozen models, per-cell rng). A cell
    that fails is recorded with null metrics so the grid always completes.
    Pass `stack_cache` to retain/reuse the per-seed trained stacks.
    """
    rows = read_sweep_csv(out_csv)
    pending: dict[int, list[tuple[str, float]]] = {}
    for seed in config.seeds:
        for pol in config.policies:
            for budget in config.budgets:
                key = (pol, _fmt_float(budget), seed)
                if key not in rows:
                    pending.setdefault(seed, []).append((pol, budget))
    for seed, cells in pending.items():
        if stack_cache is not None and seed in stack_cache:
            stack = stack_cache[seed]
        else:
            stack = train_stack(config, seed)
            if stack_cache is not None:
                stack_cache[seed] = stack
        results = []
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futs = {pool.submit(_safe_cell, stack, pol, budget, config, seed):
                        (pol, budget) for pol, budget in cells}
                for fut in futs:
                    results.append(fut.result())
        else:
            for pol, budget in cells:
                results.append(_safe_cell(stack, pol, budget, config, seed))
                if progress:
                    progress(results[-1])
        for row in results:
            rows[_row_key(row)] = row
        write_sweep_csv(out_csv, rows)
    write_sweep_csv(out_csv, rows)
    return rows


def _safe_cell(stack, pol, budget, config, seed) -> dict:
    try:
        return run_cell(stack, pol, budget, config, seed)
    except Exception as exc:  # noqa: BLE001 - cell failures must not kill the grid
        return {"policy": pol, "budget": budget, "seed": seed,
                "auroc": float("nan"), "mean_ux": float("nan"),
                "mean_uw": float("nan"), "latency_ms": float("nan"),
                "error": str(exc)}


def sweep_checks(rows: dict[tuple, dict], config: ExperimentConfig) -> list[str]:
    """Ordering/monotonicity assertions over a completed sweep table."""
    problems = []
    means: dict[tuple[str, float], float] = {}
    for pol in config.policies:
        for budget in config.budgets:
            cells = [float(rows[(pol, _fmt_float(budget), s)]["auroc"])
                     for s in config.seeds]
            means[(pol, budget)] = float(np.mean(cells))
    for pol in config.policies:
        series = [means[(pol, b)] for b in config.budgets]
        slack = 0.005
        inversions = sum(1 for a, b in zip(series, series[1:]) if b < a - slack)
        if inversions > 1:
            problems.append(f"{pol}: AUROC not monotone in budget: {series}")
    for budget in config.budgets:
        ras = means.get(("ras", budget))
        for other in ("ras_l", "random", "mc_sampling"):
            if ("ras", budget) in means and (other, budget) in means:
                if ras < means[(other, budget)]:
                    problems.append(
                        f"budget {budget}: ras ({ras:.4f}) < {other} "
                        f"({means[(other, budget)]:.4f})")
    return problems


def _write_dict_csv(path, rows: list[dict], header: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if row.get(h) is None else row.get(h) for h in header])


# -- latency micro-benchmark ------------------------------------------------------


def decision_latency_benchmark(stack: TrainedStack, record: PatientRecord,
                               mc_samples: int = 100, score_masks: int = 3,
                               repeats: int = 20, seed: int = 0) -> dict:
    """Per-decision wall clock of gradient scoring vs one-at-a-time sampling.

    Both score the same single patient-hour, unbatched, on this process's
    CPU. Returns mean milliseconds per decision for each method.
    """
    from .predictor import FrozenStep
    from .sensing import mc_sampling_policy_score
    from .uncertainty import propagated_uncertainty_delta

    model = stack.predictors.get("ras") or next(iter(stack.predictors.values()))
    imputer = stack.imputer
    dist = imputer.impute(record)
    i = record.n - 1
    X_std = imputer.stats.transform(dist.X[:i + 1])
    sigma_std = np.where(record.M_obs[i], 0.0, dist.sigma[i] / imputer.stats.std)
    rho = stack.rho.rho

    seeds = np.random.SeedSequence(seed).spawn(score_masks)
    steps = [FrozenStep(model, model.context_at(
                 X_std, record.T, i,
                 masks=model.sample_masks(np.random.default_rng(s))))
             for s in seeds]
    plain_ctx = model.context_at(X_std, record.T, i)

    t0 = time.perf_counter()
    for _ in range(repeats):
        for step in steps:
            propagated_uncertainty_delta(step, X_std[i], sigma_std, rho)
    grad_ms = 1000.0 * (time.perf_counter() - t0) / repeats

    t0 = time.perf_counter()
    for r in range(repeats):
        mc_sampling_policy_score(model, plain_ctx, X_std[i], sigma_std,
                                 S=mc_samples, seed=r)
    mc_ms = 1000.0 * (time.perf_counter() - t0) / repeats
    return {"gradient_ms": grad_ms, "mc_sampling_ms": mc_ms}
