"""Hourly sepsis-onset risk model on imputed sequences.

Same embedding/LSTM shape as the imputer (independently learned), a sigmoid
risk head, and variational dropout (one mask per pass, reused across steps)
for Monte-Carlo parameter sampling. Training modes:

  ras_n  - classification loss only
  ras_l  - classification + single-sample Taylor-residual penalty
  ras    - classification + inner-maximized Taylor-residual penalty
           (perturbation ascent inside the +-2 sigma box)

The Taylor residual |f(x+d) - f(x) - d.grad f(x)| is always defined against
the current collection with the recurrent state held fixed; inside the
training loss the reference gradient is treated as a constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .cohort import PatientRecord, VariableSchema
from .imputer import (ImputationDistribution, Imputer, Standardizer,
                      time_embedding_matrix)

P_CLAMP = 1e-7  # probability clamp inside the cross-entropy

TRAIN_MODES = ("ras_n", "ras_l", "ras")


@dataclass(frozen=True)
class AdversarialConfig:
    """Knobs for the local-linearity term; defaults are the tuned optimum."""

    alpha: float = 0.5
    s_adv: float = 1e-3
    n_adv: int = 15
    lr: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.s_adv <= 0 or self.lr <= 0 or self.n_adv < 0:
            raise ValueError("adversarial step size, steps and lr must be positive")


@dataclass
class PredictorConfig:
    d: int = 32
    hidden: int = 64
    dropout: float = 0.2
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    # keep the epoch snapshot with the best validation AUROC (needs val_seqs)
    select_best: bool = False
    adv: AdversarialConfig = field(default_factory=AdversarialConfig)


@dataclass
class ImputedSequence:
    """One admission prepared for the risk model (standardized units)."""

    pid: str
    X_std: np.ndarray      # (n,k) observed values / imputed means
    sigma_std: np.ndarray  # (n,k) imputation sigma, exactly 0 where observed
    T: np.ndarray
    Y: np.ndarray

    @property
    def n(self) -> int:
        return self.X_std.shape[0]


def prepare_sequences(cohort: list[PatientRecord], imputer: Imputer) -> list[ImputedSequence]:
    out = []
    for rec in cohort:
        dist = imputer.impute(rec)
        x_std = imputer.stats.transform(dist.X)
        sig_std = np.where(rec.M_obs, 0.0, dist.sigma / imputer.stats.std)
        out.append(ImputedSequence(
            pid=rec.id, X_std=x_std, sigma_std=sig_std,
            T=rec.T.copy(), Y=rec.Y.astype(np.float64),
        ))
    return out


@dataclass
class StepContext:
    """Everything a one-collection evaluation needs besides x itself."""

    h: np.ndarray
    c: np.ndarray
    et: np.ndarray
    emb_mask: np.ndarray | None = None
    hid_mask: np.ndarray | None = None


class RiskModel:
    """Sequence risk model; frozen instances are safe for concurrent reads."""

    def __init__(self, schema: VariableSchema, d: int = 32, hidden: int = 64,
                 dropout: float = 0.2, seed: int = 0, mode: str = "ras"):
        if mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {mode!r}")
        self.schema = schema
        self.d = d
        self.hidden = hidden
        self.dropout_rate = dropout
        self.mode = mode
        self.stats: Standardizer | None = None
        self.t_max: float = 1.0
        self.adv = AdversarialConfig()

        k = schema.k
        rng = np.random.default_rng(seed)
        H = hidden
        self.params: dict[str, Value] = {
            "w_e": Value(ad.uniform_init(rng, (k + 2 * d, d)), requires_grad=True),
            "b_e": Value(np.zeros(d), requires_grad=True),
            "w_x": Value(ad.uniform_init(rng, (d, 4 * H)), requires_grad=True),
            "w_h": Value(ad.uniform_init(rng, (H, 4 * H)), requires_grad=True),
            "b_l": Value(np.zeros(4 * H), requires_grad=True),
            "w_s": Value(ad.uniform_init(rng, (H, 1)), requires_grad=True),
            "b_s": Value(np.zeros(1), requires_grad=True),
        }
        self.params["b_l"].data[H:2 * H] = 1.0

    # -- building blocks ----------------------------------------------------

    def sample_masks(self, rng: np.random.Generator, batch: int = 1):
        """One variational dropout mask pair, reused across all steps of a pass."""
        emb = ad.dropout_mask((batch, self.d), self.dropout_rate, rng)
        hid = ad.dropout_mask((batch, self.hidden), self.dropout_rate, rng)
        return emb, hid

    def step_risk(self, x, ctx: StepContext):
        """p, h', c' for one collection. x: (R,k) Value or array."""
        xe = ad.concat([ad.as_value(x), ad.as_value(ctx.et)], axis=-1)
        e = ad.dense(xe, self.params["w_e"], self.params["b_e"])
        if ctx.emb_mask is not None:
            e = e * ctx.emb_mask
        h2, c2 = ad.lstm_step(e, Value(ctx.h), Value(ctx.c),
                              self.params["w_x"], self.params["w_h"],
                              self.params["b_l"])
        hd = h2 * ctx.hid_mask if ctx.hid_mask is not None else h2
        logit = ad.dense(hd, self.params["w_s"], self.params["b_s"])
        p = ad.sigmoid(ad.reshape(logit, (logit.data.shape[0],)))
        return p, h2, c2

    def step_risk_with_input_grad(self, x_rows: np.ndarray, ctx: StepContext):
        """One collection's risk plus its input gradient, both on the tape.

        The gradient is constructed symbolically (the hand-written adjoint
        of the step), so losses built from it differentiate through the
        gradient itself - the second-order term the local-linearity penalty
        needs. The recurrent state is a constant here, matching the
        current-collection semantics of the propagation machinery.
        """
        p = self.params
        R = x_rows.shape[0]
        H = self.hidden
        k = self.schema.k
        emb_mask = ctx.emb_mask if ctx.emb_mask is not None else 1.0
        hid_mask = ctx.hid_mask if ctx.hid_mask is not None else 1.0

        xe = np.concatenate([x_rows, ctx.et], axis=-1)
        pre_e = ad.dense(Value(xe), p["w_e"], p["b_e"])
        e = pre_e * emb_mask
        gates = ad.matmul(e, p["w_x"]) + Value(ctx.h) @ p["w_h"] + p["b_l"]
        i_pre, f_pre, g_pre, o_pre = ad.chunk(gates, 4, axis=-1)
        si, sf, so = ad.sigmoid(i_pre), ad.sigmoid(f_pre), ad.sigmoid(o_pre)
        tg = ad.tanh(g_pre)
        c1 = sf * ctx.c + si * tg
        tc = ad.tanh(c1)
        h1 = so * tc
        hd = h1 * hid_mask
        logit = ad.dense(hd, p["w_s"], p["b_s"])
        prob = ad.sigmoid(ad.reshape(logit, (R,)))

        # adjoint of the step w.r.t. x, written as taped operations
        dp = ad.reshape(prob * (1.0 - prob), (R, 1))
        g_h1 = dp * ad.transpose(p["w_s"]) * hid_mask
        g_c1 = g_h1 * so * (1.0 - tc * tc)
        g_gates = ad.concat([
            g_c1 * tg * (si * (1.0 - si)),
            g_c1 * ctx.c * (sf * (1.0 - sf)),
            g_c1 * si * (1.0 - tg * tg),
            g_h1 * tc * (so * (1.0 - so)),
        ], axis=-1)
        g_e = ad.matmul(g_gates, ad.transpose(p["w_x"])) * emb_mask
        g_xe = ad.matmul(g_e, ad.transpose(p["w_e"]))
        g_x = ad.narrow(g_xe, 1, 0, k)
        return prob, g_x

    def context_at(self, X_std: np.ndarray, T: np.ndarray, i: int,
                   masks=None) -> StepContext:
        """Recurrent state just before collection i (consumes rows 0..i-1)."""
        et = time_embedding_matrix(T, self.d, self.t_max)
        emb_mask, hid_mask = masks if masks is not None else (None, None)
        h = np.zeros((1, self.hidden))
        c = np.zeros((1, self.hidden))
        with ad.no_grad():
            for t in range(i):
                ctx = StepContext(h, c, et[t:t + 1], emb_mask, hid_mask)
                _, h2, c2 = self.step_risk(X_std[t:t + 1], ctx)
                h, c = h2.data, c2.data
        return StepContext(h, c, et[i:i + 1], emb_mask, hid_mask)

    def f_and_grad(self, x_rows: np.ndarray, ctx: StepContext):
        """Risk and its gradient w.r.t. each row of x (standardized units)."""
        x = Value(x_rows, requires_grad=True)
        p, _, _ = self.step_risk(x, ctx)
        ad.backward(ad.vsum(p))
        ad.zero_grads(self.params)
        return p.data.copy(), x.grad.copy()

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        ad.save_arrays(path, {k: v.data for k, v in self.params.items()})
        meta = {
            "schema_hash": self.schema.hash(),
            "d": self.d,
            "hidden": self.hidden,
            "dropout": self.dropout_rate,
            "mode": self.mode,
            "t_max": self.t_max,
            "adv": {"alpha": self.adv.alpha, "s_adv": self.adv.s_adv,
                    "n_adv": self.adv.n_adv, "lr": self.adv.lr},
            "stats": self.stats.to_json() if self.stats else None,
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)

    @classmethod
    def load(cls, path, schema: VariableSchema) -> "RiskModel":
        with open(str(path) + ".json", encoding="utf-8") as f:
            meta = json.load(f)
        if meta["schema_hash"] != schema.hash():
            raise ValueError("schema hash mismatch: snapshot was trained on a different schema")
        model = cls(schema, d=meta["d"], hidden=meta["hidden"],
                    dropout=meta["dropout"], mode=meta["mode"])
        arrays = ad.load_arrays(path)
        for k, v in model.params.items():
            v.data = arrays[k]
        model.t_max = meta["t_max"]
        model.adv = AdversarialConfig(**meta["adv"])
        model.stats = Standardizer.from_json(meta["stats"])
        return model


# -- inference ------------------------------------------------------------------


def predict_risk(dist: ImputationDistribution, T: np.ndarray, model: RiskModel,
                 dropout_mode: bool = False, seed: int = 0) -> np.ndarray:
    """Per-collection risks in (0,1); deterministic when dropout is off."""
    X = dist.X if isinstance(dist, ImputationDistribution) else np.asarray(dist)
    if X.shape[0] != len(T):
        raise ValueError(f"length mismatch: X has {X.shape[0]} rows, T has {len(T)}")
    X_std = model.stats.transform(X)
    et = time_embedding_matrix(np.asarray(T, dtype=float), model.d, model.t_max)
    masks = (None, None)
    if dropout_mode:
        masks = model.sample_masks(np.random.default_rng(seed))
    h = np.zeros((1, model.hidden))
    c = np.zeros((1, model.hidden))
    out = np.empty(X.shape[0])
    with ad.no_grad():
        for t in range(X.shape[0]):
            ctx = StepContext(h, c, et[t:t + 1], masks[0], masks[1])
            p, h2, c2 = model.step_risk(X_std[t:t + 1], ctx)
            out[t] = p.data[0]
            h, c = h2.data, c2.data
    return np.clip(out, 1e-12, 1.0 - 1e-12)


def input_gradient(model: RiskModel, X_std: np.ndarray, T: np.ndarray,
                   index: int | None = None, masks=None) -> np.ndarray:
    """Gradient of the current collection's risk w.r.t. its k inputs.

    Sensing only ever acts on the latest collection, so any other index is
    rejected. Units are standardized (matching the sigma vectors used for
    propagation).
    """
    n = X_std.shape[0]
    if index is None:
        index = n - 1
    if index != n - 1:
        raise ValueError(
            f"input gradient is defined for the current collection only "
            f"(index {n - 1}), got {index}"
        )
    ctx = model.context_at(X_std, T, index, masks=masks)
    _, grad = model.f_and_grad(X_std[index:index + 1], ctx)
    g = grad[0]
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite input gradient")
    return g


def bce_loss(p, y) -> float:
    """(1/n) sum of -y log p - (1-y) log(1-p), with p clamped away from {0,1}."""
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


class FrozenStep:
    """The model's current-collection function with the history held fixed.

    Callable on a batch of candidate inputs: rows (R,k) -> (risks (R,),
    gradients (R,k)). This is the object the Taylor-residual machinery
    works on; tests exercise the same machinery with plain functions.
    """

    def __init__(self, model: RiskModel, ctx: StepContext):
        self.model = model
        self.ctx = ctx

    def _expand(self, n: int) -> StepContext:
        ctx = self.ctx
        return StepContext(np.repeat(ctx.h, n, axis=0),
                           np.repeat(ctx.c, n, axis=0),
                           np.repeat(ctx.et, n, axis=0),
                           _rep(ctx.emb_mask, n), _rep(ctx.hid_mask, n))

    def __call__(self, rows: np.ndarray):
        return self.model.f_and_grad(rows, self._expand(rows.shape[0]))

    def forward(self, rows: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            p, _, _ = self.model.step_risk(rows, self._expand(rows.shape[0]))
        return p.data.copy()


def adversarial_residual(step, x: np.ndarray, delta: np.ndarray,
                         sigma: np.ndarray) -> float:
    """|f(x+d) - f(x) - d . grad f(x)| for one admissible perturbation.

    `step` maps input rows to (values, gradients); see FrozenStep.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(np.abs(delta) > 2.0 * np.asarray(sigma) + 1e-12):
        raise ValueError("perturbation leaves the +-2 sigma box")
    f, grad = step(np.stack([x, x + delta]))
    return float(abs(f[1] - f[0] - delta @ grad[0]))


def _rep(mask, n):
    return None if mask is None else np.repeat(mask, n, axis=0)


def local_linearity(step, x: np.ndarray, sigma: np.ndarray,
                    n_restarts: int = 10, n_steps: int = 15,
                    seed: int = 0) -> float:
    """Estimated max Taylor residual over the +-2 sigma box.

    Projected sign-ascent from `n_restarts` starts placed at seeded
    fractions of the box (so nested boxes get nested starts); the estimate
    is the max residual over every iterate visited. The exact maximum is
    intractable; this estimator is deliberately conservative-from-below.
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    bound = 2.0 * sigma
    if not np.any(bound > 0):
        return 0.0
    R = n_restarts
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(R, bound.size))
    delta = u * bound

    step_size = 0.5 * bound
    best = 0.0
    for it in range(n_steps + 1):
        rows = np.vstack([x[None, :], x[None, :] + delta])
        f, g = step(rows)
        res = f[1:] - f[0] - delta @ g[0]
        best = max(best, float(np.max(np.abs(res))))
        if it == n_steps:
            break
        direction = np.sign(res)[:, None] * (g[1:] - g[0][None, :])
        delta = np.clip(delta + step_size * np.sign(direction), -bound, bound)
    return best


# -- training ---------------------------------------------------------------------


def _pad_seqs(batch: list[ImputedSequence], d: int, t_max: float):
    B = len(batch)
    T = max(s.n for s in batch)
    k = batch[0].X_std.shape[1]
    x = np.zeros((B, T, k))
    sg = np.zeros((B, T, k))
    et = np.zeros((B, T, 2 * d))
    y = np.zeros((B, T))
    valid = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(batch):
        n = s.n
        x[b, :n] = s.X_std
        sg[b, :n] = s.sigma_std
        et[b, :n] = time_embedding_matrix(s.T, d, t_max)
        y[b, :n] = s.Y
        valid[b, :n] = True
    return x, sg, et, y, valid


def train_predictor(seqs: list[ImputedSequence], schema: VariableSchema,
                    mode: str, config: PredictorConfig | None = None,
                    t_max: float | None = None, stats: Standardizer | None = None,
                    val_seqs: list[ImputedSequence] | None = None,
                    metrics_path=None) -> RiskModel:
    """Train a risk model in one of the three modes.

    With alpha = 1 the residual penalty carries zero weight and is skipped
    entirely, so 'ras' degenerates to exactly the 'ras_n' trajectory.
    """
    config = config or PredictorConfig()
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if not seqs:
        raise ValueError("training set is empty")
    adv = config.adv

    model = RiskModel(schema, d=config.d, hidden=config.hidden,
                      dropout=config.dropout, seed=config.seed, mode=mode)
    model.adv = adv
    model.t_max = t_max if t_max is not None else float(max(s.T[-1] for s in seqs))
    model.stats = stats if stats is not None else Standardizer(
        np.zeros(schema.k), np.ones(schema.k))
    # start the head at the label prior so training skips the collapse phase
    pos_rate = float(np.mean(np.concatenate([s.Y for s in seqs])))
    pos_rate = min(max(pos_rate, 1e-3), 1 - 1e-3)
    model.params["b_s"].data[0] = np.log(pos_rate / (1.0 - pos_rate))

    rng = np.random.default_rng((config.seed, 11))
    rng_adv = np.random.default_rng((config.seed, 12))
    opt = ad.Adam(list(model.params.values()), lr=adv.lr)
    adversarial = mode in ("ras", "ras_l") and adv.alpha < 1.0
    metrics: list[dict] = []
    best = None

    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        epoch_cls, epoch_adv, nb = 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [seqs[i] for i in order[start:start + config.batch_size]]
            x, sg, et, y, valid = _pad_seqs(batch, config.d, model.t_max)
            B, T, k = x.shape
            emb_mask, hid_mask = model.sample_masks(rng, batch=B)

            h = Value(np.zeros((B, model.hidden)))
            c = Value(np.zeros((B, model.hidden)))
            loss_cls = None
            h_prev = np.empty((B, T, model.hidden))
            c_prev = np.empty((B, T, model.hidden))
            for t in range(T):
                h_prev[:, t] = h.data
                c_prev[:, t] = c.data
                xe = ad.concat([Value(x[:, t]), Value(et[:, t])], axis=-1)
                e = ad.dense(xe, model.params["w_e"], model.params["b_e"]) * emb_mask
                h, c = ad.lstm_step(e, h, c, model.params["w_x"],
                                    model.params["w_h"], model.params["b_l"])
                logit = ad.dense(h * hid_mask, model.params["w_s"], model.params["b_s"])
                p = ad.sigmoid(ad.reshape(logit, (B,)))
                pc = ad.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
                yt = y[:, t]
                nll = -yt * ad.log(pc) - (1.0 - yt) * ad.log(1.0 - pc)
                term = ad.vsum(nll * valid[:, t].astype(float))
                loss_cls = term if loss_cls is None else loss_cls + term
            loss_cls = loss_cls * (1.0 / valid.sum())

            if adversarial:
                rows = valid.nonzero()
                x0 = x[rows]
                sig0 = sg[rows]
                ctx_rows = StepContext(
                    h_prev[rows], c_prev[rows], et[rows],
                    emb_mask[rows[0]], hid_mask[rows[0]])
                f0, v = model.f_and_grad(x0, ctx_rows)
                bound = 2.0 * sig0
                delta = np.clip(rng_adv.normal(0.0, sig0), -bound, bound)
                if mode == "ras":
                    for _ in range(adv.n_adv):
                        fd, gd = model.f_and_grad(x0 + delta, ctx_rows)
                        inner = fd - f0 - np.sum(delta * v, axis=1)
                        delta = delta + adv.s_adv * np.sign(inner)[:, None] * (gd - v)
                        delta = np.clip(delta, -bound, bound)
                # the penalty differentiates through the input gradient too
                # (symbolic adjoint), so linearity cannot be bought by
                # flattening the model's response alone
                p_adv, _, _ = model.step_risk(Value(x0 + delta), ctx_rows)
                p_base, g_base = model.step_risk_with_input_grad(x0, ctx_rows)
                lin = ad.vsum(g_base * delta, axis=1)
                loss_adv = ad.vmean(ad.absolute(p_adv - p_base - lin))
                loss = loss_cls * adv.alpha + loss_adv * (1.0 - adv.alpha)
                epoch_adv += float(loss_adv.data)
            else:
                loss = loss_cls
            epoch_cls += float(loss_cls.data)
            nb += 1

            opt.zero_grad()
            ad.backward(loss)
            opt.step()

        entry = {"epoch": epoch, "loss_cls": epoch_cls / nb,
                 "loss_adv": epoch_adv / nb if adversarial else 0.0}
        if val_seqs:
            entry["val_auroc"] = _auroc_on(model, val_seqs)
            if config.select_best and (best is None
                                       or entry["val_auroc"] > best[0]):
                best = (entry["val_auroc"], epoch,
                        {k: v.data.copy() for k, v in model.params.items()})
            entry["mean_gamma"] = mean_gamma(model, val_seqs[:10], n_restarts=3,
                                             n_steps=8, seed=epoch)
        metrics.append(entry)

    if config.select_best and best is not None:
        for k, v in model.params.items():
            v.data = best[2][k]
        model.selected_epoch = best[1]
    if metrics_path:
        with open(metrics_path, "w", encoding="utf-8") as f:
            for entry in metrics:
                f.write(json.dumps(entry) + "\n")
    model.metrics = metrics
    return model


def _risks_for(model: RiskModel, seq: ImputedSequence) -> np.ndarray:
    et = time_embedding_matrix(seq.T, model.d, model.t_max)
    h = np.zeros((1, model.hidden))
    c = np.zeros((1, model.hidden))
    out = np.empty(seq.n)
    with ad.no_grad():
        for t in range(seq.n):
            ctx = StepContext(h, c, et[t:t + 1])
            p, h2, c2 = model.step_risk(seq.X_std[t:t + 1], ctx)
            out[t] = p.data[0]
            h, c = h2.data, c2.data
    return out


def _auroc_on(model: RiskModel, seqs: list[ImputedSequence]) -> float:
    from .metrics import auroc
    scores, labels = [], []
    for s in seqs:
        scores.extend(_risks_for(model, s))
        labels.extend(s.Y.astype(bool))
    if not (any(labels) and not all(labels)):
        return float("nan")
    return auroc(scores, labels)


def mean_gamma(model: RiskModel, seqs: list[ImputedSequence],
               n_restarts: int = 10, n_steps: int = 15, seed: int = 0) -> float:
    """Mean local-linearity measure at the final collection of each sequence."""
    vals = []
    for i, s in enumerate(seqs):
        ctx = model.context_at(s.X_std, s.T, s.n - 1)
        vals.append(local_linearity(FrozenStep(model, ctx), s.X_std[-1],
                                    s.sigma_std[-1], n_restarts=n_restarts,
                                    n_steps=n_steps, seed=seed * 7919 + i))
    return float(np.mean(vals))
