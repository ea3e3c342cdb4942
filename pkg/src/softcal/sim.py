"""Monte Carlo study harness: generators, replicate loop and metrics.

The study population is clustered: K clusters of N_i units, unit
covariates (1, x1, x2) with x1 ~ U[-0.75, 0.75] and x2 ~ N(0, 1),
outcome

    linear:    y = x1 + x2 + lambda1 * a_i + e
    nonlinear: y = x1 + x2 + x1^2 + x2^2 + 0.1 x3* + 0.1 x4*
               + lambda1 * a_i + e

with cluster effects a_i ~ N(0,1), errors e ~ N(0,1), and x3*, x4* the
standardized exponentials of x1, x2.  Response indicators follow a
logistic model with linear predictor -0.25 + x1 + x2 + lambda2 * z_i,
where z_i ~ N(0,1) is a cluster-level selection effect, so selection and
outcome share cluster structure but stay conditionally independent given
covariates and effects.  Sampling is two-stage: k clusters drawn without
replacement (weight K/k), then n_i units per cluster (weight N_i / n_i).

Each replicate draws population, response and sample from an
independent RNG stream keyed by (seed, replicate), applies the
requested estimator battery, and records the error against the realized
population mean plus a normal-interval coverage hit; failures are
counted and excluded, and the run aborts if more than 5 percent fail.
Cluster designs use the between-cluster pseudo-value variance for
intervals.  The causal variant assigns treatment from a logistic model
sharing the outcome's cluster effect and estimates the average
treatment effect by per-arm calibration.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from . import loss as loss_mod
from .calibrate import build_soft_targets, solve_newton
from .cluster import (
    CausalFrame,
    ClusterDesign,
    _bc_extra_terms,
    causal_ate,
    cluster_estimate,
    cluster_pseudo_values,
    cluster_variance,
)
from .core import MixedEffectsSpec, PopulationFrame, SoftCalError, mask_unselected
from .estimate import (
    bias_corrected,
    blup_predictions,
    blup_solve,
    l2_penalized_solve,
    variance_estimates,
)
from .tune import (
    TuneError,
    _LOG_GAMMA_HI,
    _LOG_GAMMA_LO,
    _RestrictedLikelihood,
    _golden_minimize,
    fold_assignment,
    reml_gamma_seed,
    select_gamma,
)

__all__ = [
    "ScenarioConfig",
    "MetricsTable",
    "Population",
    "gen_population",
    "gen_selection",
    "two_stage_sample",
    "run_monte_carlo",
]

DEFAULT_ESTIMATORS = ("sim", "fix", "rand", "hc", "soft_sq", "soft_me", "bc")
CAUSAL_ESTIMATORS = ("sim", "hc", "soft_sq", "soft_me")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``k`` sampled clusters of ``n_i`` units from ``K`` population
    clusters of ``N_i`` units; ``lambda1``/``lambda2`` scale the cluster
    effects in the outcome and in selection (treatment, in causal mode).
    """

    k: int = 10
    n_i: int = 60
    K: int = 200
    N_i: int = 60
    lambda1: float = 0.01
    lambda2: float = 1.0
    outcome_form: str = "linear"
    reps: int = 200
    seed: int = 0
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    folds: int = 5
    workers: int = 1
    causal: bool = False
    tau: float = 2.0
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.k > self.K:
            raise ValueError("cannot sample more clusters than exist")
        if self.n_i > self.N_i:
            raise ValueError("cannot sample more units than the cluster holds")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.outcome_form not in ("linear", "nonlinear"):
            raise ValueError("outcome_form must be 'linear' or 'nonlinear'")
        allowed = set(DEFAULT_ESTIMATORS) | {"l2"}
        if self.causal:
            allowed = set(CAUSAL_ESTIMATORS)
        unknown = set(self.estimators) - allowed
        if unknown:
            raise ValueError(f"unknown estimators for this mode: {sorted(unknown)}")


@dataclass(frozen=True, eq=False)
class Population:
    """Generated finite population, one entry per unit."""

    x1v: np.ndarray  # (N,) uniform covariate
    x2v: np.ndarray  # (N,) normal covariate
    y: np.ndarray  # (N,) realized outcomes (observed arm in causal mode)
    cluster: np.ndarray  # (N,) cluster codes 0..K-1
    a: np.ndarray  # (K,) outcome cluster effects
    z: np.ndarray  # (K,) selection cluster effects
    theta: float  # population mean of y
    y0: np.ndarray | None = None  # causal mode: control potential outcomes
    y1: np.ndarray | None = None
    treatment: np.ndarray | None = None
    tau: float | None = None

    @property
    def n_units(self) -> int:
        return len(self.y)

    def design_x(self) -> np.ndarray:
        """(N, 3) fixed-effect design (1, x1, x2)."""
        return np.column_stack([np.ones(self.n_units), self.x1v, self.x2v])


def _standardize(v: np.ndarray) -> np.ndarray:
    return (v - v.mean()) / v.std()


def _outcome_signal(cfg: ScenarioConfig, x1v, x2v) -> np.ndarray:
    signal = x1v + x2v  # slopes one, zero intercept
    if cfg.outcome_form == "nonlinear":
        signal = (
            signal
            + x1v**2
            + x2v**2
            + 0.1 * _standardize(np.exp(x1v))
            + 0.1 * _standardize(np.exp(x2v))
        )
    return signal


def gen_population(cfg: ScenarioConfig, rng: np.random.Generator) -> Population:
    """Draw a finite population of K * N_i units with cluster effects."""
    n_units = cfg.K * cfg.N_i
    cluster = np.repeat(np.arange(cfg.K), cfg.N_i)
    x1v = rng.uniform(-0.75, 0.75, size=n_units)
    x2v = rng.normal(size=n_units)
    a = rng.normal(size=cfg.K)
    z = rng.normal(size=cfg.K)
    e = rng.normal(size=n_units)
    y = _outcome_signal(cfg, x1v, x2v) + cfg.lambda1 * a[cluster] + e
    if not cfg.causal:
        return Population(
            x1v=x1v, x2v=x2v, y=y, cluster=cluster, a=a, z=z, theta=float(y.mean())
        )
    # constant additive effect: treated arm shifts the intercept by tau
    y0 = y
    y1 = y + cfg.tau
    logit = -0.25 + x1v + x2v + cfg.lambda2 * a[cluster]
    treatment = rng.random(n_units) < expit(logit)
    y_obs = np.where(treatment, y1, y0)
    return Population(
        x1v=x1v,
        x2v=x2v,
        y=y_obs,
        cluster=cluster,
        a=a,
        z=z,
        theta=float(y_obs.mean()),
        y0=y0,
        y1=y1,
        treatment=treatment,
        tau=float(np.mean(y1 - y0)),
    )


def gen_selection(
    pop: Population, cfg: ScenarioConfig, rng: np.random.Generator
) -> np.ndarray:
    """Bernoulli response indicators from the logistic selection model."""
    logit = selection_logit(pop, cfg)
    return rng.random(pop.n_units) < expit(logit)


def selection_logit(pop: Population, cfg: ScenarioConfig) -> np.ndarray:
    """Linear predictor -0.25 + x1 + x2 + lambda2 * z_cluster."""
    return -0.25 + pop.x1v + pop.x2v + cfg.lambda2 * pop.z[pop.cluster]


def two_stage_sample(
    pop: Population,
    cfg: ScenarioConfig,
    rng: np.random.Generator,
    selection: np.ndarray | None = None,
) -> tuple[ClusterDesign, PopulationFrame, np.ndarray]:
    """Draw k clusters then n_i units per cluster; build the sampled frame.

    The frame's x1 block is (1, x1, x2); its x2 block holds the sampled
    clusters' indicator dummies.  ``selection`` supplies the response
    indicator (all-ones when omitted, as in the causal design where
    every sampled unit is observed).  Returns the design, the frame and
    the sampled units' population indices.
    """
    chosen = np.sort(rng.choice(cfg.K, size=cfg.k, replace=False))
    idx_parts = []
    for c in chosen:
        base = c * cfg.N_i
        units = np.sort(rng.choice(cfg.N_i, size=cfg.n_i, replace=False))
        idx_parts.append(base + units)
    idx = np.concatenate(idx_parts)

    codes = np.repeat(np.arange(cfg.k), cfg.n_i)
    dummies = np.zeros((len(idx), cfg.k))
    dummies[np.arange(len(idx)), codes] = 1.0

    delta = np.ones(len(idx), bool) if selection is None else np.asarray(selection)[idx]
    frame = PopulationFrame(
        x1=pop.design_x()[idx],
        x2=dummies,
        delta=delta,
        y=mask_unselected(pop.y[idx], delta),
    )
    design = ClusterDesign(
        cluster_id=codes,
        d_cluster=np.full(cfg.k, cfg.K / cfg.k),
        n_per=np.full(cfg.k, cfg.n_i),
        n_pop_per=np.full(cfg.k, cfg.N_i),
    )
    return design, frame, idx


# ---------------------------------------------------------------------------
# propensity-model comparators
# ---------------------------------------------------------------------------


def _fit_logistic(x, y01, ridge=1e-8, max_iter=60, tol=1e-10):
    """Ridge-stabilized Newton fit of a logistic regression."""
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        p = expit(x @ beta)
        w = np.clip(p * (1.0 - p), 1e-12, None)
        grad = x.T @ (y01 - p) - ridge * beta
        hess = x.T @ (x * w[:, None]) + ridge * np.eye(x.shape[1])
        step = np.linalg.solve(hess, grad)
        beta += step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def _fit_logistic_random_intercept(x, z, y01, max_iter=30, tol=1e-6):
    """Penalized quasi-likelihood fit with a cluster random intercept.

    Alternates a weighted working linear mixed model with a restricted
    maximum likelihood update of the shrinkage ratio on the working
    response, then returns fitted probabilities.
    """
    n, p = x.shape
    k = z.shape[1]
    beta = np.zeros(p)
    u = np.zeros(k)
    ratio = 1.0
    for _ in range(max_iter):
        eta = x @ beta + z @ u
        prob = np.clip(expit(eta), 1e-10, 1 - 1e-10)
        w = np.clip(prob * (1.0 - prob), 1e-10, None)
        zeta = eta + (y01 - prob) / w
        try:
            profile = _RestrictedLikelihood(x, z, zeta, w, np.eye(k))
            ratio = float(
                np.exp(
                    _golden_minimize(
                        profile.neg_restricted_ll, _LOG_GAMMA_LO, _LOG_GAMMA_HI, tol=1e-4
                    )
                )
            )
        except (TuneError, np.linalg.LinAlgError):
            pass
        xz = np.hstack([x, z])
        a_mat = xz.T @ (xz * w[:, None])
        a_mat[p:, p:] += ratio * np.eye(k)
        sol = np.linalg.solve(a_mat, xz.T @ (w * zeta))
        step = np.max(np.abs(np.concatenate([beta, u]) - sol))
        beta, u = sol[:p], sol[p:]
        if step < tol:
            break
    return expit(x @ beta + z @ u)


def _hajek_ipw(frame, design, p_hat, level):
    """Inverse-propensity weighted mean with a between-cluster interval."""
    d = design.unit_weights()
    sel = frame.delta
    ys = np.asarray(frame.y[sel])
    inv = 1.0 / np.clip(p_hat[sel], 1e-6, None)
    num_terms = np.zeros(frame.n_total)
    den_terms = np.zeros(frame.n_total)
    num_terms[sel] = d[sel] * inv * ys
    den_terms[sel] = d[sel] * inv
    num = num_terms.sum()
    den = den_terms.sum()
    theta = num / den
    resid = num_terms - theta * den_terms
    per_cluster = np.bincount(design.cluster_id, weights=resid, minlength=design.k)
    k = design.k
    var = k / (k - 1) * np.sum((per_cluster - per_cluster.mean()) ** 2) / den**2
    return theta, var


# ---------------------------------------------------------------------------
# replicate-level estimator battery
# ---------------------------------------------------------------------------


class ReplicateFailure(SoftCalError):
    """One replicate could not complete; recorded and excluded."""


@dataclass
class _EstimateRecord:
    theta: float
    var_theta: float  # variance used for the interval
    extra: dict[str, float] = field(default_factory=dict)


def _outcome_b_ridge(reml) -> float:
    """Shrinkage for the influence projection's random block.

    The outcome model's variance ratio; infinite when the random-effect
    variance is at the boundary (the block's coefficients are then pure
    noise and are zeroed).
    """
    return np.inf if reml.boundary else reml.gamma_star


def _point_estimate_at(frame, design, loss_spec, gamma, d_ij) -> float:
    spec = MixedEffectsSpec(gamma=gamma)
    tg = build_soft_targets(frame, spec, d_ij, allow_singular=(gamma == 0.0))
    res = solve_newton(frame, loss_spec, tg, design_weights=d_ij)
    if not res.converged:
        raise ReplicateFailure("neighbor solve did not converge")
    return cluster_estimate(frame, design, res)


def _jackknife_variance(frame, design, loss_spec, gamma, bc_spec=None) -> float:
    """Delete-one-cluster replicate variance with re-solved weights.

    Weights are re-calibrated on each reduced sample (remaining design
    weights scaled by k/(k-1)), which propagates the multiplier-refit
    noise that the fixed-multiplier pseudo-value dispersion cannot see
    when the random-block multipliers are pinned cluster by cluster.
    The penalty stays at its selected value.  With ``bc_spec`` the
    deleted-sample estimate is the bias-corrected one (mixed-model fit
    redone per deletion).
    """
    from .core import restrict_frame

    k = design.k
    d_ij = design.unit_weights()
    thetas = []
    for c in range(k):
        keep = design.cluster_id != c
        sub = restrict_frame(frame, keep)
        d_sub = d_ij[keep] * k / (k - 1)
        tg = build_soft_targets(
            sub, MixedEffectsSpec(gamma=gamma), d_sub, allow_singular=(gamma == 0.0)
        )
        res = solve_newton(sub, loss_spec, tg, design_weights=d_sub)
        if not res.converged:
            raise ReplicateFailure("jackknife replicate solve did not converge")
        if bc_spec is not None:
            fit = blup_solve(sub, bc_spec, design_weights=d_sub)
            thetas.append(
                bias_corrected(sub, res, blup_predictions(sub, fit), design_weights=d_sub)
            )
        else:
            ys = np.asarray(sub.y[sub.delta])
            thetas.append(float((d_sub[sub.delta] * res.weights * ys).sum() / d_sub.sum()))
    thetas = np.asarray(thetas)
    return float((k - 1) / k * np.sum((thetas - thetas.mean()) ** 2))


def _selection_dispersion(frame, design, loss_spec, tuned, d_ij) -> float:
    """Penalty-selection variance allowance.

    The fixed-penalty influence function cannot see the replicate-level
    randomness of the data-adaptive choice.  The half-gap between the
    full-data estimates at the selected candidate's grid neighbors is
    close to zero when the criterion picked from a flat stretch and
    grows exactly when the selection sits between genuinely different
    fits.
    """
    grid = tuned.grid
    j = int(np.argmin(np.abs(np.log(grid) - np.log(tuned.gamma_selected))))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    try:
        th_lo = _point_estimate_at(frame, design, loss_spec, lo, d_ij)
        th_hi = _point_estimate_at(frame, design, loss_spec, hi, d_ij)
    except (SoftCalError, np.linalg.LinAlgError):
        return 0.0
    return 0.25 * (th_lo - th_hi) ** 2


def _calibration_record(
    frame, design, loss_spec, gamma, folds, fold_seed
) -> tuple[_EstimateRecord, dict]:
    d_ij = design.unit_weights()
    v_sel = 0.0
    if gamma == "auto":
        tuned = select_gamma(
            frame,
            loss_spec,
            MixedEffectsSpec(),
            folds=folds,
            seed=fold_seed,
            design_weights=d_ij,
        )
        g = tuned.gamma_selected
        b_ridge = _outcome_b_ridge(tuned.reml)
        v_sel = _selection_dispersion(frame, design, loss_spec, tuned, d_ij)
    else:
        g = float(gamma)
        b_ridge = 0.0 if g == 0.0 else _outcome_b_ridge(reml_gamma_seed(frame))
    spec = MixedEffectsSpec(gamma=g)
    singular_ok = g == 0.0  # intercept + full dummy basis is redundant there
    targets = build_soft_targets(frame, spec, d_ij, allow_singular=singular_ok)
    res = solve_newton(frame, loss_spec, targets, design_weights=d_ij)
    if not res.converged:
        raise ReplicateFailure("calibration solve did not converge")
    theta = cluster_estimate(frame, design, res)
    psi = cluster_pseudo_values(
        frame, design, res, loss_spec, targets, b_ridge=b_ridge
    )
    v1 = cluster_variance(
        frame, design, res, loss_spec, targets, pseudo_values=psi
    )
    var_used = v1 / design.n + v_sel
    if gamma == "auto":
        # tuned penalties pin every random-block multiplier to its own
        # area; the refit noise they absorb needs replicate-based
        # propagation, so the interval uses the jackknife
        try:
            var_used = _jackknife_variance(frame, design, loss_spec, g) + v_sel
        except (ReplicateFailure, SoftCalError, np.linalg.LinAlgError):
            pass  # keep the pseudo-value variance for this replicate
    # per-unit (non-cluster) variance view: constant design weights scale
    # out of the dual, so the same multipliers solve the unweighted
    # problem with the sampled units as the population
    targets_iid = build_soft_targets(frame, spec, None, allow_singular=singular_ok)
    v1_iid, v2_iid = variance_estimates(
        frame, res, loss_spec, targets_iid, allow_singular=True, b_ridge=b_ridge
    )
    rec = _EstimateRecord(
        theta=theta,
        var_theta=var_used,
        extra={
            "gamma": g,
            "var_iid": (v1_iid + v2_iid) / frame.n_sample + v_sel,
            "var_sel": v_sel,
        },
    )
    artifacts = {
        "targets": targets,
        "result": res,
        "spec": spec,
        "gamma": g,
        "b_ridge": b_ridge,
        "v_sel": v_sel,
    }
    return rec, artifacts


def _bias_corrected_record(frame, design, loss_spec, artifacts) -> _EstimateRecord:
    targets, res, spec = artifacts["targets"], artifacts["result"], artifacts["spec"]
    d_ij = design.unit_weights()
    fit = blup_solve(frame, spec, design_weights=d_ij)
    mu = blup_predictions(frame, fit)
    theta = bias_corrected(frame, res, mu, design_weights=d_ij)
    try:
        var_used = (
            _jackknife_variance(frame, design, loss_spec, artifacts["gamma"], bc_spec=spec)
            + artifacts["v_sel"]
        )
    except (ReplicateFailure, SoftCalError, np.linalg.LinAlgError):
        extra_terms = _bc_extra_terms(frame, targets, res)
        psi = cluster_pseudo_values(
            frame,
            design,
            res,
            loss_spec,
            targets,
            extra_unit_terms=extra_terms,
            b_ridge=artifacts["b_ridge"],
        )
        v1 = cluster_variance(
            frame, design, res, loss_spec, targets, pseudo_values=psi
        )
        var_used = v1 / design.n + artifacts["v_sel"]
    return _EstimateRecord(theta, var_used, {"gamma": artifacts["gamma"]})


def _l2_record(frame, design, loss_spec, folds, fold_seed) -> _EstimateRecord:
    from .calibrate import hard_targets
    from .estimate import influence_values
    from .tune import _hard_proxy, _panel_beta, crossfit_mse
    from .core import restrict_frame, sample_view

    d_ij = design.unit_weights()
    n_eff = d_ij.sum()
    theta_proxy = _hard_proxy(frame, loss_spec, MixedEffectsSpec(), d_ij)
    fold_ids = fold_assignment(frame.n_total, folds, fold_seed)
    lam_grid = 10.0 ** np.arange(-6, 5, dtype=float)
    scores = []
    for lam in lam_grid:
        terms_bias, terms_var, failed = [], [], 0
        for kf in range(folds):
            train = fold_ids != kf
            try:
                sub = restrict_frame(frame, train)
                sub_d = d_ij[train]
                res = l2_penalized_solve(sub, loss_spec, lam, design_weights=sub_d)
                if not res.converged:
                    failed += 1
                    continue
                tg = hard_targets(sub, None, sub_d, allow_singular=True)
                x1t, x2t, yt, qt = sample_view(sub)
                _, b_vec = influence_values(
                    sub, res, loss_spec, tg, sub_d, allow_singular=True
                )
                beta = _panel_beta(tg, x1t, x2t, yt, qt, sub_d[sub.delta])
            except (SoftCalError, np.linalg.LinAlgError):
                failed += 1
                continue
            hold = (fold_ids == kf) & frame.delta
            xh = np.hstack([frame.x1[hold], frame.x2[hold]])
            zh = xh @ res.c_hat
            qh = frame.q_scale[hold]
            if not loss_mod.in_conjugate_domain(loss_spec, zh, qh):
                failed += 1
                continue
            wh = loss_mod.weight_map(loss_spec, zh, qh)
            yh = np.asarray(frame.y[hold])
            dh = d_ij[hold]
            fold_mean = folds / n_eff * float(np.sum(dh * wh * yh))
            terms_bias.append((fold_mean - theta_proxy) ** 2)
            v_sel = float(np.sum(dh * wh**2 * (yh - xh @ b_vec) ** 2))
            v_mod = float(np.sum(dh * wh * (yh - frame.x1[hold] @ beta) ** 2))
            terms_var.append(folds**2 / n_eff**2 * (v_sel + v_mod))
        if failed > folds // 2:
            scores.append(np.inf)
        else:
            scores.append(float(np.mean(terms_bias) + np.mean(terms_var)))
    lam_best = float(lam_grid[int(np.argmin(scores))])
    res = l2_penalized_solve(frame, loss_spec, lam_best, design_weights=d_ij)
    if not res.converged:
        raise ReplicateFailure("penalized comparator solve did not converge")
    theta = cluster_estimate(frame, design, res)
    targets = hard_targets(frame, None, d_ij, allow_singular=True)
    psi = cluster_pseudo_values(frame, design, res, loss_spec, targets)
    v1 = cluster_variance(frame, design, res, loss_spec, targets, pseudo_values=psi)
    return _EstimateRecord(theta, v1 / design.n, {"lambda": lam_best})


def _run_missing_replicate(cfg: ScenarioConfig, rep: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, rep]))
    pop = gen_population(cfg, rng)
    selection = gen_selection(pop, cfg, rng)
    design, frame, _ = two_stage_sample(pop, cfg, rng, selection)
    fold_seed = int(rng.integers(2**31 - 1))
    if frame.n_sample == 0:
        raise ReplicateFailure("no respondents in the sample")

    me = loss_mod.LossSpec("maximum_entropy")
    sq = loss_mod.LossSpec("square")
    records: dict[str, _EstimateRecord] = {}
    me_artifacts = None

    for name in cfg.estimators:
        if name == "sim":
            ys = np.asarray(frame.y[frame.delta])
            var = ys.var(ddof=1) / len(ys) if len(ys) > 1 else np.nan
            records[name] = _EstimateRecord(float(ys.mean()), var)
        elif name == "fix":
            x = np.hstack([frame.x2, frame.x1[:, 1:]])  # dummies replace intercept
            beta = _fit_logistic(x, frame.delta.astype(float))
            theta, var = _hajek_ipw(frame, design, expit(x @ beta), cfg.level)
            records[name] = _EstimateRecord(theta, var)
        elif name == "rand":
            p_hat = _fit_logistic_random_intercept(
                frame.x1, frame.x2, frame.delta.astype(float)
            )
            theta, var = _hajek_ipw(frame, design, p_hat, cfg.level)
            records[name] = _EstimateRecord(theta, var)
        elif name == "hc":
            rec, _ = _calibration_record(frame, design, me, 0.0, cfg.folds, fold_seed)
            records[name] = rec
        elif name == "soft_sq":
            rec, _ = _calibration_record(frame, design, sq, "auto", cfg.folds, fold_seed)
            records[name] = rec
        elif name == "soft_me":
            rec, art = _calibration_record(frame, design, me, "auto", cfg.folds, fold_seed)
            records[name] = rec
            me_artifacts = art
        elif name == "bc":
            if me_artifacts is None:
                rec, me_artifacts = _calibration_record(
                    frame, design, me, "auto", cfg.folds, fold_seed
                )
            records[name] = _bias_corrected_record(frame, design, me, me_artifacts)
        elif name == "l2":
            records[name] = _l2_record(frame, design, me, cfg.folds, fold_seed)
        else:  # pragma: no cover
            raise AssertionError(name)

    return _package_records(records, pop.theta, cfg.level)


def _arm_delta_frame(frame: PopulationFrame, selected: np.ndarray) -> PopulationFrame:
    return PopulationFrame(
        x1=frame.x1, x2=frame.x2, delta=selected, y=frame.y, q_scale=frame.q_scale
    )


def _jackknife_variance_ate(frame, causal, design, loss_spec, gammas) -> float:
    """Delete-one-cluster variance for the two-arm effect estimate."""
    from .core import restrict_frame

    k = design.k
    d_ij = design.unit_weights()
    a = causal.treatment
    taus = []
    for c in range(k):
        keep = design.cluster_id != c
        d_sub = d_ij[keep] * k / (k - 1)
        arm_means = {}
        for arm, selected in ((1, a), (0, ~a)):
            sub = restrict_frame(_arm_delta_frame(frame, selected), keep)
            gam = gammas[1 - arm]
            tg = build_soft_targets(
                sub, MixedEffectsSpec(gamma=gam), d_sub, allow_singular=(gam == 0.0)
            )
            res = solve_newton(sub, loss_spec, tg, design_weights=d_sub)
            if not res.converged:
                raise ReplicateFailure("jackknife replicate solve did not converge")
            ys = np.asarray(sub.y[sub.delta])
            arm_means[arm] = float(
                (d_sub[sub.delta] * res.weights * ys).sum() / d_sub.sum()
            )
        taus.append(arm_means[1] - arm_means[0])
    taus = np.asarray(taus)
    return float((k - 1) / k * np.sum((taus - taus.mean()) ** 2))


def _run_causal_replicate(cfg: ScenarioConfig, rep: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, rep]))
    pop = gen_population(cfg, rng)
    design, frame, idx = two_stage_sample(pop, cfg, rng, selection=None)
    causal = CausalFrame(pop.treatment[idx])
    fold_seed = int(rng.integers(2**31 - 1))
    a = causal.treatment
    if not a.any() or a.all():
        raise ReplicateFailure("a treatment arm is empty")

    me = loss_mod.LossSpec("maximum_entropy")
    sq = loss_mod.LossSpec("square")
    records: dict[str, _EstimateRecord] = {}
    spec = MixedEffectsSpec()
    d_ij = design.unit_weights()

    for name in cfg.estimators:
        if name == "sim":
            ys = np.asarray(frame.y)
            y1, y0 = ys[a], ys[~a]
            tau = float(y1.mean() - y0.mean())
            var = y1.var(ddof=1) / len(y1) + y0.var(ddof=1) / len(y0)
            records[name] = _EstimateRecord(tau, var)
            continue
        spec_loss = sq if name == "soft_sq" else me
        try:
            if name == "hc":
                gammas = (0.0, 0.0)
            else:
                gammas = tuple(
                    select_gamma(
                        _arm_delta_frame(frame, sel),
                        spec_loss,
                        spec,
                        folds=cfg.folds,
                        seed=fold_seed,
                        design_weights=d_ij,
                    ).gamma_selected
                    for sel in (a, ~a)
                )
            report = causal_ate(
                frame,
                causal,
                design,
                spec,
                spec_loss,
                gamma=gammas,
                folds=cfg.folds,
                seed=fold_seed,
                level=cfg.level,
            )
            var_used = report.v1 / design.n
            if name != "hc":
                # tuned penalties: propagate the multiplier-refit noise
                try:
                    var_used = _jackknife_variance_ate(
                        frame, causal, design, spec_loss, gammas
                    )
                except (ReplicateFailure, SoftCalError, np.linalg.LinAlgError):
                    pass
        except (SoftCalError, TuneError, np.linalg.LinAlgError) as exc:
            raise ReplicateFailure(str(exc)) from exc
        records[name] = _EstimateRecord(
            report.theta, var_used, {"gamma": report.gamma}
        )

    return _package_records(records, pop.tau, cfg.level)


def _package_records(records: dict, truth: float, level: float) -> dict:
    z = stats.norm.ppf(0.5 + level / 2.0)
    out = {"truth": truth}
    for name, rec in records.items():
        if np.isfinite(rec.var_theta):
            half = z * math.sqrt(rec.var_theta)
            hit = 1.0 if abs(rec.theta - truth) <= half else 0.0
        else:
            hit = float("nan")
        out[name] = {"theta": rec.theta, "var": rec.var_theta, "hit": hit, **rec.extra}
    return out


def _run_replicate(args) -> tuple[int, dict | str]:
    cfg, rep = args
    try:
        fn = _run_causal_replicate if cfg.causal else _run_missing_replicate
        return rep, fn(cfg, rep)
    except (SoftCalError, TuneError, np.linalg.LinAlgError) as exc:
        return rep, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Per-estimator bias, variance, MSE and coverage across replicates.

    Errors are measured against each replicate's realized population
    mean; variance uses the reps-1 divisor, so
    mse = bias^2 + variance * (reps-1)/reps exactly.
    """

    estimators: tuple[str, ...]
    bias: dict[str, float]
    variance: dict[str, float]
    mse: dict[str, float]
    coverage: dict[str, float]
    reps_used: int
    failures: int
    diagnostics: dict[str, float]

    def to_frame(self) -> pd.DataFrame:
        rows = {
            "bias": self.bias,
            "variance": self.variance,
            "mse": self.mse,
            "coverage": self.coverage,
        }
        return pd.DataFrame(
            {est: [rows[m][est] for m in rows] for est in self.estimators},
            index=list(rows),
        )

    def formatted(self) -> pd.DataFrame:
        """Scaled the way study tables are usually printed.

        bias x 1e2, variance and MSE x 1e3, coverage in percent.
        """
        df = self.to_frame().copy()
        df.loc["bias"] *= 1e2
        df.loc["variance"] *= 1e3
        df.loc["mse"] *= 1e3
        df.loc["coverage"] *= 1e2
        return df.round(3)


def run_monte_carlo(cfg: ScenarioConfig) -> MetricsTable:
    """Run the replicate loop and aggregate the estimator battery."""
    jobs = [(cfg, rep) for rep in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_replicate, jobs, chunksize=4))
    else:
        results = [_run_replicate(j) for j in jobs]
    results.sort(key=lambda t: t[0])  # reduce in replicate order

    per_rep = [r for _, r in results if isinstance(r, dict)]
    failures = [(i, r) for i, r in results if not isinstance(r, dict)]
    if len(failures) > 0.05 * cfg.reps:
        examples = "; ".join(msg for _, msg in failures[:3])
        raise SoftCalError(
            f"{len(failures)} of {cfg.reps} replicates failed (> 5%): {examples}"
        )
    if not per_rep:
        raise SoftCalError("every replicate failed")

    bias, variance, mse, coverage = {}, {}, {}, {}
    diagnostics: dict[str, float] = {}
    for name in cfg.estimators:
        err = np.array([r[name]["theta"] - r["truth"] for r in per_rep])
        hits = np.array([r[name]["hit"] for r in per_rep], dtype=float)
        bias[name] = float(err.mean())
        variance[name] = float(err.var(ddof=1)) if len(err) > 1 else float("nan")
        mse[name] = float(np.mean(err**2))
        with np.errstate(invalid="ignore"):
            coverage[name] = (
                float(np.nanmean(hits)) if np.isfinite(hits).any() else float("nan")
            )
        vars_used = np.array([r[name]["var"] for r in per_rep])
        diagnostics[f"{name}/mean_var_used"] = float(np.nanmean(vars_used))
        if per_rep and "var_iid" in per_rep[0][name]:
            diagnostics[f"{name}/mean_var_iid"] = float(
                np.mean([r[name]["var_iid"] for r in per_rep])
            )
        if per_rep and "gamma" in per_rep[0][name]:
            diagnostics[f"{name}/median_gamma"] = float(
                np.median([r[name]["gamma"] for r in per_rep])
            )
    return MetricsTable(
        estimators=tuple(cfg.estimators),
        bias=bias,
        variance=variance,
        mse=mse,
        coverage=coverage,
        reps_used=len(per_rep),
        failures=len(failures),
        diagnostics=diagnostics,
    )
