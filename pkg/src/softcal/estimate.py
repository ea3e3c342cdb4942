"""Point estimators, influence functions and variance estimation.

The weighted estimator of the population mean is N^{-1} sum_S w_i y_i.
Its sampling behavior is linearized through per-unit influence values

    psi_i = B x_{i,sc} + delta_i w(c^T x_i) (y_i - B x_i),

where B regresses the outcome on the covariates with curvature weights
w'(c^T x_i), and x_{i,sc} folds the random-block adjustment into the
covariates: x_{i,sc} = (x1_i, M_S^T x1_i + (I + R_S^T) x2_i).  Two
variance pieces are estimated on the sqrt(n) scale: a selection part
from the weighted residuals and a model part from the fixed-effect fit,
with the normal interval using their sum divided by n.

The module also houses the mixed-model (BLUP) solver, the bias-corrected
estimator that subtracts sum (delta_i w_i - 1) mu_i for any fitted
outcome vector, and the L2-penalized comparator that replaces the
structured soft constraints with a plain ridge penalty on the
random-block multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import loss as loss_mod
from .calibrate import (
    SoftTargets,
    SolveResult,
    SolverOptions,
    _make_problem,
    _newton_minimize,
    _unit_design_weights,
    hard_targets,
)
from .core import MixedEffectsSpec, PopulationFrame, _readonly, sample_view

__all__ = [
    "BlupFit",
    "EstimateReport",
    "weighted_mean",
    "blup_solve",
    "blup_predictions",
    "blup_estimate",
    "influence_values",
    "variance_estimates",
    "bias_corrected",
    "l2_penalized_solve",
    "estimate_report",
]


@dataclass(frozen=True, eq=False)
class BlupFit:
    """Solution of the penalized mixed-model normal equations."""

    beta_hat: np.ndarray  # (p,)
    u_hat: np.ndarray  # (q,)
    gamma: float


@dataclass(frozen=True, eq=False)
class EstimateReport:
    theta: float
    v1: float
    v2: float
    ci_low: float
    ci_high: float
    psi: np.ndarray  # (N,) influence values
    method: str
    gamma: float | None = None
    converged: bool | None = None
    level: float = 0.95


def weighted_mean(
    frame: PopulationFrame,
    weights: np.ndarray,
    design_weights: np.ndarray | None = None,
) -> float:
    """N^{-1} sum over the sample of (design weight) * w_i * y_i."""
    _, _, ys, _ = sample_view(frame)
    w = np.asarray(weights, dtype=float)
    if w.shape != ys.shape:
        raise ValueError(f"weights length {w.shape} does not match sample size {ys.shape}")
    d = _unit_design_weights(frame, design_weights)
    n_eff = d.sum()
    return float((d[frame.delta] * w * ys).sum() / n_eff)


def blup_solve(
    frame: PopulationFrame,
    spec: MixedEffectsSpec,
    design_weights: np.ndarray | None = None,
) -> BlupFit:
    """Solve the mixed-model score equations on the sample.

    The system matrix is the q-weighted sample Gram with gamma * D_q^{-1}
    added to the random-effect block; the fit must reproduce the
    right-hand side to 1e-8 relative accuracy or a LinAlgError-style
    failure is raised.
    """
    x1s, x2s, ys, qs = sample_view(frame)
    d = _unit_design_weights(frame, design_weights)[frame.delta]
    p, q = frame.p, frame.q
    xs = np.hstack([x1s, x2s])
    wts = qs * d
    a_mat = xs.T @ (xs * wts[:, None])
    if q:
        a_mat[p:, p:] += spec.gamma * np.linalg.inv(spec.d_q_for(q))
    rhs = xs.T @ (wts * ys)
    sol = np.linalg.solve(a_mat, rhs)
    resid = np.linalg.norm(a_mat @ sol - rhs)
    if resid > 1e-8 * max(1.0, np.linalg.norm(rhs)):
        raise np.linalg.LinAlgError(
            f"mixed-model system solved to relative residual {resid:.2e} only"
        )
    return BlupFit(beta_hat=_readonly(sol[:p]), u_hat=_readonly(sol[p:]), gamma=spec.gamma)


def blup_predictions(frame: PopulationFrame, fit: BlupFit) -> np.ndarray:
    """Fitted outcomes x1 beta + x2 u for every population unit."""
    return frame.x1 @ fit.beta_hat + frame.x2 @ fit.u_hat


def blup_estimate(
    frame: PopulationFrame,
    spec: MixedEffectsSpec,
    design_weights: np.ndarray | None = None,
) -> float:
    """Population-mean prediction from the mixed-model fit."""
    fit = blup_solve(frame, spec, design_weights)
    d = _unit_design_weights(frame, design_weights)
    return float(d @ blup_predictions(frame, fit) / d.sum())


def influence_values(
    frame: PopulationFrame,
    solve: SolveResult,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    design_weights: np.ndarray | None = None,
    allow_singular: bool = False,
    b_ridge: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit influence values psi and the outcome projection row B.

    B solves the curvature-weighted regression of y on the stacked
    covariates over the sample; off-sample units contribute only the
    B x_{i,sc} term.  The point estimate is invariant to B (exactly, at
    a converged solve), but dispersion-based variance estimates are not:
    the random-block coefficients of B are estimated from one area each,
    and unshrunk they absorb each area's own selection noise into the
    residuals, deflating the estimated variance at any scale.
    ``b_ridge`` therefore adds b_ridge * D_q^{-1} to the random block of
    the regression (the outcome model's variance ratio is the natural
    choice; infinity zeroes the block).  The default uses the targets'
    calibration penalty, so hard calibration keeps the plain projection.

    ``allow_singular`` switches to the min-norm least-squares B for
    redundant covariate bases (intercept plus a complete indicator
    set), whose fitted values are still unique.
    """
    x1s, x2s, ys, qs = sample_view(frame)
    d = _unit_design_weights(frame, design_weights)
    ds = d[frame.delta]
    xs = np.hstack([x1s, x2s])
    zs = xs @ solve.c_hat
    w = loss_mod.weight_map(loss_spec, zs, qs)
    wp = loss_mod.weight_map_deriv(loss_spec, zs, qs)

    if b_ridge is None:
        b_ridge = targets.gamma
    p, q = frame.p, frame.q
    if q and not np.isfinite(b_ridge):
        # infinite shrinkage: regress on the fixed block only
        gram1 = x1s.T @ (x1s * (ds * wp)[:, None])
        mom1 = x1s.T @ (ds * wp * ys)
        b_vec = np.zeros(p + q)
        b_vec[:p] = np.linalg.lstsq(gram1, mom1, rcond=1e-12)[0]
    else:
        gram = xs.T @ (xs * (ds * wp)[:, None])
        if q and b_ridge > 0:
            gram[p:, p:] += b_ridge * targets.dq_inv
        moment = xs.T @ (ds * wp * ys)
        if allow_singular:
            b_vec = np.linalg.lstsq(gram, moment, rcond=1e-12)[0]
        else:
            try:
                b_vec = np.linalg.solve(gram, moment)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    "curvature-weighted sample Gram is singular in the influence regression"
                ) from exc

    x_sc = np.hstack(
        [frame.x1, frame.x1 @ targets.m_s + frame.x2 @ (np.eye(frame.q) + targets.r_s)]
    )
    psi = x_sc @ b_vec
    eta = ys - xs @ b_vec
    psi[frame.delta] += w * eta
    return _readonly(psi), _readonly(b_vec)


def variance_estimates(
    frame: PopulationFrame,
    solve: SolveResult,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    allow_singular: bool = False,
    b_ridge: float | None = None,
) -> tuple[float, float]:
    """Selection-part and model-part variance estimates on the sqrt(n) scale.

    The selection part sums w^2 times squared influence residuals; the
    model part sums w times squared fixed-effect residuals, with the
    fixed-effect coefficients read off the block-inverse panels.  Note
    the model part carries a single power of w and no q factor, unlike
    the q-weighted sums inside the panels.
    """
    x1s, x2s, ys, qs = sample_view(frame)
    n = frame.n_sample
    n_tot = targets.n_effective
    xs = np.hstack([x1s, x2s])
    zs = xs @ solve.c_hat
    w = loss_mod.weight_map(loss_spec, zs, qs)

    _, b_vec = influence_values(
        frame, solve, loss_spec, targets, allow_singular=allow_singular, b_ridge=b_ridge
    )
    eta = ys - xs @ b_vec
    v1 = n / n_tot**2 * float(np.sum(w**2 * eta**2))

    beta_hat = targets.d11 @ (x1s.T @ (qs * ys)) + targets.d12 @ (x2s.T @ (qs * ys))
    v2 = n / n_tot**2 * float(np.sum(w * (ys - x1s @ beta_hat) ** 2))
    return v1, v2


def bias_corrected(
    frame: PopulationFrame,
    solve: SolveResult,
    mu_hat: np.ndarray,
    design_weights: np.ndarray | None = None,
) -> float:
    """Bias-corrected estimate: subtract N^{-1} sum (delta_i w_i - 1) mu_i.

    ``mu_hat`` must supply a fitted outcome for every population unit
    (mixed-model predictions by default in the higher-level drivers, but
    any externally fitted vector is accepted).
    """
    mu = np.asarray(mu_hat, dtype=float)
    if mu.shape != (frame.n_total,):
        raise ValueError("mu_hat must provide a value for every population unit")
    d = _unit_design_weights(frame, design_weights)
    n_eff = d.sum()
    theta = weighted_mean(frame, solve.weights, design_weights)
    dw = np.zeros(frame.n_total)
    dw[frame.delta] = solve.weights
    correction = float((d * (dw * frame.delta - 1.0) * mu).sum() / n_eff)
    return theta - correction


class _L2Problem:
    """Hard-target dual plus a ridge penalty on the random-block multipliers."""

    def __init__(self, base, lam: float, p: int):
        self.base = base
        self.lam = lam
        self.p = p

    def feasible(self, c):
        return self.base.feasible(c)

    def weights(self, c):
        return self.base.weights(c)

    def objective(self, c):
        return self.base.objective(c) + 0.5 * self.lam * float(c[self.p:] @ c[self.p:])

    def gradient(self, c):
        g = self.base.gradient(c)
        g = g.copy()
        g[self.p:] += self.lam * c[self.p:]
        return g

    def hessian(self, c):
        h = self.base.hessian(c).copy()
        idx = np.arange(self.p, h.shape[0])
        h[idx, idx] += self.lam
        return h


def l2_penalized_solve(
    frame: PopulationFrame,
    loss_spec: loss_mod.LossSpec,
    lam: float,
    opts: SolverOptions | None = None,
    design_weights: np.ndarray | None = None,
    spec: MixedEffectsSpec | None = None,
) -> SolveResult:
    """Ridge-penalized comparator: exact calibration on x1, shrunken x2.

    Minimizes N^{-1} sum_S g(c^T x_i) - <c, N^{-1} sum_U x_i>
    + lam * ||c_2||^2 / 2.  At a stationary point the x1 constraints hold
    exactly while the x2 imbalance equals lam * c_2; the stored random
    residual is that stationarity gap (times N), so the convergence flag
    has the same meaning as for the structured solver.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    opts = opts or SolverOptions()
    # only the target totals matter here; redundant bases are fine
    targets = hard_targets(frame, spec, design_weights, allow_singular=True)
    base = _make_problem(frame, loss_spec, targets, design_weights)
    prob = _L2Problem(base, lam, frame.p)
    c, w, iterations, trace = _newton_minimize(prob, base.xs.shape[1], opts)

    # stationarity: the scaled x2 imbalance equals -lam * c2, so the gap
    # is imbalance + N lam c2 (the penalty gradient enters with + sign)
    res_fixed, res_random = base.residuals(c)
    res_random = res_random + targets.n_effective * lam * c[frame.p:]
    max_res = max(
        (float(np.max(np.abs(r))) for r in (res_fixed, res_random) if r.size),
        default=0.0,
    )
    converged = max_res <= opts.tol_constraint * targets.n_effective
    return SolveResult(
        c_hat=_readonly(c),
        weights=_readonly(w),
        iterations=iterations,
        converged=converged,
        residual_fixed=_readonly(res_fixed),
        residual_random=_readonly(res_random),
        objective_trace=_readonly(np.asarray(trace)),
    )


def estimate_report(
    frame: PopulationFrame,
    solve: SolveResult,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    level: float = 0.95,
    v2_mode: str = "always",
    method: str = "soft",
) -> EstimateReport:
    """Assemble the point estimate, variances and normal interval.

    ``v2_mode``: "always" includes the model part in the interval,
    "never" drops it, "auto" drops it when the sampling fraction n/N is
    below 1 percent.
    """
    if v2_mode not in ("always", "never", "auto"):
        raise ValueError("v2_mode must be 'always', 'never' or 'auto'")
    theta = weighted_mean(frame, solve.weights)
    psi, _ = influence_values(frame, solve, loss_spec, targets)
    v1, v2 = variance_estimates(frame, solve, loss_spec, targets)
    n = frame.n_sample
    use_v2 = v2_mode == "always" or (
        v2_mode == "auto" and n / frame.n_total >= 0.01
    )
    var_theta = (v1 + (v2 if use_v2 else 0.0)) / n
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(var_theta)
    return EstimateReport(
        theta=theta,
        v1=v1,
        v2=v2,
        ci_low=theta - half,
        ci_high=theta + half,
        psi=psi,
        method=method,
        gamma=targets.gamma,
        converged=solve.converged,
        level=level,
    )
