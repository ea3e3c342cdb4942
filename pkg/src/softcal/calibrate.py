"""Soft-calibration constraint system and convex dual solver.

The weights minimize a per-unit loss over the selected sample subject to
exact constraints on the fixed-effect totals and relaxed, penalty-adjusted
constraints on the random-effect totals.  Writing A for the penalized
sample Gram

    A = sum_{i in S} d_i q_i x_i x_i^T + gamma * blockdiag(0_p, D_q^{-1}),

with block inverse [[D11, D12], [D21, D22]], the random-block adjustment
matrices are M_S = -gamma D12 D_q^{-1} and R_S = -gamma D22 D_q^{-1}, and
the right-hand sides become

    sum_S w_i x1_i = sum_U x1_i                               (exact)
    sum_S w_i x2_i = sum_U {x2_i + M_S^T x1_i + R_S^T x2_i}   (relaxed)

(design weights d_i multiply both sides when present).  The constrained
problem is solved through its unconstrained convex dual

    L(c) = [ sum_S d_i g(c^T x_i) - N <c, t_x> ] / N,

whose stationary point reproduces the constraints exactly; g is the
convex conjugate of the loss and t_x the N^{-1}-scaled stacked target.
The solver is a damped Newton iteration started at c = 0 with
backtracking halving on conjugate-domain exits and objective increases,
and a pseudoinverse (or ridge-jitter) fallback for singular Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import loss as loss_mod
from .core import (
    InfeasibleStepError,
    MixedEffectsSpec,
    PopulationFrame,
    SingularGramError,
    _readonly,
    sample_view,
)

__all__ = [
    "SoftTargets",
    "SolverOptions",
    "SolveResult",
    "build_soft_targets",
    "dual_objective",
    "dual_gradient",
    "dual_hessian",
    "solve_newton",
]


@dataclass(frozen=True, eq=False)
class SoftTargets:
    """Block-inverse panels, adjustment matrices and calibration targets."""

    d11: np.ndarray  # (p, p)
    d12: np.ndarray  # (p, q)
    d21: np.ndarray  # (q, p)
    d22: np.ndarray  # (q, q)
    m_s: np.ndarray  # (p, q)
    r_s: np.ndarray  # (q, q)
    t_r: np.ndarray  # (q,)
    t_x: np.ndarray  # (p+q,), N^{-1}-scaled right-hand side
    gamma: float
    n_effective: float  # N (or the design-weight total in weighted problems)
    dq_inv: np.ndarray  # (q, q) inverse random-effect structure

    @property
    def p(self) -> int:
        return self.d11.shape[0]

    @property
    def q(self) -> int:
        return self.d22.shape[0]

    @property
    def target_total(self) -> np.ndarray:
        """Unscaled constraint right-hand side N * t_x."""
        return self.n_effective * self.t_x


@dataclass(frozen=True)
class SolverOptions:
    tol_weight: float = 1e-10
    tol_gradient: float = 1e-10
    tol_constraint: float = 1e-8
    max_iterations: int = 100
    max_halvings: int = 50
    hessian_policy: str = "pseudoinverse"  # or "ridge"
    ridge_epsilon: float | None = None  # default 1e-8 * trace(H) / dim
    svd_rcond: float = 1e-12

    def __post_init__(self) -> None:
        if self.hessian_policy not in ("pseudoinverse", "ridge"):
            raise ValueError("hessian_policy must be 'pseudoinverse' or 'ridge'")


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Dual solution, unit weights and convergence diagnostics."""

    c_hat: np.ndarray  # (p+q,) Lagrange multipliers
    weights: np.ndarray  # (n,) w(c^T x_i) on the selected sample
    iterations: int
    converged: bool
    residual_fixed: np.ndarray  # (p,) unscaled fixed-constraint residual
    residual_random: np.ndarray  # (q,) unscaled random-constraint residual
    objective_trace: np.ndarray  # accepted objective values, starting at c=0

    @property
    def max_residual(self) -> float:
        parts = [np.abs(self.residual_fixed), np.abs(self.residual_random)]
        return float(max((a.max() for a in parts if a.size), default=0.0))


def _unit_design_weights(frame: PopulationFrame, design_weights) -> np.ndarray:
    if design_weights is None:
        return np.ones(frame.n_total)
    d = np.asarray(design_weights, dtype=float)
    if d.shape != (frame.n_total,):
        raise ValueError("design_weights length must equal the population size")
    if np.any(d <= 0):
        raise ValueError("design_weights must be strictly positive")
    return d


def build_soft_targets(
    frame: PopulationFrame,
    spec: MixedEffectsSpec,
    design_weights: np.ndarray | None = None,
    allow_singular: bool = False,
) -> SoftTargets:
    """Assemble the constraint system for a frame and penalty spec.

    Args:
        frame: valid population frame.
        spec: random-effect structure and penalty gamma.
        design_weights: optional strictly positive per-unit weights that
            multiply both the sample Gram and the population totals
            (two-stage designs); default all ones.
        allow_singular: accept a rank-deficient Gram and use min-norm
            pseudoinverse panels.  Exact calibration on an intercept
            plus a complete indicator basis is the standard case: the
            constraint system is consistent but redundant, so the
            multipliers are non-unique while the weights stay unique.

    Raises:
        SingularGramError: when the penalized sample Gram is rank
            deficient (possible at gamma = 0 with a deficient sample)
            and ``allow_singular`` is not set.
    """
    x1s, x2s, _, qs = sample_view(frame)
    d = _unit_design_weights(frame, design_weights)
    ds = d[frame.delta]
    p, q = frame.p, frame.q
    gamma = float(spec.gamma)
    dq = spec.d_q_for(q)

    xs = np.hstack([x1s, x2s])
    gram = xs.T @ (xs * (qs * ds)[:, None])
    penalty = np.zeros((p + q, p + q))
    dq_inv = np.linalg.inv(dq) if q else np.zeros((0, 0))
    if q:
        penalty[p:, p:] = dq_inv
    a_mat = gram + gamma * penalty

    # explicit rank check so a deficient Gram fails loudly, not as noise
    sv = np.linalg.svd(a_mat, compute_uv=False) if p + q else np.array([])
    rank = int(np.sum(sv > 1e-12 * sv[0])) if sv.size else 0
    if rank < p + q:
        if not allow_singular:
            raise SingularGramError(rank, p + q)
        a_inv = np.linalg.pinv(a_mat, rcond=1e-12)
    else:
        a_inv = np.linalg.inv(a_mat)

    d11, d12 = a_inv[:p, :p], a_inv[:p, p:]
    d21, d22 = a_inv[p:, :p], a_inv[p:, p:]
    if gamma == 0.0 or q == 0:
        m_s = np.zeros((p, q))
        r_s = np.zeros((q, q))
        t_r = np.zeros(q)
    else:
        m_s = -gamma * d12 @ dq_inv
        r_s = -gamma * d22 @ dq_inv
        t_r = None  # filled below from population sums

    n_eff = float(d.sum())
    tot1 = frame.x1.T @ d
    tot2 = frame.x2.T @ d
    if t_r is None:
        t_r = (m_s.T @ tot1 + r_s.T @ tot2) / n_eff
    t_x = np.concatenate([tot1, tot2 + n_eff * t_r]) / n_eff

    return SoftTargets(
        d11=_readonly(d11),
        d12=_readonly(d12),
        d21=_readonly(d21),
        d22=_readonly(d22),
        m_s=_readonly(m_s),
        r_s=_readonly(r_s),
        t_r=_readonly(t_r),
        t_x=_readonly(t_x),
        gamma=gamma,
        n_effective=n_eff,
        dq_inv=_readonly(dq_inv),
    )


@dataclass(frozen=True, eq=False)
class _DualProblem:
    """Precomputed sample arrays for one dual optimization."""

    xs: np.ndarray  # (n, p+q)
    qs: np.ndarray  # (n,)
    ds: np.ndarray  # (n,)
    target: np.ndarray  # (p+q,) unscaled
    n_eff: float
    spec: loss_mod.LossSpec
    p: int

    def zs(self, c: np.ndarray) -> np.ndarray:
        return self.xs @ c

    def feasible(self, c: np.ndarray) -> bool:
        return loss_mod.in_conjugate_domain(self.spec, self.zs(c), self.qs)

    def objective(self, c: np.ndarray) -> float:
        g = loss_mod.conjugate_value(self.spec, self.zs(c), self.qs)
        return float((self.ds @ g - c @ self.target) / self.n_eff)

    def weights(self, c: np.ndarray) -> np.ndarray:
        return loss_mod.weight_map(self.spec, self.zs(c), self.qs)

    def gradient(self, c: np.ndarray) -> np.ndarray:
        w = self.weights(c)
        return (self.xs.T @ (self.ds * w) - self.target) / self.n_eff

    def hessian(self, c: np.ndarray) -> np.ndarray:
        wp = loss_mod.weight_map_deriv(self.spec, self.zs(c), self.qs)
        return self.xs.T @ (self.xs * (self.ds * wp)[:, None]) / self.n_eff

    def residuals(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.xs.T @ (self.ds * self.weights(c)) - self.target
        return r[: self.p], r[self.p:]


def _make_problem(frame, loss_spec, targets, design_weights) -> _DualProblem:
    x1s, x2s, _, qs = sample_view(frame)
    d = _unit_design_weights(frame, design_weights)
    return _DualProblem(
        xs=np.hstack([x1s, x2s]),
        qs=qs,
        ds=d[frame.delta],
        target=targets.target_total,
        n_eff=targets.n_effective,
        spec=loss_spec,
        p=frame.p,
    )


def dual_objective(
    c: np.ndarray,
    frame: PopulationFrame,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    design_weights: np.ndarray | None = None,
) -> float:
    """N^{-1}-scaled dual objective at multiplier vector c."""
    prob = _make_problem(frame, loss_spec, targets, design_weights)
    return prob.objective(np.asarray(c, dtype=float))


def dual_gradient(c, frame, loss_spec, targets, design_weights=None) -> np.ndarray:
    """Gradient of the scaled dual; zero iff the calibration constraints hold."""
    prob = _make_problem(frame, loss_spec, targets, design_weights)
    return prob.gradient(np.asarray(c, dtype=float))


def dual_hessian(c, frame, loss_spec, targets, design_weights=None) -> np.ndarray:
    """Hessian of the scaled dual; positive semidefinite by convexity."""
    prob = _make_problem(frame, loss_spec, targets, design_weights)
    return prob.hessian(np.asarray(c, dtype=float))


def _newton_direction(hess: np.ndarray, grad: np.ndarray, opts: SolverOptions) -> np.ndarray:
    """Solve H d = g robustly.

    The Hessian is only positive semidefinite: redundant covariate bases
    (intercept plus a complete indicator set) put an exact null direction
    in every curvature matrix, and a plain LU solve silently amplifies it
    into a garbage step.  The default policy is a spectral inverse with
    small eigenvalues truncated at ``svd_rcond`` times the largest; the
    alternative adds a ridge jitter to the diagonal.
    """
    dim = hess.shape[0]
    if opts.hessian_policy == "ridge":
        eps = opts.ridge_epsilon
        if eps is None:
            eps = 1e-8 * np.trace(hess) / max(dim, 1)
            eps = max(eps, np.finfo(float).tiny)
        return np.linalg.solve(hess + eps * np.eye(dim), grad)
    vals, vecs = np.linalg.eigh(hess)
    cutoff = opts.svd_rcond * max(vals.max(initial=0.0), 0.0)
    inv_vals = np.where(vals > cutoff, 1.0 / np.where(vals > cutoff, vals, 1.0), 0.0)
    return vecs @ (inv_vals * (vecs.T @ grad))


def _newton_minimize(prob, dim: int, opts: SolverOptions):
    """Damped Newton loop shared by the calibration and penalized solvers.

    ``prob`` must expose objective/gradient/hessian/weights/feasible.
    Returns (c, weights, iterations, trace).
    """
    c = np.zeros(dim)
    if not prob.feasible(c):
        raise InfeasibleStepError("starting point c = 0 is outside the conjugate domain")
    w = prob.weights(c)
    obj = prob.objective(c)
    trace = [obj]
    iterations = 0

    for _ in range(opts.max_iterations):
        grad = prob.gradient(c)
        if np.max(np.abs(grad)) < opts.tol_gradient:
            break
        direction = _newton_direction(prob.hessian(c), grad, opts)

        step = 1.0
        accepted = False
        left_domain = False
        for _ in range(opts.max_halvings + 1):
            cand = c - step * direction
            if not prob.feasible(cand):
                left_domain = True
                step *= 0.5
                continue
            cand_obj = prob.objective(cand)
            if np.isfinite(cand_obj) and cand_obj <= obj:
                accepted = True
                break
            left_domain = False
            step *= 0.5
        if not accepted:
            if left_domain:
                raise InfeasibleStepError(
                    "no damped Newton step stays inside the conjugate domain"
                )
            break  # objective cannot decrease further at float precision

        iterations += 1
        c = cand
        obj = cand_obj
        trace.append(obj)
        w_new = prob.weights(c)
        delta_w = np.max(np.abs(w_new - w)) if w.size else 0.0
        w = w_new
        if delta_w < opts.tol_weight:
            break

    return c, w, iterations, trace


def solve_newton(
    frame: PopulationFrame,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    opts: SolverOptions | None = None,
    design_weights: np.ndarray | None = None,
) -> SolveResult:
    """Minimize the dual by damped Newton steps from c = 0.

    Stops when the max weight change or the scaled gradient drops below
    tolerance, or at the iteration cap.  The result is flagged converged
    only if the constraint residuals additionally meet
    ``tol_constraint * N`` in infinity norm, so infeasible bounded-loss
    problems surface as ``converged=False`` with the best iterate rather
    than an exception.

    Raises:
        InfeasibleStepError: if even the maximally damped step exits the
            conjugate domain.
    """
    opts = opts or SolverOptions()
    prob = _make_problem(frame, loss_spec, targets, design_weights)
    c, w, iterations, trace = _newton_minimize(prob, prob.xs.shape[1], opts)

    res_fixed, res_random = prob.residuals(c)
    max_res = max(
        (float(np.max(np.abs(r))) for r in (res_fixed, res_random) if r.size),
        default=0.0,
    )
    converged = max_res <= opts.tol_constraint * prob.n_eff
    return SolveResult(
        c_hat=_readonly(c),
        weights=_readonly(w),
        iterations=iterations,
        converged=converged,
        residual_fixed=_readonly(res_fixed),
        residual_random=_readonly(res_random),
        objective_trace=_readonly(np.asarray(trace)),
    )


def hard_targets(
    frame: PopulationFrame,
    spec: MixedEffectsSpec | None = None,
    design_weights: np.ndarray | None = None,
    allow_singular: bool = False,
) -> SoftTargets:
    """Targets for exact calibration on (x1, x2): the gamma = 0 system."""
    base = spec or MixedEffectsSpec()
    zero = MixedEffectsSpec(d_q=base.d_q, gamma=0.0)
    return build_soft_targets(frame, zero, design_weights, allow_singular)
