"""Two-stage cluster-sampling and causal extensions.

Units are sampled in two stages: first k of K clusters with cluster
weights d_i, then n_i units inside each sampled cluster with unit
weights N_i / n_i, giving per-unit design weights d_ij = d_i N_i / n_i.
The calibration system is the usual one with every sample Gram term and
population total multiplied by d_ij; the frame's x2 block holds the
canonical cluster-indicator basis, so the relaxed constraints soften
the per-cluster response totals while the fixed-effect totals (whose
intercept column pins the weighted population size to the design-weight
total) stay exact.

Variance estimation aggregates the unit influence values into
cluster-level pseudo-values

    psi_i = (N_i / n_i) sum_j { B x_{ij,sc} + delta_ij w_ij eta_ij },

and applies a first-stage variance form sum_{i,j} Omega_ij psi_i psi_j.
The default Omega treats the first stage as independent draws
(with-replacement / PPS style), giving the between-cluster estimator
k/(k-1) sum_i (d_i psi_i - mean)^2; a user-supplied Omega matrix covers
other designs.

The causal estimator balances each treatment arm to the combined
design-weighted totals with its own multiplier vector and penalty, and
differences the two weighted means; its pseudo-values are the per-arm
differences of the same cluster aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import loss as loss_mod
from .calibrate import SoftTargets, SolveResult, build_soft_targets, solve_newton
from .core import MixedEffectsSpec, PopulationFrame, SoftCalError, _readonly
from .estimate import EstimateReport, influence_values, weighted_mean
from .tune import reml_gamma_seed, select_gamma

__all__ = [
    "ClusterDesign",
    "CausalFrame",
    "build_cluster_targets",
    "cluster_estimate",
    "cluster_pseudo_values",
    "cluster_variance",
    "causal_ate",
]


@dataclass(frozen=True, eq=False)
class ClusterDesign:
    """First/second-stage design metadata for the sampled units.

    ``cluster_id`` maps each frame row to a code in [0, k); the per-cluster
    arrays are aligned with those codes.
    """

    cluster_id: np.ndarray  # (N,) int codes
    d_cluster: np.ndarray  # (k,) first-stage weights d_i
    n_per: np.ndarray  # (k,) sampled units n_i
    n_pop_per: np.ndarray  # (k,) cluster population sizes N_i

    def __post_init__(self) -> None:
        cid = np.asarray(self.cluster_id, dtype=int)
        d = np.asarray(self.d_cluster, dtype=float)
        n_per = np.asarray(self.n_per, dtype=int)
        n_pop = np.asarray(self.n_pop_per, dtype=int)
        k = len(d)
        if cid.min(initial=0) < 0 or cid.max(initial=-1) >= k:
            raise ValueError("cluster_id contains an unknown cluster code")
        if not (len(n_per) == len(n_pop) == k):
            raise ValueError("per-cluster arrays must share one length")
        if np.any(n_per <= 0):
            raise ValueError("every sampled cluster needs n_i > 0")
        if np.any(n_pop < n_per):
            raise ValueError("cluster population sizes must be >= sampled sizes")
        if np.any(d <= 0):
            raise ValueError("first-stage weights must be positive")
        counts = np.bincount(cid, minlength=k)
        if not np.array_equal(counts, n_per):
            raise ValueError("cluster_id counts disagree with n_per")
        for name, arr in (
            ("cluster_id", cid),
            ("d_cluster", d),
            ("n_per", n_per),
            ("n_pop_per", n_pop),
        ):
            object.__setattr__(self, name, _readonly(arr))

    @property
    def k(self) -> int:
        return len(self.d_cluster)

    @property
    def n(self) -> int:
        return int(self.n_per.sum())

    def unit_weights(self) -> np.ndarray:
        """Per-unit design weights d_ij = d_i N_i / n_i."""
        per_cluster = self.d_cluster * self.n_pop_per / self.n_per
        return per_cluster[self.cluster_id]


@dataclass(frozen=True, eq=False)
class CausalFrame:
    """Binary treatment labels for every frame unit."""

    treatment: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "treatment", _readonly(np.asarray(self.treatment).astype(bool))
        )


def build_cluster_targets(
    frame: PopulationFrame,
    design: ClusterDesign,
    spec: MixedEffectsSpec,
) -> SoftTargets:
    """Design-weighted calibration system for a two-stage sample.

    The frame's x2 block should hold the cluster-indicator dummies; the
    design weights d_ij enter the penalized Gram and both sides of every
    constraint.
    """
    if len(design.cluster_id) != frame.n_total:
        raise ValueError("design covers a different number of units than the frame")
    return build_soft_targets(frame, spec, design.unit_weights())


def cluster_estimate(
    frame: PopulationFrame,
    design: ClusterDesign,
    solve: SolveResult,
) -> float:
    """Design-weighted calibration estimate of the population mean."""
    return weighted_mean(frame, solve.weights, design.unit_weights())


def cluster_pseudo_values(
    frame: PopulationFrame,
    design: ClusterDesign,
    solve: SolveResult,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    extra_unit_terms: np.ndarray | None = None,
    allow_singular: bool = True,
    b_ridge: float | None = None,
) -> np.ndarray:
    """Cluster-level pseudo-values (N_i/n_i) sum_j of the unit influences.

    ``extra_unit_terms`` adds per-unit contributions (used by the
    bias-corrected estimator's linearization) before aggregation.
    """
    psi_unit, _ = influence_values(
        frame, solve, loss_spec, targets, design.unit_weights(),
        allow_singular=allow_singular, b_ridge=b_ridge,
    )
    if extra_unit_terms is not None:
        psi_unit = psi_unit + extra_unit_terms
    sums = np.bincount(design.cluster_id, weights=psi_unit, minlength=design.k)
    return design.n_pop_per / design.n_per * sums


def cluster_variance(
    frame: PopulationFrame,
    design: ClusterDesign,
    solve: SolveResult,
    loss_spec: loss_mod.LossSpec,
    targets: SoftTargets,
    omega: np.ndarray | None = None,
    pseudo_values: np.ndarray | None = None,
    allow_singular: bool = True,
) -> float:
    """First-stage variance estimate on the sqrt(n) scale.

    With the default independent-draws Omega this is
    n N^{-2} k/(k-1) sum_i (d_i psi_i - mean)^2; the confidence interval
    half-width is z * sqrt(V1 / n) (the model part is negligible under
    cluster sampling and omitted).
    """
    k = design.k
    if k < 2:
        raise SoftCalError("cluster variance requires at least 2 sampled clusters")
    if pseudo_values is None:
        pseudo_values = cluster_pseudo_values(
            frame, design, solve, loss_spec, targets, allow_singular=allow_singular
        )
    n = design.n
    n_eff = targets.n_effective
    dpsi = design.d_cluster * pseudo_values
    if omega is not None:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (k, k):
            raise ValueError("omega must be k x k")
        return float(n / n_eff**2 * pseudo_values @ omega @ pseudo_values)
    centered = dpsi - dpsi.mean()
    return float(n / n_eff**2 * k / (k - 1) * np.sum(centered**2))


def _arm_frame(frame: PopulationFrame, arm_selected: np.ndarray) -> PopulationFrame:
    return PopulationFrame(
        x1=frame.x1, x2=frame.x2, delta=arm_selected, y=frame.y, q_scale=frame.q_scale
    )


def _bc_extra_terms(frame, targets, solve) -> np.ndarray:
    # linearization of the outcome-model correction: active on selected
    # units only, scaled by the soft-adjustment row t_r
    proj = frame.x1 @ targets.d21.T + frame.x2 @ targets.d22.T  # (N, q)
    extra = np.zeros(frame.n_total)
    sel = frame.delta
    y_sel = np.asarray(frame.y[sel])
    extra[sel] = targets.n_effective * (proj[sel] @ targets.t_r) * y_sel
    return extra


def causal_ate(
    frame: PopulationFrame,
    causal: CausalFrame,
    design: ClusterDesign,
    spec: MixedEffectsSpec,
    loss_spec: loss_mod.LossSpec,
    gamma: float | tuple[float, float] | None = None,
    folds: int = 5,
    seed: int = 0,
    level: float = 0.95,
) -> EstimateReport:
    """Average treatment effect by per-arm soft calibration.

    Each arm is balanced to the combined design-weighted totals with its
    own multiplier vector; when ``gamma`` is None the penalty is tuned
    separately per arm (a (treated, control) pair fixes them).  The
    outcome must be observed on every sampled unit.  Variance comes from
    the between-cluster dispersion of the per-arm pseudo-value
    differences.
    """
    a = causal.treatment
    if a.shape != (frame.n_total,):
        raise ValueError("treatment length must match the frame")
    if not a.any() or a.all():
        raise SoftCalError("both treatment arms must be nonempty")

    d_ij = design.unit_weights()
    arm_results: dict[int, tuple] = {}
    for arm, selected in ((1, a), (0, ~a)):
        sub = _arm_frame(frame, selected)
        if gamma is None:
            tuned = select_gamma(
                sub, loss_spec, spec, folds=folds, seed=seed, design_weights=d_ij
            )
            g_arm = tuned.gamma_selected
            reml = tuned.reml
        else:
            g_arm = gamma[1 - arm] if isinstance(gamma, tuple) else gamma
            reml = reml_gamma_seed(sub, spec) if g_arm > 0 else None
        arm_spec = MixedEffectsSpec(d_q=spec.d_q, gamma=g_arm)
        singular_ok = g_arm == 0.0
        if g_arm == 0.0 or reml is None:
            b_ridge = 0.0
        else:
            b_ridge = np.inf if reml.boundary else reml.gamma_star
        tg = build_soft_targets(sub, arm_spec, d_ij, allow_singular=singular_ok)
        res = solve_newton(sub, loss_spec, tg, design_weights=d_ij)
        if not res.converged:
            raise SoftCalError(f"arm {arm} calibration solve did not converge")
        arm_results[arm] = (sub, tg, res, b_ridge)

    frame1, tg1, res1, ridge1 = arm_results[1]
    frame0, tg0, res0, ridge0 = arm_results[0]
    theta1 = cluster_estimate(frame1, design, res1)
    theta0 = cluster_estimate(frame0, design, res0)
    tau = theta1 - theta0

    psi1 = cluster_pseudo_values(frame1, design, res1, loss_spec, tg1, b_ridge=ridge1)
    psi0 = cluster_pseudo_values(frame0, design, res0, loss_spec, tg0, b_ridge=ridge0)
    phi = psi1 - psi0
    v1 = cluster_variance(
        frame1, design, res1, loss_spec, tg1, pseudo_values=phi
    )
    n = design.n
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(v1 / n)

    # unit-level difference of the two arms' influence values, for reporting
    p1, _ = influence_values(
        frame1, res1, loss_spec, tg1, d_ij, allow_singular=True, b_ridge=ridge1
    )
    p0, _ = influence_values(
        frame0, res0, loss_spec, tg0, d_ij, allow_singular=True, b_ridge=ridge0
    )
    psi_unit = p1 - p0

    return EstimateReport(
        theta=tau,
        v1=v1,
        v2=0.0,
        ci_low=tau - half,
        ci_high=tau + half,
        psi=_readonly(psi_unit),
        method="causal_ate",
        gamma=tg1.gamma,  # treated arm; the control arm's is tg0.gamma
        converged=res1.converged and res0.converged,
        level=level,
    )
