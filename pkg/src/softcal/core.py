"""Population and sample containers for calibration weighting.

A finite population of N units carries two covariate blocks: columns tied
to fixed effects (``x1``, whose first column is an intercept) and columns
tied to random effects (``x2``, typically small-area or cluster
indicators).  A selection indicator flags the observed sample; the study
variable is required only on that subset and is held in a masked array so
unobserved values can never silently leak into an estimate.  Per-unit
positive scale factors ``q_scale`` encode heteroscedastic residual
variances.

All containers are immutable after construction (backing arrays are
marked read-only) and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import numpy.ma as ma


class SoftCalError(Exception):
    """Base class for calibration-engine errors."""


class InvalidFrameError(SoftCalError):
    """Raised when an operation requires a valid frame but gets one that fails validation."""


class DomainError(SoftCalError):
    """Raised on evaluation outside a loss family's weight or conjugate domain."""


class SingularGramError(SoftCalError):
    """Raised when the penalized sample Gram matrix is rank deficient."""

    def __init__(self, rank: int, dim: int):
        self.rank = rank
        self.dim = dim
        super().__init__(
            f"penalized sample Gram matrix is singular: rank {rank} of {dim} "
            f"(rank gap {dim - rank})"
        )


class InfeasibleStepError(SoftCalError):
    """Raised when no damped Newton step stays inside the conjugate domain."""


@dataclass(frozen=True)
class ValidationIssue:
    invariant: str
    index: int | None = None

    def __str__(self) -> str:
        if self.index is None:
            return self.invariant
        return f"{self.invariant} (index {self.index})"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]

    @property
    def passed(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        if self.passed:
            return "frame valid"
        return "; ".join(str(i) for i in self.issues)


class SampleView(NamedTuple):
    """Sample rows extracted in population index order."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    q: np.ndarray


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PopulationFrame:
    """Finite-population design matrices, selection indicator and outcomes.

    Args:
        x1: (N, p) fixed-effect covariates; first column must be all ones.
        x2: (N, q) random-effect covariates; q may be zero.
        delta: (N,) selection indicator (truthy where the unit is sampled).
        y: study variable, observed at least wherever ``delta`` is set.
            Accepts a plain array (NaN entries are treated as missing) or a
            masked array; ``None`` for weight-only problems.
        q_scale: (N,) strictly positive heteroscedasticity factors,
            default all ones.
    """

    x1: np.ndarray
    x2: np.ndarray
    delta: np.ndarray
    y: ma.MaskedArray | None = None
    q_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        x1 = np.atleast_2d(np.asarray(self.x1, dtype=float))
        x2 = np.asarray(self.x2, dtype=float)
        if x2.ndim == 1:
            x2 = x2.reshape(len(x2), 0) if x2.size == 0 else x2.reshape(-1, 1)
        delta = np.asarray(self.delta).astype(bool)
        n_total = x1.shape[0]
        if x2.shape[0] != n_total and x2.size == 0:
            x2 = np.zeros((n_total, 0))
        object.__setattr__(self, "x1", _readonly(x1))
        object.__setattr__(self, "x2", _readonly(x2))
        object.__setattr__(self, "delta", _readonly(delta))
        if self.y is not None:
            y = self.y
            if not isinstance(y, ma.MaskedArray):
                y = np.asarray(y, dtype=float)
                y = ma.masked_invalid(y)
            else:
                y = ma.masked_invalid(y.astype(float))
            y.harden_mask()
            object.__setattr__(self, "y", y)
        qs = self.q_scale
        if qs is None:
            qs = np.ones(n_total)
        object.__setattr__(self, "q_scale", _readonly(np.asarray(qs, dtype=float)))

    @property
    def n_total(self) -> int:
        """Population size N."""
        return self.x1.shape[0]

    @property
    def n_sample(self) -> int:
        """Sample size n = number of selected units."""
        return int(self.delta.sum())

    @property
    def p(self) -> int:
        return self.x1.shape[1]

    @property
    def q(self) -> int:
        return self.x2.shape[1]

    @property
    def x_full(self) -> np.ndarray:
        """(N, p+q) stacked covariate matrix."""
        return np.hstack([self.x1, self.x2])

    @cached_property
    def validation(self) -> ValidationReport:
        return validate_frame(self)


def validate_frame(frame: PopulationFrame) -> ValidationReport:
    """Check every frame invariant; report-style, never raises."""
    issues: list[ValidationIssue] = []
    n_total = frame.n_total

    if frame.x2.shape[0] != n_total:
        issues.append(ValidationIssue("x1 and x2 row counts differ"))
    if frame.delta.shape != (n_total,):
        issues.append(ValidationIssue("delta length does not match population size"))
    if frame.q_scale.shape != (n_total,):
        issues.append(ValidationIssue("q_scale length does not match population size"))
    if frame.y is not None and frame.y.shape != (n_total,):
        issues.append(ValidationIssue("y length does not match population size"))
    if issues:
        return ValidationReport(tuple(issues))

    if frame.p == 0 or not np.all(frame.x1[:, 0] == 1.0):
        bad = int(np.argmin(frame.x1[:, 0] == 1.0)) if frame.p else None
        issues.append(ValidationIssue("first column of x1 must be all ones", bad))
    if not np.all(np.isfinite(frame.x1)) or not np.all(np.isfinite(frame.x2)):
        issues.append(ValidationIssue("covariates must be finite"))

    n = frame.n_sample
    if n == 0:
        issues.append(ValidationIssue("sample is empty (no delta = 1)"))
    if frame.y is not None:
        missing = frame.delta & ma.getmaskarray(frame.y)
        if missing.any():
            issues.append(
                ValidationIssue("y missing where selected", int(np.argmax(missing)))
            )
    nonpos = frame.q_scale <= 0
    if nonpos.any():
        issues.append(
            ValidationIssue("q_scale nonpositive", int(np.argmax(nonpos)))
        )
    elif not np.all(np.isfinite(frame.q_scale)):
        issues.append(ValidationIssue("q_scale must be finite"))
    return ValidationReport(tuple(issues))


def sample_view(frame: PopulationFrame) -> SampleView:
    """Extract selected rows (x1, x2, y, q) in population index order.

    Raises:
        InvalidFrameError: if the frame fails validation.
    """
    report = frame.validation
    if not report.passed:
        raise InvalidFrameError(str(report))
    sel = frame.delta
    if frame.y is None:
        ys = np.full(int(sel.sum()), np.nan)
    else:
        ys = np.asarray(frame.y[sel])
    return SampleView(frame.x1[sel], frame.x2[sel], ys, frame.q_scale[sel])


def restrict_frame(frame: PopulationFrame, keep: np.ndarray) -> PopulationFrame:
    """Subset a frame to the units flagged by a boolean mask."""
    keep = np.asarray(keep, dtype=bool)
    y = None if frame.y is None else frame.y[keep]
    return PopulationFrame(
        x1=frame.x1[keep],
        x2=frame.x2[keep],
        delta=frame.delta[keep],
        y=y,
        q_scale=frame.q_scale[keep],
    )


def mask_unselected(y: np.ndarray, delta: np.ndarray) -> ma.MaskedArray:
    """Mask outcome values off the selected sample.

    Convenience for synthetic data: the generator knows every y but the
    estimation frame must only expose the selected ones.
    """
    return ma.masked_array(np.asarray(y, dtype=float), mask=~np.asarray(delta, bool))


@dataclass(frozen=True)
class MixedEffectsSpec:
    """Random-effect correlation structure and calibration penalty.

    ``d_q`` is the q x q positive-definite correlation structure of the
    random effects (identity by default); ``gamma`` is the nonnegative
    penalty, interpretable as the residual-to-random-effect variance
    ratio.  gamma = 0 reproduces hard (exact) calibration on x2.
    """

    d_q: np.ndarray | None = None
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.d_q is not None:
            dq = np.asarray(self.d_q, dtype=float)
            if dq.ndim != 2 or dq.shape[0] != dq.shape[1]:
                raise ValueError("d_q must be a square matrix")
            if not np.allclose(dq, dq.T, atol=1e-12):
                raise ValueError("d_q must be symmetric within 1e-12")
            if dq.size and np.linalg.eigvalsh(dq).min() <= 0:
                raise ValueError("d_q must be positive definite")
            object.__setattr__(self, "d_q", _readonly(dq))

    def d_q_for(self, q: int) -> np.ndarray:
        """The correlation structure, defaulting to the identity of size q."""
        if self.d_q is None:
            return np.eye(q)
        if self.d_q.shape[0] != q:
            raise ValueError(
                f"d_q has size {self.d_q.shape[0]} but frame has {q} random-effect columns"
            )
        return np.asarray(self.d_q)
