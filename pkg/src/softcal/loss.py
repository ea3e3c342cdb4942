"""Loss families for calibration weights, with conjugates and weight maps.

Each family is a strictly convex per-unit distance Q(w) between a
calibration weight and 1, together with its convex conjugate
g(z) = sup_w {z w - Q(w)} and the weight map w(z) = g'(z) = (Q')^{-1}(z).
The conjugate's curvature satisfies g''(z) * Q''(w(z)) = 1 everywhere w(z)
is interior, which is what makes the dual Newton iteration exact for the
square family and well conditioned for the rest.

Families and their domains (W = domain of Q, C = conjugate domain of g):

===================  =========================  =====================
family               W                           C
===================  =========================  =====================
square               all reals                   all reals
entropy_divergence   w > 0                       all reals
empirical_likelihood w > 0                       q z < 1
maximum_entropy      w > 1                       all reals
bounded_logistic     L < w < U                   all reals
truncated_linear     L <= w <= U (inf outside)   all reals
===================  =========================  =====================

The per-unit scale q enters exactly as a multiplier of z inside g and w
and as 1/q in front of Q.  The bounded families clamp weights to a band
[L, U] with 0 <= L < 1 < U: ``bounded_logistic`` approaches the band
edges only asymptotically, ``truncated_linear`` attains them on flats
where w'(z) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError

BOUNDED_FAMILIES = frozenset({"bounded_logistic", "truncated_linear"})
FAMILIES = (
    "square",
    "entropy_divergence",
    "empirical_likelihood",
    "maximum_entropy",
    "bounded_logistic",
    "truncated_linear",
)

# CLI shorthand <-> family name
FAMILY_ALIASES = {
    "sq": "square",
    "ent": "entropy_divergence",
    "el": "empirical_likelihood",
    "me": "maximum_entropy",
    "logit": "bounded_logistic",
    "trunc": "truncated_linear",
}


@dataclass(frozen=True)
class LossSpec:
    """A loss family plus band limits for the bounded families."""

    family: str
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self) -> None:
        fam = FAMILY_ALIASES.get(self.family, self.family)
        object.__setattr__(self, "family", fam)
        if fam not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if fam in BOUNDED_FAMILIES:
            if self.lower is None or self.upper is None:
                raise ValueError(f"{fam} requires lower and upper bounds")
            if not (0.0 <= self.lower < 1.0 < self.upper):
                raise ValueError("bounds must satisfy 0 <= L < 1 < U")
        elif self.lower is not None or self.upper is not None:
            raise ValueError(f"{fam} does not take bounds")

    @property
    def bounded(self) -> bool:
        return self.family in BOUNDED_FAMILIES


def _as_arrays(z, q):
    z = np.asarray(z, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.broadcast_arrays(z, q)


# logistic-band reparameterization: with a = q(U-L)/((1-L)(U-1)) and
# b = log((1-L)/(U-1)), the weight map is w(z) = L + (U-L)*sigmoid(a z + b)
# and g(z) = L z + (U-L)/a * (softplus(a z + b) - softplus(b)).
def _logit_ab(spec: LossSpec, q):
    L, U = spec.lower, spec.upper
    a = q * (U - L) / ((1.0 - L) * (U - 1.0))
    b = np.log((1.0 - L) / (U - 1.0))
    return L, U, a, b


def _softplus(t):
    return np.logaddexp(0.0, t)


def _sigmoid(t):
    t = np.asarray(t, dtype=float)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def loss_value(spec: LossSpec, w, q=1.0):
    """Per-unit loss Q(w) with scale factor q.

    Returns +inf outside the band for ``truncated_linear``; raises
    DomainError for families whose Q is undefined (not just infinite)
    outside its domain.
    """
    w, q = _as_arrays(w, q)
    fam = spec.family
    if fam == "square":
        val = (w - 1.0) ** 2 / (2.0 * q)
    elif fam == "entropy_divergence":
        if np.any(w <= 0):
            raise DomainError("entropy_divergence requires w > 0")
        val = (w * np.log(w) - w + 1.0) / q
    elif fam == "empirical_likelihood":
        if np.any(w <= 0):
            raise DomainError("empirical_likelihood requires w > 0")
        val = (-np.log(w) - 1.0 + w) / q
    elif fam == "maximum_entropy":
        if np.any(w <= 1):
            raise DomainError("maximum_entropy requires w > 1")
        val = (w - 1.0) * (np.log(w - 1.0) - 1.0) / q
    elif fam == "bounded_logistic":
        L, U = spec.lower, spec.upper
        if np.any(w <= L) or np.any(w >= U):
            raise DomainError("bounded_logistic requires L < w < U")
        c = (1.0 - L) * (U - 1.0) / (q * (U - L))
        val = c * (
            (w - L) * np.log((w - L) / (1.0 - L))
            + (U - w) * np.log((U - w) / (U - 1.0))
        )
    elif fam == "truncated_linear":
        L, U = spec.lower, spec.upper
        val = np.where(
            (w >= L) & (w <= U), (w - 1.0) ** 2 / (2.0 * q), np.inf
        )
    else:  # pragma: no cover
        raise AssertionError(fam)
    return val if val.ndim else float(val)


def in_conjugate_domain(spec: LossSpec, z, q=1.0) -> bool:
    """Feasibility predicate used for Newton step control."""
    z, q = _as_arrays(z, q)
    if spec.family == "empirical_likelihood":
        return bool(np.all(q * z < 1.0))
    return bool(np.all(np.isfinite(z)))


def _check_domain(spec: LossSpec, z, q):
    if spec.family == "empirical_likelihood" and np.any(q * z >= 1.0):
        bad = int(np.argmax(q * z >= 1.0))
        raise DomainError(
            f"empirical_likelihood conjugate requires q*z < 1 (violated at index {bad})"
        )


def weight_map(spec: LossSpec, z, q=1.0):
    """Weight map w(z) = (Q')^{-1}(z) = g'(z)."""
    z, q = _as_arrays(z, q)
    _check_domain(spec, z, q)
    fam = spec.family
    with np.errstate(over="ignore"):
        if fam == "square":
            val = 1.0 + q * z
        elif fam == "entropy_divergence":
            val = np.exp(q * z)
        elif fam == "empirical_likelihood":
            val = 1.0 / (1.0 - q * z)
        elif fam == "maximum_entropy":
            val = 1.0 + np.exp(q * z)
        elif fam == "bounded_logistic":
            L, U, a, b = _logit_ab(spec, q)
            val = L + (U - L) * _sigmoid(a * z + b)
        elif fam == "truncated_linear":
            L, U = spec.lower, spec.upper
            val = np.clip(1.0 + q * z, L, U)
        else:  # pragma: no cover
            raise AssertionError(fam)
    return val if val.ndim else float(val)


def weight_map_deriv(spec: LossSpec, z, q=1.0):
    """w'(z) = g''(z); strictly positive except on truncated-linear flats.

    At the exact kink points of ``truncated_linear`` the band value q is
    used (deterministic measure-zero convention).
    """
    z, q = _as_arrays(z, q)
    _check_domain(spec, z, q)
    fam = spec.family
    with np.errstate(over="ignore"):
        if fam == "square":
            val = q * np.ones_like(z)
        elif fam == "entropy_divergence":
            val = q * np.exp(q * z)
        elif fam == "empirical_likelihood":
            val = q / (1.0 - q * z) ** 2
        elif fam == "maximum_entropy":
            val = q * np.exp(q * z)
        elif fam == "bounded_logistic":
            L, U, a, b = _logit_ab(spec, q)
            s = _sigmoid(a * z + b)
            val = a * (U - L) * s * (1.0 - s)
        elif fam == "truncated_linear":
            L, U = spec.lower, spec.upper
            w_lin = 1.0 + q * z
            val = np.where((w_lin >= L) & (w_lin <= U), q, 0.0)
        else:  # pragma: no cover
            raise AssertionError(fam)
    return val if val.ndim else float(val)


def conjugate_value(spec: LossSpec, z, q=1.0):
    """Convex conjugate g(z) = sup_w {z w - Q(w)}."""
    z, q = _as_arrays(z, q)
    _check_domain(spec, z, q)
    fam = spec.family
    with np.errstate(over="ignore"):
        if fam == "square":
            val = z + q * z**2 / 2.0
        elif fam == "entropy_divergence":
            val = (np.exp(q * z) - 1.0) / q
        elif fam == "empirical_likelihood":
            val = -np.log1p(-q * z) / q
        elif fam == "maximum_entropy":
            val = z + np.exp(q * z) / q
        elif fam == "bounded_logistic":
            L, U, a, b = _logit_ab(spec, q)
            val = L * z + (U - L) / a * (_softplus(a * z + b) - _softplus(b))
        elif fam == "truncated_linear":
            L, U = spec.lower, spec.upper
            z_lo, z_hi = (L - 1.0) / q, (U - 1.0) / q
            val = np.where(
                z < z_lo,
                z * L - (L - 1.0) ** 2 / (2.0 * q),
                np.where(
                    z > z_hi,
                    z * U - (U - 1.0) ** 2 / (2.0 * q),
                    z + q * z**2 / 2.0,
                ),
            )
        else:  # pragma: no cover
            raise AssertionError(fam)
    return val if val.ndim else float(val)


def conjugate_grad(spec: LossSpec, z, q=1.0):
    """g'(z); identical to the weight map."""
    return weight_map(spec, z, q)


def conjugate_hess(spec: LossSpec, z, q=1.0):
    """g''(z); identical to w'(z)."""
    return weight_map_deriv(spec, z, q)


def loss_curvature(spec: LossSpec, w, q=1.0):
    """Q''(w) on the interior of the weight domain."""
    w, q = _as_arrays(w, q)
    fam = spec.family
    if fam == "square":
        val = 1.0 / q * np.ones_like(w)
    elif fam == "entropy_divergence":
        val = 1.0 / (q * w)
    elif fam == "empirical_likelihood":
        val = 1.0 / (q * w**2)
    elif fam == "maximum_entropy":
        val = 1.0 / (q * (w - 1.0))
    elif fam == "bounded_logistic":
        L, U = spec.lower, spec.upper
        val = (1.0 - L) * (U - 1.0) / (q * (w - L) * (U - w))
    elif fam == "truncated_linear":
        val = 1.0 / q * np.ones_like(w)
    else:  # pragma: no cover
        raise AssertionError(fam)
    return val if val.ndim else float(val)


def conjugate_domain_grid(spec: LossSpec, q: float = 1.0, num: int = 100) -> np.ndarray:
    """A grid of z values interior to the conjugate domain.

    For the truncated-linear family the grid stays on the linear band,
    the only region where the curvature identity g'' * Q''(w(z)) = 1
    applies (the flats have w' = 0).
    """
    if spec.family == "empirical_likelihood":
        return np.linspace(-3.0, 0.999 / q - 1e-3, num)
    if spec.family == "truncated_linear":
        lo = (spec.lower - 1.0) / q
        hi = (spec.upper - 1.0) / q
        pad = 1e-6 * (hi - lo)
        return np.linspace(lo + pad, hi - pad, num)
    return np.linspace(-3.0, 3.0, num)
