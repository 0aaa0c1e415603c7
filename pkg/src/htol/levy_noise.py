"""Driving-noise components: exact samplers and analytic summaries.

Three component families are supported: per-axis symmetric alpha-stable,
isotropic alpha-stable, and compound Poisson with jumps along a fixed
direction.  Every component knows how to sample its increment exactly in
law, report the interval of finite tail moments, and evaluate the tail
integrals entering the effective drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "StableAxisSpec",
    "IsotropicStableSpec",
    "CompoundPoissonSpec",
    "DeterministicJump",
    "ExponentialJump",
    "ParetoJump",
    "EmpiricalJump",
    "LevySpec",
    "ThetaCInterval",
    "sample_stable_1d",
    "sample_compound_poisson",
    "theta_c",
    "effective_drift",
    "stable_kernel_constant",
    "stream_for",
]

# stream component ids used to derive per-(path, component) generators
STREAM_DIFFUSION = 0
STREAM_STABLE = 1
STREAM_POISSON = 2
STREAM_REFINE = 3


class ParameterError(ValueError):
    """Raised for invalid noise parameters."""


class UnsupportedAnalyticError(ValueError):
    """Raised when a closed-form summary is requested for an empirical law."""


def stream_for(master_seed: int, path_index: int, component: int) -> np.random.Generator:
    """Derive a dedicated RNG stream for one (path, component) pair.

    Streams are independent of scheduling: the same (seed, path, component)
    triple always yields the same sequence, regardless of thread count.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(int(path_index), int(component)))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------

def sample_stable_1d(alpha: float, eta: float, dt: float, rng: np.random.Generator,
                     size=None):
    """Symmetric alpha-stable increment with CF exp(-dt*eta*|xi|^alpha).

    Uses the Chambers-Mallows-Stuck transform, which is exact in law; the
    boundary alpha = 2 is routed to the Gaussian with matching CF
    exp(-dt*eta*xi^2), i.e. variance 2*eta*dt.
    """
    if not (0.0 < alpha <= 2.0):
        raise ParameterError(f"stability index must lie in (0, 2], got {alpha}")
    if eta <= 0.0 or dt <= 0.0:
        raise ParameterError("scale eta and step dt must be positive")
    if alpha == 2.0:
        return rng.normal(0.0, math.sqrt(2.0 * eta * dt), size=size)
    scale = (eta * dt) ** (1.0 / alpha)
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=size)
    e = rng.standard_exponential(size=size)
    if abs(alpha - 1.0) < 1e-14:
        return scale * np.tan(u)
    return scale * (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)
                    * (np.cos((1.0 - alpha) * u) / e) ** ((1.0 - alpha) / alpha))


def stable_kernel_constant(d: int, alpha: float) -> float:
    """Normalizing constant of the alpha-stable jump kernel in dimension d.

    C(d, a) = a * 2^(a-1) * Gamma((a+d)/2) / (pi^(d/2) * Gamma(1 - a/2));
    with this constant the Levy density eta*C(d,a)/|y|^(d+a) reproduces the
    characteristic exponent eta*|xi|^alpha.  Tends to 0 as alpha -> 2.
    """
    if d < 1:
        raise ParameterError("dimension must be >= 1")
    if not (0.0 < alpha < 2.0):
        if alpha == 2.0:
            return 0.0
        raise ParameterError(f"alpha must lie in (0, 2), got {alpha}")
    log_c = (math.log(alpha) + (alpha - 1.0) * math.log(2.0)
             + gammaln((alpha + d) / 2.0)
             - (d / 2.0) * math.log(math.pi) - gammaln(1.0 - alpha / 2.0))
    return float(math.exp(log_c))


# ---------------------------------------------------------------------------
# jump laws for compound Poisson components
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeterministicJump:
    """All jumps have the same positive size."""
    size: float

    def __post_init__(self):
        if self.size <= 0:
            raise ParameterError("jump size must be positive")

    def sample(self, n, rng):
        return np.full(n, self.size)

    def mean(self):
        return self.size

    def tail_mean(self, c):
        """E[S * 1{S > c}]."""
        return self.size if self.size > c else 0.0

    def truncated_mean(self, c):
        """E[S * 1{S <= c}]."""
        return self.size if self.size <= c else 0.0

    def moment_sup(self):
        return math.inf, False

    def expectation(self, f):
        return float(np.asarray(f(np.array([self.size])))[0])


@dataclass(frozen=True)
class ExponentialJump:
    """Exponentially distributed jump sizes."""
    mean_size: float

    def __post_init__(self):
        if self.mean_size <= 0:
            raise ParameterError("mean jump size must be positive")

    def sample(self, n, rng):
        return rng.exponential(self.mean_size, size=n)

    def mean(self):
        return self.mean_size

    def tail_mean(self, c):
        m = self.mean_size
        if c <= 0:
            return m
        return (c + m) * math.exp(-c / m)

    def truncated_mean(self, c):
        return self.mean_size - self.tail_mean(c)

    def moment_sup(self):
        return math.inf, False

    def density(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s >= 0, np.exp(-s / self.mean_size) / self.mean_size, 0.0)

    def expectation(self, f, n_nodes=160):
        # Gauss-Laguerre: E f(S) = int f(m u) e^-u du
        x, w = np.polynomial.laguerre.laggauss(min(n_nodes, 170))
        return float(np.sum(w * np.asarray(f(self.mean_size * x))))


@dataclass(frozen=True)
class ParetoJump:
    """Pareto jump sizes: P(S > s) = (minimum/s)^shape for s >= minimum."""
    shape: float
    minimum: float

    def __post_init__(self):
        if self.shape <= 0 or self.minimum <= 0:
            raise ParameterError("Pareto shape and minimum must be positive")

    def sample(self, n, rng):
        return self.minimum * rng.uniform(size=n) ** (-1.0 / self.shape)

    def mean(self):
        b, u0 = self.shape, self.minimum
        if b <= 1:
            return math.inf
        return b * u0 / (b - 1.0)

    def tail_mean(self, c):
        b, u0 = self.shape, self.minimum
        if b <= 1:
            return math.inf
        lo = max(c, u0)
        return b * u0 ** b * lo ** (1.0 - b) / (b - 1.0)

    def truncated_mean(self, c):
        b, u0 = self.shape, self.minimum
        if c <= u0:
            return 0.0
        if abs(b - 1.0) < 1e-12:
            return u0 * math.log(c / u0)
        return b * u0 ** b * (u0 ** (1.0 - b) - c ** (1.0 - b)) / (b - 1.0)

    def moment_sup(self):
        return self.shape, False

    def density(self, s):
        s = np.asarray(s, dtype=float)
        b, u0 = self.shape, self.minimum
        return np.where(s >= u0, b * u0 ** b * s ** (-b - 1.0), 0.0)

    def expectation(self, f, n_panels=40, n_nodes=32):
        # substitute S = u0 * t^(-1/shape), t ~ U(0,1); refine toward t = 0
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        total = 0.0
        for k in range(n_panels):
            a, b = 2.0 ** -(k + 1), 2.0 ** -k
            mid, half = (a + b) / 2, (b - a) / 2
            t = mid + half * x
            total += half * np.sum(w * np.asarray(f(self.minimum * t ** (-1.0 / self.shape))))
        return float(total)


@dataclass(frozen=True)
class EmpiricalJump:
    """Jump sizes resampled from an observed sample (no analytic summaries)."""
    sample_values: tuple

    def __post_init__(self):
        v = np.asarray(self.sample_values, dtype=float)
        if v.ndim != 1 or v.size == 0 or np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ParameterError("empirical sample must be positive, finite, 1-d")

    def sample(self, n, rng):
        v = np.asarray(self.sample_values, dtype=float)
        return v[rng.integers(0, v.size, size=n)]

    def mean(self):
        return float(np.mean(self.sample_values))

    def tail_mean(self, c):
        raise UnsupportedAnalyticError("empirical jump law has no analytic tail")

    def truncated_mean(self, c):
        v = np.asarray(self.sample_values, dtype=float)
        return float(np.mean(np.where(v <= c, v, 0.0)))

    def moment_sup(self):
        raise UnsupportedAnalyticError("empirical jump law has no analytic moments")

    def expectation(self, f):
        v = np.asarray(self.sample_values, dtype=float)
        return float(np.mean(np.asarray(f(v))))


# ---------------------------------------------------------------------------
# component specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StableAxisSpec:
    """Independent 1-d symmetric alpha-stable components along each axis.

    One common stability index; per-axis scales eta_i > 0.
    """
    alpha: float
    eta: tuple

    def __post_init__(self):
        if not (0.0 < self.alpha < 2.0):
            raise ParameterError("axis-stable alpha must lie in (0, 2)")
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim != 1 or np.any(eta <= 0):
            raise ParameterError("eta must be a 1-d vector of positive scales")
        object.__setattr__(self, "eta", tuple(float(v) for v in eta))

    @property
    def dim(self):
        return len(self.eta)

    def theta_interval(self):
        return ThetaCInterval(self.alpha, False)


@dataclass(frozen=True)
class IsotropicStableSpec:
    """Rotationally invariant alpha-stable component, CF exp(-t*eta*|xi|^alpha)."""
    alpha: float
    eta: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 2.0):
            raise ParameterError("isotropic alpha must lie in (0, 2)")
        if self.eta <= 0:
            raise ParameterError("eta must be positive")

    def theta_interval(self):
        return ThetaCInterval(self.alpha, False)


@dataclass(frozen=True)
class CompoundPoissonSpec:
    """Compound Poisson jumps of law `jump_law` along direction `direction`."""
    rate: float
    jump_law: object
    direction: tuple

    def __post_init__(self):
        if self.rate <= 0:
            raise ParameterError("event rate must be positive")
        w = np.asarray(self.direction, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.all(w == 0):
            raise ParameterError("direction must be a nonzero finite vector")
        object.__setattr__(self, "direction", tuple(float(v) for v in w))

    @property
    def dim(self):
        return len(self.direction)

    @property
    def direction_norm(self):
        return float(np.linalg.norm(self.direction))

    def theta_interval(self):
        sup, closed = self.jump_law.moment_sup()
        return ThetaCInterval(sup, closed)

    def small_jump_compensator(self):
        """rate * E[S 1{S|w| <= 1}] * w: the drift that compensates small jumps.

        Simulating raw (uncompensated) jumps while keeping the generator's
        twice-compensated form requires subtracting this vector from the
        pathwise drift.
        """
        w = np.asarray(self.direction)
        return self.rate * self.jump_law.truncated_mean(1.0 / self.direction_norm) * w


@dataclass(frozen=True)
class LevySpec:
    """Composite pure-jump driver: drift plus independent components."""
    drift: tuple
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        d = np.asarray(self.drift, dtype=float)
        if d.ndim != 1 or not np.all(np.isfinite(d)):
            raise ParameterError("drift must be a finite vector")
        object.__setattr__(self, "drift", tuple(float(v) for v in d))
        object.__setattr__(self, "components", tuple(self.components))
        for c in self.components:
            cd = getattr(c, "dim", None)
            if cd is not None and cd != len(self.drift):
                raise ParameterError("component dimension mismatch")

    @property
    def dim(self):
        return len(self.drift)

    def stable_components(self):
        return [c for c in self.components
                if isinstance(c, (StableAxisSpec, IsotropicStableSpec))]

    def poisson_components(self):
        return [c for c in self.components if isinstance(c, CompoundPoissonSpec)]


# ---------------------------------------------------------------------------
# tail-moment interval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaCInterval:
    """Interval of exponents with finite tail moment of the Levy measure.

    Downward closed: it is (0, sup) when open, (0, sup] when closed_at_sup.
    sup = inf means every positive moment of the tail is finite.
    """
    sup: float
    closed_at_sup: bool = False

    def __post_init__(self):
        if not (self.sup > 0):
            raise ParameterError("interval supremum must be positive")

    def contains(self, theta: float) -> bool:
        if theta <= 0:
            return False
        if theta < self.sup:
            return True
        return bool(self.closed_at_sup and theta == self.sup)

    def intersect(self, other: "ThetaCInterval") -> "ThetaCInterval":
        if self.sup < other.sup:
            return self
        if other.sup < self.sup:
            return other
        return ThetaCInterval(self.sup, self.closed_at_sup and other.closed_at_sup)


def theta_c(spec: LevySpec) -> ThetaCInterval:
    """Finite-tail-moment interval of the composite driver.

    Stable components contribute (0, alpha); compound Poisson components
    contribute the moment interval of their jump law (all of (0, inf) for
    bounded or exponential jumps, (0, shape) for Pareto).  The composite is
    the intersection.  A driver with no jump component has every moment.
    """
    interval = ThetaCInterval(math.inf, False)
    for comp in spec.components:
        interval = interval.intersect(comp.theta_interval())
    return interval


def effective_drift(spec: LevySpec, ell) -> tuple:
    """Constant drift corrected for the mean of large jumps.

    Returns (ell_tilde, first_moment_finite).  When the driver has a finite
    first tail moment, ell_tilde = ell + drift + integral of y over |y| > 1
    against the Levy measure: symmetric stable components contribute zero,
    a compound Poisson component on direction w contributes
    rate * E[S * 1{S|w| > 1}] * w.  Otherwise ell_tilde = ell + drift.
    """
    ell = np.asarray(ell, dtype=float)
    interval = theta_c(spec)
    ell_tilde = ell + np.asarray(spec.drift)
    finite = interval.contains(1.0)
    if finite:
        for comp in spec.poisson_components():
            w = np.asarray(comp.direction)
            wn = comp.direction_norm
            tail = comp.jump_law.tail_mean(1.0 / wn)
            ell_tilde = ell_tilde + comp.rate * tail * w
    return ell_tilde, finite


def sample_compound_poisson(spec: CompoundPoissonSpec, dt: float,
                            rng: np.random.Generator, t0: float = 0.0):
    """Event-exact compound Poisson increment over a window of length dt.

    Draws exponential interarrivals within the window; returns the summed
    d-vector increment together with the jump log [(time, size), ...] with
    times offset by t0.  The log is what event-driven stepping consumes.
    """
    if dt <= 0:
        raise ParameterError("dt must be positive")
    w = np.asarray(spec.direction)
    increment = np.zeros_like(w)
    log = []
    t = rng.exponential(1.0 / spec.rate)
    while t < dt:
        size = float(spec.jump_law.sample(1, rng)[0])
        increment = increment + size * w
        log.append((t0 + t, size))
        t += rng.exponential(1.0 / spec.rate)
    return increment, log
