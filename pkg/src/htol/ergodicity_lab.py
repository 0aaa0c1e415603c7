"""Regime classification, generator quadrature, and stationary diagnostics.

The generator of the state process acts on C^2 functions as

    A f(x) = 1/2 tr(a(x) D^2 f) + <b(x) + theta, Df> + (jump part),

where the jump part integrates the twice-compensated difference against
the Levy measure.  Stable components reduce to one-dimensional singular
integrals along directions; compound Poisson components are finite-rate
expectations.  Everything here is deterministic given its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from htol.levy_noise import (
    CompoundPoissonSpec,
    IsotropicStableSpec,
    LevySpec,
    StableAxisSpec,
    ThetaCInterval,
    UnsupportedAnalyticError,
    effective_drift,
    stable_kernel_constant,
    theta_c,
)
from htol.matrix_core import LyapunovCertificate
from htol.sde_engine import PathConfig, PiecewiseOUModel, StationaryEstimate, \
    drift, simulate_ensemble

__all__ = [
    "LyapunovFunctionSpec",
    "CompactBump",
    "RegimeReport",
    "DriftConditionReport",
    "TailIndexEstimate",
    "TVDecayEstimate",
    "MomentProbeResult",
    "QuadratureError",
    "spare_capacity",
    "classify",
    "eval_generator",
    "generator_on_sample",
    "jump_part",
    "verify_foster_lyapunov",
    "mean_idleness",
    "tail_index",
    "tv_decay",
    "moment_probe",
    "shell_directions",
]


class QuadratureError(RuntimeError):
    """Raised when the singular-integral quadrature cannot reach tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


# ---------------------------------------------------------------------------
# Lyapunov-type test functions
# ---------------------------------------------------------------------------

# quintic bridge p(r) on [0, 1]: p(0)=1/2, p'(0)=0, p''(0)=1,
# p(1)=1, p'(1)=1, p''(1)=0; p(r) = r beyond 1.  Convex, C^2, positive.
_BRIDGE = np.array([0.5, 0.0, 0.5, -0.5, 1.0, -0.5])  # coefficients in r^0..r^5
_BRIDGE_D1 = np.polynomial.polynomial.polyder(_BRIDGE)
_BRIDGE_D2 = np.polynomial.polynomial.polyder(_BRIDGE, 2)


def _bridge(r):
    r = np.asarray(r, dtype=float)
    inside = r < 1.0
    out = np.where(inside, np.polynomial.polynomial.polyval(r, _BRIDGE), r)
    return out


def _bridge_d1(r):
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, np.polynomial.polynomial.polyval(r, _BRIDGE_D1), 1.0)


def _bridge_d2(r):
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, np.polynomial.polynomial.polyval(r, _BRIDGE_D2), 0.0)


@dataclass(frozen=True)
class LyapunovFunctionSpec:
    """Norm-like test function built from a positive definite matrix Q.

    family "polynomial": V(x) = phi(x)^theta; family "exponential":
    V(x) = exp(theta * phi(x)).  Here phi is the smooth convex bridge that
    agrees with the Q-norm ||x||_Q outside its unit ball.  The exponential
    family requires theta < smallest admissible growth rate of the driver.
    """
    Q: tuple
    theta: float
    family: str = "polynomial"

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        np.linalg.cholesky(Q)
        if self.theta <= 0:
            raise ValueError("exponent must be positive")
        if self.family not in ("polynomial", "exponential"):
            raise ValueError("family must be polynomial or exponential")
        object.__setattr__(self, "Q", tuple(tuple(float(v) for v in row) for row in Q))

    @property
    def dim(self):
        return len(self.Q)

    def q_mat(self):
        return np.asarray(self.Q)

    @property
    def growth_exponent(self):
        """Polynomial growth order used by tail-truncation bounds."""
        return self.theta if self.family == "polynomial" else math.inf

    def _radius(self, x):
        Q = self.q_mat()
        qx = x @ Q
        r2 = np.einsum("pi,pi->p", qx, x, optimize=False)
        return np.sqrt(np.maximum(r2, 0.0)), qx

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r, _ = self._radius(x)
        phi = _bridge(r)
        if self.family == "polynomial":
            return phi ** self.theta
        return np.exp(self.theta * phi)

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r, qx = self._radius(x)
        tiny = r < 1e-12
        r_safe = np.where(tiny, 1.0, r)
        # d phi = p'(r) Qx / r, with smooth limit p''(0) Qx at the origin
        dphi = np.where(tiny[:, None], _bridge_d2(0.0) * qx,
                        (_bridge_d1(r_safe) / r_safe)[:, None] * qx)
        phi = _bridge(r)
        if self.family == "polynomial":
            return (self.theta * phi ** (self.theta - 1.0))[:, None] * dphi
        return (self.theta * np.exp(self.theta * phi))[:, None] * dphi

    def hess(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        Q = self.q_mat()
        r, qx = self._radius(x)
        tiny = r < 1e-12
        r_safe = np.where(tiny, 1.0, r)
        outer = qx[:, :, None] * qx[:, None, :]
        p1 = _bridge_d1(r_safe)
        p2 = _bridge_d2(r_safe)
        # D^2 phi = p'' (Qx)(Qx)'/r^2 + p' (Q/r - (Qx)(Qx)'/r^3)
        hphi = (p2 / r_safe ** 2 - p1 / r_safe ** 3)[:, None, None] * outer \
            + (p1 / r_safe)[:, None, None] * Q[None, :, :]
        hphi = np.where(tiny[:, None, None], _bridge_d2(0.0) * Q[None, :, :], hphi)
        dphi = np.where(tiny[:, None], _bridge_d2(0.0) * qx,
                        (p1 / r_safe)[:, None] * qx)
        phi = _bridge(r)
        th = self.theta
        douter = dphi[:, :, None] * dphi[:, None, :]
        if self.family == "polynomial":
            return (th * (th - 1.0) * phi ** (th - 2.0))[:, None, None] * douter \
                + (th * phi ** (th - 1.0))[:, None, None] * hphi
        ev = np.exp(th * phi)
        return ev[:, None, None] * (th ** 2 * douter + th * hphi)


@dataclass(frozen=True)
class CompactBump:
    """Smooth compactly supported test function on the ball |x-c| < radius."""
    center: tuple
    radius: float
    growth_exponent: float = 0.0  # bounded

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center",
                           tuple(float(v) for v in np.atleast_1d(self.center)))

    # support hints let the jump quadrature place nodes on the chord where
    # a shifted evaluation can be nonzero (far-field spikes are narrow)
    @property
    def support_center(self):
        return np.asarray(self.center)

    @property
    def support_radius(self):
        return self.radius

    def _u(self, x):
        c = np.asarray(self.center)
        z = (np.atleast_2d(x) - c) / self.radius
        return np.einsum("pi,pi->p", z, z, optimize=False), z

    def value(self, x):
        u, _ = self._u(x)
        out = np.zeros_like(u)
        m = u < 1.0
        out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m]))
        return out

    def grad(self, x):
        u, z = self._u(x)
        n, d = z.shape
        out = np.zeros((n, d))
        m = u < 1.0
        if np.any(m):
            f = np.exp(1.0 - 1.0 / (1.0 - u[m]))
            fp = -f / (1.0 - u[m]) ** 2
            out[m] = fp[:, None] * 2.0 * z[m] / self.radius
        return out

    def hess(self, x):
        u, z = self._u(x)
        n, d = z.shape
        out = np.zeros((n, d, d))
        m = u < 1.0
        if np.any(m):
            um = u[m]
            f = np.exp(1.0 - 1.0 / (1.0 - um))
            fp = -f / (1.0 - um) ** 2
            fpp = f / (1.0 - um) ** 4 - 2.0 * f / (1.0 - um) ** 3
            zz = z[m]
            out[m] = (fpp[:, None, None] * 4.0 * zz[:, :, None] * zz[:, None, :]
                      + fp[:, None, None] * 2.0 * np.eye(d)[None, :, :]) \
                / self.radius ** 2
        return out


# ---------------------------------------------------------------------------
# adaptive Gauss-Legendre machinery
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _region(f, a, b):
    """(value, error, magnitude) of one panel via whole-vs-halves GL."""
    mid = 0.5 * (a + b)
    nodes = np.concatenate([
        0.5 * (a + b) + 0.5 * (b - a) * _GL_X,
        0.5 * (a + mid) + 0.5 * (mid - a) * _GL_X,
        0.5 * (mid + b) + 0.5 * (b - mid) * _GL_X,
    ])
    vals = np.asarray(f(nodes), dtype=float)
    whole = 0.5 * (b - a) * float(np.sum(_GL_W * vals[:24]))
    left = 0.5 * (mid - a) * float(np.sum(_GL_W * vals[24:48]))
    right = 0.5 * (b - mid) * float(np.sum(_GL_W * vals[48:]))
    mag = 0.5 * (mid - a) * float(np.sum(_GL_W * np.abs(vals[24:48]))) \
        + 0.5 * (b - mid) * float(np.sum(_GL_W * np.abs(vals[48:])))
    return left + right, abs(left + right - whole), mag


def _radial_singular(g, curvature, alpha, rel_tol, x_scale, growth,
                     max_panels=700):
    """int_0^inf g(r) / r^(1+alpha) dr with g(r) = O(r^2) near zero.

    g is the symmetrized second difference of the test function along one
    direction and `curvature` its exact quadratic coefficient (directional
    second derivative).  Radii below a cancellation cutoff are integrated
    analytically through the Taylor remainder; the rest substitutes
    r = s^(2/(2-alpha)) near the origin and covers the outer range with
    octaves until the tail bound from the growth hint is negligible.  A
    worklist refines the worst panels until the error estimate meets
    tolerance relative to the accumulated integrand magnitude.
    """
    import heapq

    p = 2.0 / (2.0 - alpha)
    # below r_cut the float second difference is cancellation noise; its
    # integral is curvature * r^(2-alpha)/(2-alpha) to relative O(r_cut^2)
    r_cut = min(1e-4 * max(1.0, x_scale), 0.5)
    analytic = curvature * r_cut ** (2.0 - alpha) / (2.0 - alpha)
    s_cut = r_cut ** (1.0 / p)

    def inner(s):
        s = np.asarray(s)
        r = s ** p
        return g(r) * r ** (-1.0 - alpha) * p * s ** (p - 1.0)

    def outer(r):
        return np.asarray(g(np.asarray(r))) * np.asarray(r) ** (-1.0 - alpha)

    heap = []
    counter = 0
    total_val = float(analytic)
    total_err = 0.0
    total_mag = abs(analytic)

    def push(f, a, b):
        nonlocal counter, total_val, total_err, total_mag
        val, err, mag = _region(f, a, b)
        heapq.heappush(heap, (-err, counter, a, b, val, err, f))
        counter += 1
        total_val += val
        total_err += err
        total_mag += mag
        return val, mag

    push(inner, s_cut, 1.0)

    # octave scan with tail bound from the (clamped) empirical decay ratio
    min_cover = max(4.0 * x_scale, 2.0)
    prev_mag = None
    k = 0
    while True:
        a, b = 2.0 ** k, 2.0 ** (k + 1)
        _, mag = push(outer, a, b)
        k += 1
        if k > 90:
            raise QuadratureError("outer octave budget exhausted",
                                  achieved=total_val)
        if a < min_cover:
            prev_mag = mag
            continue
        if growth is not None and growth < alpha:
            q = 2.0 ** (growth - alpha)
        elif prev_mag and prev_mag > 0:
            q = min(mag / prev_mag, 0.9)
        else:
            q = 0.5
        prev_mag = mag
        tail_bound = mag * q / (1.0 - q)
        if tail_bound < 0.2 * rel_tol * max(total_mag, 1e-300):
            break

    if total_mag == 0.0:
        return 0.0, 0.0
    tol_abs = rel_tol * total_mag
    while total_err > tol_abs and counter < max_panels:
        neg_err, _, a, b, val, err, f = heapq.heappop(heap)
        total_val -= val
        total_err -= err
        mid = 0.5 * (a + b)
        push(f, a, mid)
        push(f, mid, b)
    if total_err > tol_abs:
        raise QuadratureError(
            f"quadrature stalled at error {total_err:.2e} (target {tol_abs:.2e})",
            achieved=total_val)
    return total_val, total_err


def _half_sphere_directions(d, n_dirs):
    """Deterministic half-sphere quadrature (directions, weights).

    Weights sum to half the sphere surface.  d = 1 and d = 2 are exact
    product rules; higher dimensions use a seeded equal-weight spread.
    """
    if d == 1:
        return np.array([[1.0]]), np.array([1.0])
    if d == 2:
        ths = (np.arange(n_dirs) + 0.5) * np.pi / n_dirs
        dirs = np.stack([np.cos(ths), np.sin(ths)], axis=1)
        w = np.full(n_dirs, np.pi / n_dirs)
        return dirs, w
    rng = np.random.default_rng(1234567)
    raw = rng.standard_normal((n_dirs, d))
    raw[raw[:, 0] < 0] *= -1.0
    dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    area_half = math.pi ** (d / 2.0) / math.gamma(d / 2.0)  # |S^{d-1}|/2
    return dirs, np.full(n_dirs, area_half / n_dirs)


def _support_hint(V):
    c = getattr(V, "support_center", None)
    r = getattr(V, "support_radius", None)
    if c is None or r is None:
        return None
    return np.asarray(c, dtype=float), float(r)


def _chord(X, u, center, radius):
    """Per-sample interval of r with X + r u inside the support ball.

    Returns (lo, hi); empty intersections yield lo > hi.
    """
    diff = center[None, :] - X
    proj = diff @ u
    perp2 = np.einsum("pi,pi->p", diff, diff, optimize=False) - proj ** 2
    h2 = radius ** 2 - perp2
    h = np.sqrt(np.maximum(h2, 0.0))
    lo = np.where(h2 > 0, proj - h, 1.0)
    hi = np.where(h2 > 0, proj + h, 0.0)
    return lo, hi


_GL32_X, _GL32_W = np.polynomial.legendre.leggauss(32)


def _support_far_field_batch(V, X, u, alpha, vx, support):
    """Far field (r > 1) of the symmetrized kernel for compact support.

    Nodes sit on the per-sample chord where V(x +- r u) can be nonzero; the
    -2 V(x) term integrates in closed form.
    """
    center, radius = support
    n = X.shape[0]
    total = np.zeros(n)
    for sign in (1.0, -1.0):
        lo, hi = _chord(X, sign * u, center, radius)
        lo = np.maximum(lo, 1.0)
        mask = hi > lo
        if not np.any(mask):
            continue
        mid = np.where(mask, 0.5 * (lo + hi), 2.0)
        half = np.where(mask, 0.5 * (hi - lo), 0.0)
        for t, w in zip(_GL32_X, _GL32_W):
            r = mid + half * t
            pts = X + (sign * r)[:, None] * u[None, :]
            total += np.where(mask, w * half * V.value(pts) * r ** (-1.0 - alpha),
                              0.0)
    total -= 2.0 * vx / alpha
    return total


def _inner_sym_nodes(alpha, n_panels=8):
    """Nodes/weights on [BATCH_R_CUT, 1] for the symmetrized singular kernel."""
    p = 2.0 / (2.0 - alpha)
    s_cut = BATCH_R_CUT ** (1.0 / p)
    nodes, weights = [], []
    for k in range(n_panels):
        a = s_cut + (1.0 - s_cut) * k / n_panels
        b = s_cut + (1.0 - s_cut) * (k + 1) / n_panels
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        s = mid + half * _GL_X
        r = s ** p
        nodes.append(r)
        weights.append(half * _GL_W * r ** (-1.0 - alpha) * p * s ** (p - 1.0))
    return np.concatenate(nodes), np.concatenate(weights)


def _octave_sym_nodes(alpha, r_max):
    n_oct = max(10, int(math.ceil(math.log2(max(r_max, 2.0)))) + 22)
    nodes, weights = [], []
    for k in range(n_oct):
        a, b = 2.0 ** k, 2.0 ** (k + 1)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        r = mid + half * _GL_X
        nodes.append(r)
        weights.append(half * _GL_W * r ** (-1.0 - alpha))
    return np.concatenate(nodes), np.concatenate(weights)


def _axis_like_jump_batch(V, X, u, alpha, vx, H, r_max):
    """Directional jump integral (symmetrized) for a batch of states."""
    taylor_w = BATCH_R_CUT ** (2.0 - alpha) / (2.0 - alpha)
    acc = taylor_w * np.einsum("pij,i,j->p", H, u, u, optimize=False)
    r_in, w_in = _inner_sym_nodes(alpha)
    for rj, wj in zip(r_in, w_in):
        acc += wj * (V.value(X + rj * u) + V.value(X - rj * u) - 2.0 * vx)
    support = _support_hint(V)
    if support is not None:
        acc += _support_far_field_batch(V, X, u, alpha, vx, support)
    else:
        r_out, w_out = _octave_sym_nodes(alpha, r_max)
        for rj, wj in zip(r_out, w_out):
            acc += wj * (V.value(X + rj * u) + V.value(X - rj * u) - 2.0 * vx)
    return acc


def _cp_mean_shift_batch(comp, V, X):
    """E[V(X + S w)] rows for the component's jump law."""
    from htol.levy_noise import (DeterministicJump, EmpiricalJump,
                                 ExponentialJump, ParetoJump)
    law = comp.jump_law
    w_vec = np.asarray(comp.direction)
    X = np.atleast_2d(X)
    if isinstance(law, DeterministicJump):
        return V.value(X + law.size * w_vec)
    if isinstance(law, EmpiricalJump):
        atoms = np.asarray(law.sample_values, dtype=float)
        out = np.zeros(X.shape[0])
        for a in atoms:
            out += V.value(X + a * w_vec)
        return out / atoms.size
    support = _support_hint(V)
    if support is not None and hasattr(law, "density"):
        center, radius = support
        u = w_vec / np.linalg.norm(w_vec)
        lo_r, hi_r = _chord(X, u, center, radius)
        lo = np.maximum(lo_r / np.linalg.norm(w_vec), 0.0)
        hi = hi_r / np.linalg.norm(w_vec)
        mask = hi > lo
        out = np.zeros(X.shape[0])
        if np.any(mask):
            mid = np.where(mask, 0.5 * (lo + hi), 1.0)
            half = np.where(mask, 0.5 * (hi - lo), 0.0)
            for t, w in zip(_GL32_X, _GL32_W):
                s = mid + half * t
                pts = X + s[:, None] * w_vec[None, :]
                out += np.where(mask, w * half * V.value(pts) * law.density(s),
                                0.0)
        return out
    growth = getattr(V, "growth_exponent", 0.0) or 0.0
    if isinstance(law, ExponentialJump):
        if getattr(V, "family", "polynomial") == "exponential":
            rate = V.theta * math.sqrt(np.max(np.linalg.eigvalsh(V.q_mat()))) \
                * np.linalg.norm(w_vec)
            if rate >= 0.95 / law.mean_size:
                raise QuadratureError(
                    "exponential test function grows faster than the jump "
                    "law decays")
        xq, wq = np.polynomial.laguerre.laggauss(160)
        out = np.zeros(X.shape[0])
        for sj, wj in zip(law.mean_size * xq, wq):
            out += wj * V.value(X + sj * w_vec)
        return out
    if isinstance(law, ParetoJump):
        if growth >= law.shape:
            raise QuadratureError(
                "test function grows at or above the Pareto tail index")
        out = np.zeros(X.shape[0])
        for k in range(48):
            a, b = 2.0 ** -(k + 1), 2.0 ** -k
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            for t, w in zip(_GL_X, _GL_W):
                s = law.minimum * (mid + half * t) ** (-1.0 / law.shape)
                out += w * half * V.value(X + s * w_vec)
        return out
    raise ValueError(f"unsupported jump law {law!r}")


def jump_part(model_or_levy, V, x, rel_tol=1e-6, full_compensation=False,
              n_iso_dirs=64):
    """Jump integral of the generator at a single point x.

    Axis-stable and isotropic components reduce to directional singular
    integrals (adaptive; or chord-exact for compactly supported test
    functions); compound Poisson components are expectations over the jump
    law minus the small-jump compensator (the full linear compensator when
    full_compensation is set).
    """
    levy = model_or_levy.levy if isinstance(model_or_levy, PiecewiseOUModel) \
        else model_or_levy
    x = np.asarray(x, dtype=float)
    d = x.size
    xs = np.linalg.norm(x)
    growth = getattr(V, "growth_exponent", None)
    vx = float(V.value(x[None, :])[0])
    hess_x = V.hess(x[None, :])[0]
    support = _support_hint(V)
    total = 0.0

    def second_diff(u):
        def g(r):
            r = np.atleast_1d(np.asarray(r, dtype=float))
            pts_p = x[None, :] + r[:, None] * u[None, :]
            pts_m = x[None, :] - r[:, None] * u[None, :]
            return V.value(pts_p) + V.value(pts_m) - 2.0 * vx
        return g

    def curv(u):
        return float(u @ hess_x @ u)

    def directional(u, alpha):
        if support is not None:
            row = _axis_like_jump_batch(V, x[None, :], u, alpha, vx,
                                        hess_x[None, :, :], max(xs, 2.0))
            return float(row[0])
        val, _ = _radial_singular(second_diff(u), curv(u), alpha, rel_tol,
                                  xs, growth)
        return val

    for comp in levy.components:
        if isinstance(comp, StableAxisSpec):
            _check_stable_integrable(V, comp.alpha, growth)
            c1 = stable_kernel_constant(1, comp.alpha)
            for i in range(d):
                u = np.zeros(d)
                u[i] = 1.0
                total += comp.eta[i] * c1 * directional(u, comp.alpha)
        elif isinstance(comp, IsotropicStableSpec):
            _check_stable_integrable(V, comp.alpha, growth)
            # radial integrals resolve to tolerance; accuracy is limited by
            # the angular rule when the integrand has directional cusps
            # (raise n_iso_dirs in that case)
            cd = stable_kernel_constant(d, comp.alpha)
            dirs, w = _half_sphere_directions(d, n_iso_dirs)
            acc = 0.0
            for u, wq in zip(dirs, w):
                acc += wq * directional(u, comp.alpha)
            total += comp.eta * cd * acc
        elif isinstance(comp, CompoundPoissonSpec):
            w_vec = np.asarray(comp.direction)
            wn = comp.direction_norm
            mean_v = float(_cp_mean_shift_batch(comp, V, x[None, :])[0])
            gradx = V.grad(x[None, :])[0]
            if full_compensation:
                comp_mean = comp.jump_law.mean()
                if not math.isfinite(comp_mean):
                    raise QuadratureError(
                        "full compensation needs a finite mean jump size")
            else:
                comp_mean = _truncated_mean(comp.jump_law, 1.0 / wn)
            total += comp.rate * (mean_v - vx) \
                - comp.rate * comp_mean * float(w_vec @ gradx)
        else:
            raise ValueError(f"unknown component {comp!r}")
    return total


def _check_stable_integrable(V, alpha, growth):
    if getattr(V, "family", "polynomial") == "exponential":
        raise QuadratureError(
            "exponential test functions are not integrable against stable tails")
    if growth is not None and growth >= alpha:
        raise QuadratureError(
            f"test function grows at order {growth}, not integrable for "
            f"stability index {alpha}")


def _truncated_mean(law, c):
    """E[S 1{S <= c}] for the jump law."""
    mean = law.mean()
    if math.isfinite(mean):
        return mean - law.tail_mean(c)
    # heavy-tailed law with infinite mean: integrate directly below c
    return law.expectation(lambda s: np.where(s <= c, s, 0.0))


def eval_generator(model: PiecewiseOUModel, V, x, rel_tol=1e-6):
    """Full generator A V(x) at one point, to relative tolerance rel_tol."""
    x = np.asarray(x, dtype=float)
    b = drift(model, x) + np.asarray(model.levy.drift)
    gradx = V.grad(x[None, :])[0]
    val = float(b @ gradx)
    if model.diffusion is not None:
        sig = np.asarray(model.diffusion(x) if callable(model.diffusion)
                         else model.diffusion)
        a = sig @ sig.T
        hx = V.hess(x[None, :])[0]
        val += 0.5 * float(np.trace(a @ hx))
    val += jump_part(model, V, x, rel_tol=rel_tol)
    return val


# ---------------------------------------------------------------------------
# batched generator over a sample (fixed quadrature grids)
# ---------------------------------------------------------------------------

BATCH_R_CUT = 1e-3  # below this radius the batch path uses the Taylor term


def generator_on_sample(model: PiecewiseOUModel, V, X, n_iso_dirs=32):
    """Generator values A V over a sample X (N, d) with shared fixed grids.

    Designed for Monte Carlo functionals (invariance checks): quadrature
    error is far below the sampling noise; cross-validated against
    eval_generator in the test-suite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    b = drift(model, X) + np.asarray(model.levy.drift)[None, :]
    G = V.grad(X)
    out = np.einsum("pi,pi->p", b, G, optimize=False)
    if model.diffusion is not None and not callable(model.diffusion):
        sig = np.asarray(model.diffusion)
        a = sig @ sig.T
        H = V.hess(X)
        out += 0.5 * np.einsum("ij,pji->p", a, H, optimize=False)
    elif callable(model.diffusion):
        for i in range(n):
            sig = np.asarray(model.diffusion(X[i]))
            out[i] += 0.5 * float(np.trace(sig @ sig.T @ V.hess(X[i][None])[0]))
    vx = V.value(X)
    r_max = float(np.max(np.linalg.norm(X, axis=1)))
    H_all = None
    for comp in model.levy.components:
        if isinstance(comp, (StableAxisSpec, IsotropicStableSpec)):
            growth = getattr(V, "growth_exponent", None)
            _check_stable_integrable(V, comp.alpha, growth)
            if H_all is None:
                H_all = V.hess(X)
            if isinstance(comp, StableAxisSpec):
                c1 = stable_kernel_constant(1, comp.alpha)
                for i in range(d):
                    u = np.zeros(d)
                    u[i] = 1.0
                    out += comp.eta[i] * c1 * _axis_like_jump_batch(
                        V, X, u, comp.alpha, vx, H_all, r_max)
            else:
                cd = stable_kernel_constant(d, comp.alpha)
                dirs, wq = _half_sphere_directions(d, n_iso_dirs)
                for u, wdir in zip(dirs, wq):
                    out += comp.eta * cd * wdir * _axis_like_jump_batch(
                        V, X, u, comp.alpha, vx, H_all, r_max)
        elif isinstance(comp, CompoundPoissonSpec):
            w_vec = np.asarray(comp.direction)
            comp_mean = _truncated_mean(comp.jump_law, 1.0 / comp.direction_norm)
            ev = _cp_mean_shift_batch(comp, V, X)
            out += comp.rate * (ev - vx) - comp.rate * comp_mean * (G @ w_vec)
    return out


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeReport:
    regime: str                     # transient-predicted | not-positive-recurrent
    #                               | polynomial | exponential | outside-theory
    spare_capacity: float
    theta_sup: float
    theta_closed: bool
    rate_exponent: float = None    # t^rate_exponent when polynomial
    finite_moment_sup: float = None  # sup p with E|X|^p finite (predicted)
    reasons: tuple = ()

    def as_dict(self):
        return {
            "regime": self.regime,
            "spare_capacity": self.spare_capacity,
            "theta_sup": self.theta_sup if math.isfinite(self.theta_sup) else "inf",
            "theta_closed": self.theta_closed,
            "rate_exponent": self.rate_exponent,
            "finite_moment_sup": (self.finite_moment_sup
                                  if self.finite_moment_sup is None
                                  or math.isfinite(self.finite_moment_sup)
                                  else "inf"),
            "reasons": list(self.reasons),
        }


def spare_capacity(model: PiecewiseOUModel) -> float:
    """Effective spare capacity: -<e, M^-1 ell_tilde> via a linear solve."""
    ell_tilde, _ = effective_drift(model.levy, model.ell_vec())
    sol = np.linalg.solve(model.m_mat(), ell_tilde)
    return float(-np.sum(sol))


def _has_exponential_jump_moments(levy: LevySpec) -> bool:
    for comp in levy.components:
        if isinstance(comp, (StableAxisSpec, IsotropicStableSpec)):
            return False
        if isinstance(comp, CompoundPoissonSpec):
            from htol.levy_noise import DeterministicJump, ExponentialJump
            if not isinstance(comp.jump_law, (DeterministicJump, ExponentialJump)):
                return False
    return True


def classify(model: PiecewiseOUModel) -> RegimeReport:
    """Ergodic-regime decision from model parameters alone.

    With zero abandonment along served classes the process has an invariant
    law exactly when the driver has a finite first tail moment and the spare
    capacity is positive; convergence is then polynomial with exponent one
    less than the tail-moment supremum (exponential when the jumps have
    exponential moments).  With effective abandonment the regime is
    exponential and the invariant law has exactly the driver's tail moments.
    """
    reasons = []
    try:
        interval = theta_c(model.levy)
    except UnsupportedAnalyticError:
        return RegimeReport(regime="outside-theory", spare_capacity=math.nan,
                            theta_sup=math.nan, theta_closed=False,
                            reasons=("empirical jump law has no analytic "
                                     "tail-moment interval",))
    rho = spare_capacity(model)
    if not getattr(model.control, "is_constant", False):
        reasons.append("state-dependent allocation: sufficiency results need a "
                       "constant allocation; only necessary conditions apply")
        if rho <= 0:
            reasons.append("nonpositive spare capacity rules out an invariant "
                           "law for any allocation with zero abandonment drift")
        if not interval.contains(1.0):
            reasons.append("driver lacks a finite first tail moment: no "
                           "invariant law with zero abandonment drift")
        return RegimeReport(regime="outside-theory", spare_capacity=rho,
                            theta_sup=interval.sup, theta_closed=interval.closed_at_sup,
                            reasons=tuple(reasons))

    v = np.asarray(model.control.v)
    gv = model.gamma_mat() @ v
    theta_sup = interval.sup
    sigma_ok = model.diffusion is None or not callable(model.diffusion)

    if np.linalg.norm(gv) <= 1e-12:
        from htol.matrix_core import validate_m_matrix
        if not validate_m_matrix(model.m_mat()).row_condition:
            return RegimeReport(regime="outside-theory", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                reasons=("column sums of the service-rate matrix "
                                         "must be nonnegative for the "
                                         "zero-abandonment certificates",))
        if not interval.contains(1.0):
            reasons.append("driver has no finite first tail moment, so no "
                           "invariant probability measure exists")
            return RegimeReport(regime="not-positive-recurrent", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                reasons=tuple(reasons))
        if rho < 0:
            reasons.append("negative spare capacity: paths escape along the "
                           "overload direction")
            return RegimeReport(regime="transient-predicted", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                reasons=tuple(reasons))
        if rho == 0:
            reasons.append("zero spare capacity: null-recurrent boundary case")
            return RegimeReport(regime="not-positive-recurrent", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                reasons=tuple(reasons))
        reasons.append("positive spare capacity and finite first tail moment "
                       "give a unique invariant law under any constant allocation")
        if sigma_ok and _has_exponential_jump_moments(model.levy):
            reasons.append("driver has exponential tail moments and bounded "
                           "diffusion: geometric convergence")
            return RegimeReport(regime="exponential", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                finite_moment_sup=math.inf,
                                reasons=tuple(reasons))
        if math.isfinite(theta_sup):
            reasons.append(f"tail-moment supremum {theta_sup:g} bounds the "
                           "polynomial convergence rate and the stationary "
                           "moments (one less)")
            return RegimeReport(regime="polynomial", spare_capacity=rho,
                                theta_sup=theta_sup,
                                theta_closed=interval.closed_at_sup,
                                rate_exponent=theta_sup - 1.0,
                                finite_moment_sup=theta_sup - 1.0,
                                reasons=tuple(reasons))
        return RegimeReport(regime="outside-theory", spare_capacity=rho,
                            theta_sup=theta_sup, theta_closed=interval.closed_at_sup,
                            reasons=tuple(reasons + [
                                "unbounded tail-moment interval without "
                                "verified exponential moments"]))

    # effective abandonment
    M = model.m_mat()
    hyp_i = bool(np.all(M @ v >= gv - 1e-12) and np.any(gv > 1e-12))
    hyp_ii = bool(np.allclose(M, np.diag(np.diag(M))) and np.all(np.diag(M) > 0))
    if not (hyp_i or hyp_ii):
        return RegimeReport(regime="outside-theory", spare_capacity=rho,
                            theta_sup=theta_sup, theta_closed=interval.closed_at_sup,
                            reasons=("abandonment drift present but neither the "
                                     "dominance condition Mv >= Gamma v nor a "
                                     "diagonal service-rate matrix holds",))
    if not sigma_ok:
        return RegimeReport(regime="outside-theory", spare_capacity=rho,
                            theta_sup=theta_sup, theta_closed=interval.closed_at_sup,
                            reasons=("state-dependent diffusion coefficient: "
                                     "sub-quadratic growth cannot be verified "
                                     "symbolically",))
    reasons.append("abandonment acts on the served direction: geometric "
                   "convergence for every tail-moment exponent of the driver")
    reasons.append("stationary moments are finite exactly on the driver's "
                   "tail-moment interval")
    return RegimeReport(regime="exponential", spare_capacity=rho,
                        theta_sup=theta_sup, theta_closed=interval.closed_at_sup,
                        finite_moment_sup=theta_sup,
                        reasons=tuple(reasons))


# ---------------------------------------------------------------------------
# drift-condition verification on shells
# ---------------------------------------------------------------------------

def shell_directions(d, n_directions, seed=0):
    """Deterministic direction set on the unit sphere."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ths = 2.0 * np.pi * (np.arange(n_directions) + 0.5) / n_directions
        return np.stack([np.cos(ths), np.sin(ths)], axis=1)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n_directions, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass(frozen=True)
class DriftConditionReport:
    mode: str
    theta: float
    cone_aperture: float      # delta of the split (nan in uniform mode)
    c0: float
    c1: float
    n_points: int
    n_violations: int
    violations: tuple         # ((x tuple, generator value), ...)
    worst_ratio: float        # max over points of A V / decay functional
    shells: tuple

    @property
    def passed(self):
        return self.n_violations == 0 and self.c1 > 0


def verify_foster_lyapunov(model: PiecewiseOUModel,
                           certificate: LyapunovCertificate,
                           theta: float,
                           r0: float = 10.0,
                           n_shells: int = 5,
                           n_directions: int = 64,
                           rel_tol: float = 1e-6) -> DriftConditionReport:
    """Numerically verify the drift inequality on radial shells.

    In no-abandonment mode the bound is split: decay proportional to
    V_(Q,theta) off the overload cone and to V_(Q,theta-1) on it, with cone
    aperture derived from the certificate margin.  In abandonment mode the
    decay is uniformly proportional to V_(Q,theta).  A violating point is a
    sampled state with nonnegative generator value; violations are reported,
    not raised.
    """
    Q = certificate.Q
    V = LyapunovFunctionSpec(Q=tuple(map(tuple, Q)), theta=theta)
    d = model.dim
    dirs = shell_directions(d, n_directions)
    shells = tuple(r0 * 2.0 ** k for k in range(n_shells))
    uniform = certificate.mode == "abandonment"
    if uniform:
        delta = math.nan
    else:
        v = np.asarray(model.control.v)
        qmv = np.linalg.norm(Q @ model.m_mat() @ v)
        delta = certificate.margin_first / (8.0 * qmv) if qmv > 0 else 0.5
        delta = min(delta, 0.9)
    ell_tilde, _ = effective_drift(model.levy, model.ell_vec())

    pts, vals, on_cone = [], [], []
    for r in shells:
        for u in dirs:
            x = r * u
            val = eval_generator(model, V, x, rel_tol=rel_tol)
            pts.append(x)
            vals.append(val)
            if not uniform:
                on_cone.append(x.sum() > delta * np.linalg.norm(x))
    pts = np.asarray(pts)
    vals = np.asarray(vals)
    vvals = V.value(pts)
    if uniform:
        decay = vvals
    else:
        on_cone = np.asarray(on_cone)
        v_low = LyapunovFunctionSpec(Q=tuple(map(tuple, Q)),
                                     theta=theta - 1.0) if theta > 1.0 else None
        low_vals = v_low.value(pts) if v_low is not None else np.ones(len(pts))
        decay = np.where(on_cone, low_vals, vvals)
    ratios = vals / decay
    c1 = float(-np.max(ratios))
    c0 = float(max(0.0, np.max(vals + max(c1, 0.0) * decay)))
    viol_idx = np.where(vals >= 0.0)[0]
    violations = tuple((tuple(pts[i]), float(vals[i])) for i in viol_idx[:16])
    return DriftConditionReport(
        mode=certificate.mode, theta=theta, cone_aperture=float(delta),
        c0=c0, c1=c1, n_points=len(pts), n_violations=int(viol_idx.size),
        violations=violations, worst_ratio=float(np.max(ratios)), shells=shells)


# ---------------------------------------------------------------------------
# stationary-sample diagnostics
# ---------------------------------------------------------------------------

def mean_idleness(stationary: StationaryEstimate):
    """Mean negative part of the total count, with path-batch standard error.

    Equals the spare capacity in any ergodic zero-abandonment regime.
    """
    vals = np.maximum(-stationary.states.sum(axis=1), 0.0)
    estimate = float(vals.mean())
    ids = stationary.path_ids
    paths = np.unique(ids)
    if paths.size >= 2:
        means = np.array([vals[ids == p].mean() for p in paths])
        se = float(means.std(ddof=1) / math.sqrt(paths.size))
    else:
        se = float(vals.std(ddof=1) / math.sqrt(max(vals.size, 2)))
    return estimate, se


@dataclass(frozen=True)
class TailIndexEstimate:
    index: float
    k_used: int
    ci_half_width: float
    power_law_plausible: bool
    k_grid: tuple
    estimates: tuple


def _hill(sorted_desc, k):
    logs = np.log(sorted_desc[:k]) - math.log(sorted_desc[k])
    return 1.0 / float(np.mean(logs))


def tail_index(sample, k: int = None) -> TailIndexEstimate:
    """Hill estimate of the survival-exponent on the top order statistics.

    Default k is floor(sqrt(n)).  A stability scan over a geometric k-grid
    estimates whether the sample tail is power-law-like: the plateau test
    requires the local estimates around the chosen k to agree within 25%.
    """
    x = np.asarray(sample, dtype=float)
    x = x[x > 0]
    if x.size < 100:
        raise ValueError("need at least 100 positive observations")
    x = np.sort(x)[::-1]
    n = x.size
    if k is None:
        k = int(math.isqrt(n))
    if not (0 < k < n):
        raise ValueError("k must lie strictly between 0 and the sample size")
    grid = np.unique(np.geomspace(10, n - 1, 25).astype(int))
    grid = grid[(grid > 0) & (grid < n)]
    ests = np.array([_hill(x, kk) for kk in grid])
    idx = _hill(x, k)
    near = (grid >= k // 2) & (grid <= min(2 * k, n - 1))
    if near.sum() >= 2:
        lo, hi = float(np.min(ests[near])), float(np.max(ests[near]))
        plausible = hi / lo <= 1.25
    else:
        plausible = False
    return TailIndexEstimate(index=float(idx), k_used=int(k),
                             ci_half_width=float(1.96 * idx / math.sqrt(k)),
                             power_law_plausible=bool(plausible),
                             k_grid=tuple(int(g) for g in grid),
                             estimates=tuple(float(e) for e in ests))


@dataclass(frozen=True)
class TVDecayEstimate:
    times: tuple
    tv: tuple
    noise_floor: float
    slope_loglog: float
    slope_loglog_se: float
    r2_loglog: float
    slope_semilog: float
    r2_semilog: float
    n_bins: int

    def as_rows(self):
        return [(t, v) for t, v in zip(self.times, self.tv)]


def _histogram_tv(u, v, n_bins):
    """Half L1 distance between histograms on common quantile bins."""
    pooled = np.concatenate([u, v])
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.quantile(pooled, qs)
    edges = np.unique(edges)
    if edges.size < 3:
        return 0.0
    p, _ = np.histogram(u, bins=edges)
    q, _ = np.histogram(v, bins=edges)
    p = p / max(u.size, 1)
    q = q / max(v.size, 1)
    return 0.5 * float(np.sum(np.abs(p - q)))


def _linfit(x, y):
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    n = x.size
    if n > 2 and ss_tot > 0:
        sxx = float(np.sum((x - x.mean()) ** 2))
        se = math.sqrt(ss_res / (n - 2) / sxx) if sxx > 0 else math.inf
    else:
        se = math.inf
    return float(coef[0]), se, r2


def tv_decay(model: PiecewiseOUModel, reference: StationaryEstimate, x0,
             time_grid, n_paths=4000, master_seed=7, dt=1e-2, threads=1,
             n_bins=None, fit_t_min=None) -> TVDecayEstimate:
    """Projected total-variation distance to the stationary reference.

    Distances are measured on the overload projection <w_tilde, x> through a
    common quantile histogram; the projected distance lower-bounds the full
    state-space distance, so decay-slope checks are one-sided.  The binning
    noise floor is measured empirically by split halves of both samples;
    slope fits use grid points above 1.5x the floor, restricted to
    t >= fit_t_min when given (default: the later half).  Requires at least
    four usable points.
    """
    time_grid = np.asarray(sorted(time_grid), dtype=float)
    rec = float(time_grid[0])
    for t in np.diff(time_grid):
        rec = math.gcd(int(round(rec * 1000)), int(round(t * 1000))) / 1000.0
    rec = max(rec, dt)
    config = PathConfig(horizon=float(time_grid[-1]), n_paths=n_paths, dt=dt,
                        master_seed=master_seed, x0=tuple(np.atleast_1d(x0)),
                        record_every=rec, keep_jump_log=False, threads=threads)
    ens = simulate_ensemble(model, config)
    wt = np.linalg.solve(model.m_mat().T, np.ones(model.dim))
    ref_u = reference.states @ wt
    if n_bins is None:
        n_bins = int(np.clip(math.sqrt(min(n_paths, ref_u.size)) / 2, 16, 128))
    tvs = []
    for t in time_grid:
        i = int(np.argmin(np.abs(ens.times - t)))
        u = ens.states[:, i, :] @ wt
        tvs.append(_histogram_tv(u, ref_u, n_bins))
    tvs = np.asarray(tvs)
    # empirical floor: split-half self-distances of both samples
    u_last = ens.states[:, -1, :] @ wt
    half_e = _histogram_tv(u_last[0::2], u_last[1::2], n_bins)
    half_r = _histogram_tv(ref_u[0::2], ref_u[1::2], n_bins)
    noise = float(half_e + half_r)
    usable = tvs > 1.5 * noise
    if fit_t_min is not None:
        usable &= time_grid >= fit_t_min
    if usable.sum() < 4:
        raise ValueError("fewer than four grid points above the binning noise")
    xs, ys = time_grid[usable], tvs[usable]
    if fit_t_min is None:
        tail_from = max(0, xs.size - max(4, xs.size // 2))
        xs, ys = xs[tail_from:], ys[tail_from:]
    slope, se, r2 = _linfit(np.log(xs), np.log(ys))
    slope_e, _, r2_e = _linfit(xs, np.log(ys))
    return TVDecayEstimate(times=tuple(time_grid), tv=tuple(float(t) for t in tvs),
                           noise_floor=float(noise), slope_loglog=slope,
                           slope_loglog_se=se, r2_loglog=r2,
                           slope_semilog=slope_e, r2_semilog=r2_e, n_bins=n_bins)


@dataclass(frozen=True)
class MomentProbeResult:
    p: float
    estimate: float
    growth_stat: float
    divergent: bool


def moment_probe(stationary: StationaryEstimate, p_grid,
                 growth_threshold: float = 1.3, n_groups: int = 8):
    """Estimate E|X|^p and flag divergent exponents by sample growth.

    The sample is split into independent path groups; a moment whose full
    estimate exceeds the median group estimate by the growth factor is
    flagged divergent (its estimate keeps growing as data accumulates,
    which is the signature of an infinite moment).
    """
    mags = np.linalg.norm(stationary.states, axis=1)
    ids = stationary.path_ids
    paths = np.unique(ids)
    group_of_path = {p: i % n_groups for i, p in enumerate(paths)}
    groups = np.array([group_of_path[p] for p in ids])
    out = []
    for p in p_grid:
        vals = mags ** p
        full = float(vals.mean())
        gm = np.array([vals[groups == g].mean() for g in range(n_groups)
                       if np.any(groups == g)])
        med = float(np.median(gm))
        g_stat = full / med if med > 0 else math.inf
        out.append(MomentProbeResult(p=float(p), estimate=full,
                                     growth_stat=float(g_stat),
                                     divergent=bool(g_stat > growth_threshold)))
    return out
