"""Path simulation for the piecewise OU process with jumps.

The state equation is dX = b(X)dt + sigma(X)dW + dL with the piecewise
linear drift b(x) = ell - M(x - <e,x>^+ v) - <e,x>^+ Gamma v.  Integration
is Euler-Maruyama with exact-in-law noise increments; compound Poisson
events are applied at their exact arrival times with drift-diffusion
substeps in between.

Reproducibility contract: every path owns counter-based RNG streams keyed
by (master_seed, path_index, component), and the per-path draw sequence is
chunked by a fixed step count.  The step recursion uses only elementwise
array operations and fixed-order reductions, so results are bit-identical
regardless of how paths are batched across threads.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from htol.levy_noise import (
    STREAM_DIFFUSION,
    STREAM_POISSON,
    STREAM_REFINE,
    STREAM_STABLE,
    CompoundPoissonSpec,
    IsotropicStableSpec,
    LevySpec,
    StableAxisSpec,
    stream_for,
)
from htol.matrix_core import validate_m_matrix

__all__ = [
    "ConstantControl",
    "MarkovControl",
    "PiecewiseOUModel",
    "PathConfig",
    "PathEnsemble",
    "StationaryEstimate",
    "TransientModelError",
    "drift",
    "simulate_path",
    "simulate_ensemble",
    "stationary_sample",
]

DIVERGENCE_THRESHOLD = 1e12
CHUNK_STEPS = 512  # fixed so RNG consumption is independent of batching


class TransientModelError(RuntimeError):
    """Stationary sampling refused for a model classified non-ergodic."""


@dataclass(frozen=True)
class ConstantControl:
    v: tuple

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or np.any(v < -1e-12) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("control vector must be a probability vector")
        object.__setattr__(self, "v", tuple(float(x) for x in v))

    @property
    def is_constant(self):
        return True

    def values(self, x):
        return np.broadcast_to(np.asarray(self.v), x.shape)


@dataclass(frozen=True)
class MarkovControl:
    """State-dependent allocation x -> v(x) in the simplex."""
    func: object

    @property
    def is_constant(self):
        return False

    def values(self, x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            out[i] = np.asarray(self.func(x[i]), dtype=float)
        return out


@dataclass(frozen=True)
class PiecewiseOUModel:
    """Full model: drift pieces (ell, M, Gamma, control), diffusion, jumps."""
    ell: tuple
    M: tuple
    Gamma: tuple
    control: object
    levy: LevySpec
    diffusion: object = None  # None | (d,n) matrix | callable x -> (d,n)

    def __post_init__(self):
        ell = np.asarray(self.ell, dtype=float)
        M = np.asarray(self.M, dtype=float)
        d = ell.size
        if M.shape != (d, d):
            raise ValueError("M must be d x d")
        if not validate_m_matrix(M).ok:
            raise ValueError("M is not a nonsingular M-matrix")
        G = np.asarray(self.Gamma, dtype=float) if self.Gamma is not None \
            else np.zeros((d, d))
        if G.shape == (d,):
            G = np.diag(G)
        if G.shape != (d, d) or not np.allclose(G, np.diag(np.diag(G))):
            raise ValueError("Gamma must be diagonal")
        if np.any(np.diag(G) < 0):
            raise ValueError("abandonment rates must be nonnegative")
        if self.levy.dim != d:
            raise ValueError("noise dimension mismatch")
        object.__setattr__(self, "ell", tuple(float(x) for x in ell))
        object.__setattr__(self, "M", tuple(tuple(float(x) for x in row) for row in M))
        object.__setattr__(self, "Gamma", tuple(tuple(float(x) for x in row) for row in G))
        if isinstance(self.control, (list, tuple, np.ndarray)):
            object.__setattr__(self, "control", ConstantControl(tuple(self.control)))
        sig = self.diffusion
        if sig is not None and not callable(sig):
            sig = np.asarray(sig, dtype=float)
            if sig.ndim != 2 or sig.shape[0] != d:
                raise ValueError("diffusion matrix must have d rows")
            object.__setattr__(self, "diffusion",
                               tuple(tuple(float(x) for x in row) for row in sig))

    @property
    def dim(self):
        return len(self.ell)

    def ell_vec(self):
        return np.asarray(self.ell)

    def m_mat(self):
        return np.asarray(self.M)

    def gamma_mat(self):
        return np.asarray(self.Gamma)

    def levy_drift_effective(self):
        """Pathwise constant drift of the jump driver.

        The driver's nominal drift applies with small jumps compensated;
        the engine adds raw jump sizes, so compound Poisson components
        contribute their small-jump compensator with a minus sign.
        """
        out = np.asarray(self.levy.drift, dtype=float).copy()
        for comp in self.levy.components:
            if isinstance(comp, CompoundPoissonSpec):
                out = out - comp.small_jump_compensator()
        return out

    def model_hash(self) -> str:
        payload = {
            "ell": self.ell, "M": self.M, "Gamma": self.Gamma,
            "control": (self.control.v if getattr(self.control, "is_constant", False)
                        else "markov-callable"),
            "diffusion": ("none" if self.diffusion is None else
                          "callable" if callable(self.diffusion) else self.diffusion),
            "levy": _levy_payload(self.levy),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _levy_payload(levy: LevySpec):
    comps = []
    for c in levy.components:
        if isinstance(c, StableAxisSpec):
            comps.append({"type": "stable_axes", "alpha": c.alpha, "eta": c.eta})
        elif isinstance(c, IsotropicStableSpec):
            comps.append({"type": "isotropic_stable", "alpha": c.alpha, "eta": c.eta})
        elif isinstance(c, CompoundPoissonSpec):
            comps.append({"type": "compound_poisson", "rate": c.rate,
                          "direction": c.direction, "jump_law": repr(c.jump_law)})
        else:
            comps.append({"type": repr(c)})
    return {"drift": levy.drift, "components": comps}


@dataclass(frozen=True)
class PathConfig:
    horizon: float
    n_paths: int = 1
    dt: float = 1e-2
    master_seed: int = 0
    x0: tuple = None
    burn_in: float = None       # defaults to 20% of the horizon
    thin_stride: float = None   # stationary sampling stride; None = auto
    record_every: float = None  # recording grid in time units; None = every step
    keep_jump_log: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < self.dt:
            raise ValueError("need dt > 0 and horizon >= dt")
        if self.burn_in is not None and self.burn_in >= self.horizon:
            raise ValueError("burn-in must be shorter than the horizon")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float)
            object.__setattr__(self, "x0", tuple(np.atleast_1d(x0).tolist()))

    @property
    def effective_burn_in(self):
        return 0.2 * self.horizon if self.burn_in is None else self.burn_in

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def record_stride_steps(self):
        if self.record_every is None:
            return 1
        return max(1, int(round(self.record_every / self.dt)))


@dataclass
class PathEnsemble:
    times: np.ndarray            # (n_rec,)
    states: np.ndarray           # (n_paths, n_rec, d)
    jump_counts: np.ndarray      # (n_paths, n_rec) CP events in (t_prev, t]
    jump_logs: list              # per path: list of (time, size, component)
    diverged: np.ndarray         # (n_paths,) bool
    escape_times: np.ndarray     # (n_paths,) nan when not diverged
    path_indices: np.ndarray
    master_seed: int
    model_hash: str

    @property
    def n_paths(self):
        return self.states.shape[0]


@dataclass
class StationaryEstimate:
    states: np.ndarray     # (N, d) pooled post-burn-in, thinned
    path_ids: np.ndarray   # (N,) source path of each pooled state
    ess: float
    stride: float          # time units between retained samples per path
    acf_at_stride: float
    model_hash: str
    master_seed: int


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

def drift(model: PiecewiseOUModel, x):
    """Drift b(x) for a single state or a batch of states (rows)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    M = model.m_mat()
    u_dir = M - model.gamma_mat()
    v = model.control.values(xb)
    s_plus = np.maximum(xb.sum(axis=1), 0.0)
    mx = np.einsum("ij,pj->pi", M, xb, optimize=False)
    uv = np.einsum("ij,pj->pi", u_dir, v, optimize=False)
    b = model.ell_vec()[None, :] - mx + s_plus[:, None] * uv
    return b[0] if single else b


# ---------------------------------------------------------------------------
# noise draws
# ---------------------------------------------------------------------------

def _cms_symmetric(alpha, u, e):
    if abs(alpha - 1.0) < 1e-14:
        return np.tan(u)
    return (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * u) / e) ** ((1.0 - alpha) / alpha))


def _draw_axis_増(comp, dt, rng, n):  # pragma: no cover - renamed below
    raise NotImplementedError


def _draw_axis_increments(comp: StableAxisSpec, dt, rng, n):
    """(n, d) exact axis-stable increments over steps of length dt."""
    eta = np.asarray(comp.eta)
    scale = (eta * dt) ** (1.0 / comp.alpha)
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=(n, eta.size))
    e = rng.standard_exponential(size=(n, eta.size))
    return scale[None, :] * _cms_symmetric(comp.alpha, u, e)


def _draw_subordinator(alpha_half, sigma_sub, rng, n):
    """One-sided stable subordinator increments, Laplace exp(-c u^alpha_half)."""
    b0 = math.pi / 2.0
    pref = (1.0 + math.tan(math.pi * alpha_half / 2.0) ** 2) ** (1.0 / (2 * alpha_half))
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    e = rng.standard_exponential(size=n)
    s = (pref * np.sin(alpha_half * (u + b0)) / np.cos(u) ** (1.0 / alpha_half)
         * (np.cos(u - alpha_half * (u + b0)) / e) ** ((1.0 - alpha_half) / alpha_half))
    return sigma_sub * s


def _draw_iso_increments(comp: IsotropicStableSpec, dt, rng, n, d):
    """(n, d) isotropic stable increments as subordinated Gaussians."""
    ap = comp.alpha / 2.0
    c = dt * comp.eta * 2.0 ** ap
    sigma_sub = (c * math.cos(math.pi * ap / 2.0)) ** (1.0 / ap)
    sub = _draw_subordinator(ap, sigma_sub, rng, n)
    z = rng.standard_normal(size=(n, d))
    return np.sqrt(sub)[:, None] * z


# ---------------------------------------------------------------------------
# core batched engine
# ---------------------------------------------------------------------------

class _PathDriver:
    """Per-path noise streams and chunked pregenerated increments."""

    def __init__(self, model, config, path_index):
        self.model = model
        self.config = config
        self.path_index = path_index
        d = model.dim
        axis = [c for c in model.levy.components if isinstance(c, StableAxisSpec)]
        iso = [c for c in model.levy.components if isinstance(c, IsotropicStableSpec)]
        self.cp = [c for c in model.levy.components
                   if isinstance(c, CompoundPoissonSpec)]
        self.axis, self.iso = axis, iso
        self.needs_normal = model.diffusion is not None
        self.rng_stable = stream_for(config.master_seed, path_index, STREAM_STABLE) \
            if (axis or iso) else None
        self.rng_normal = stream_for(config.master_seed, path_index, STREAM_DIFFUSION) \
            if self.needs_normal else None
        self.rng_cp = stream_for(config.master_seed, path_index, STREAM_POISSON) \
            if self.cp else None
        self.rng_refine = stream_for(config.master_seed, path_index, STREAM_REFINE) \
            if self.cp else None
        self.d = d

    def chunk_noise(self, n_steps):
        """Pregenerate one chunk: stable sums, normals, CP events per step."""
        dt = self.config.dt
        d = self.d
        stable = np.zeros((n_steps, d))
        for comp in self.axis:
            stable += _draw_axis_increments(comp, dt, self.rng_stable, n_steps)
        for comp in self.iso:
            stable += _draw_iso_increments(comp, dt, self.rng_stable, n_steps, d)
        normals = self.rng_normal.standard_normal(size=(n_steps, d)) \
            if self.needs_normal else None
        events = None
        if self.cp:
            events = [[] for _ in range(n_steps)]
            for ci, comp in enumerate(self.cp):
                t = self.rng_cp.exponential(1.0 / comp.rate)
                horizon = n_steps * dt
                while t < horizon:
                    size = float(comp.jump_law.sample(1, self.rng_cp)[0])
                    k = min(int(t / dt), n_steps - 1)
                    events[k].append((t - k * dt, size, ci))
                    t += self.rng_cp.exponential(1.0 / comp.rate)
            for ev in events:
                ev.sort(key=lambda rec: rec[0])
        return stable, normals, events

    def refine_step(self, x, step_events, dt):
        """One step containing CP events: exact event times, substeps between.

        Draws fresh exact-law noise for each subinterval from the refinement
        stream; the pregenerated full-step draws for this step are unused.
        """
        t_local = 0.0
        jumps = []
        for (tau, size, ci) in step_events:
            delta = tau - t_local
            if delta > 0:
                x = self._euler_piece(x, delta)
            w = np.asarray(self.cp[ci].direction)
            x = x + size * w
            jumps.append((tau, size, ci))
            t_local = tau
        if dt - t_local > 0:
            x = self._euler_piece(x, dt - t_local)
        return x, jumps

    def _euler_piece(self, x, delta):
        model = self.model
        b = drift(model, x) + model.levy_drift_effective()
        inc = b * delta
        for comp in self.axis:
            inc = inc + _draw_axis_increments(comp, delta, self.rng_refine, 1)[0]
        for comp in self.iso:
            inc = inc + _draw_iso_increments(comp, delta, self.rng_refine, 1, self.d)[0]
        if self.needs_normal:
            sig = self._sigma_single(x)
            z = self.rng_refine.standard_normal(size=sig.shape[1])
            inc = inc + math.sqrt(delta) * (sig @ z)
        return x + inc

    def _sigma_single(self, x):
        sig = self.model.diffusion
        if callable(sig):
            return np.asarray(sig(x), dtype=float)
        return np.asarray(sig)


def _simulate_batch(model, config, path_indices):
    """Lockstep simulation of a batch of paths; returns ensemble pieces."""
    d = model.dim
    n = len(path_indices)
    n_steps = config.n_steps
    dt = config.dt
    stride = config.record_stride_steps
    x0 = np.zeros(d) if config.x0 is None else np.asarray(config.x0, dtype=float)
    X = np.tile(x0, (n, 1))

    drivers = [_PathDriver(model, config, p) for p in path_indices]
    has_cp = any(dr.cp for dr in drivers)
    sigma_const = None
    if model.diffusion is not None and not callable(model.diffusion):
        sigma_const = np.asarray(model.diffusion)

    n_rec = n_steps // stride + 1
    states = np.empty((n, n_rec, d))
    jump_counts = np.zeros((n, n_rec), dtype=np.int32)
    states[:, 0] = X
    jump_logs = [[] for _ in range(n)]
    diverged = np.zeros(n, dtype=bool)
    escape = np.full(n, np.nan)

    alive = np.ones(n, dtype=bool)
    rec_i = 0
    k = 0
    sqrt_dt = math.sqrt(dt)
    M = model.m_mat()
    u_dir = M - model.gamma_mat()
    ell = model.ell_vec() + model.levy_drift_effective()
    const_v = getattr(model.control, "is_constant", False)
    uv_const = u_dir @ np.asarray(model.control.v) if const_v else None

    while k < n_steps:
        m = min(CHUNK_STEPS, n_steps - k)
        chunk = [dr.chunk_noise(m) for dr in drivers]
        stable = np.stack([c[0] for c in chunk])  # (n, m, d)
        normals = np.stack([c[1] for c in chunk]) if chunk[0][1] is not None else None
        events = [c[2] for c in chunk]
        for j in range(m):
            s_plus = np.maximum(X.sum(axis=1), 0.0)
            if const_v:
                b = ell[None, :] - np.einsum("ij,pj->pi", M, X, optimize=False) \
                    + s_plus[:, None] * uv_const[None, :]
            else:
                b = drift(model, X) + (ell - model.ell_vec())[None, :]
            inc = b * dt + stable[:, j]
            if normals is not None:
                if sigma_const is not None:
                    inc = inc + sqrt_dt * np.einsum(
                        "ij,pj->pi", sigma_const, normals[:, j, :sigma_const.shape[1]],
                        optimize=False)
                else:
                    for p in range(n):
                        if alive[p]:
                            sig = drivers[p]._sigma_single(X[p])
                            inc[p] = inc[p] + sqrt_dt * sig @ normals[p, j, :sig.shape[1]]
            X_new = X + inc
            step_jumps = None
            if has_cp:
                for p in range(n):
                    ev = events[p][j] if events[p] is not None else []
                    if ev and alive[p]:
                        xj, jumps = drivers[p].refine_step(X[p], ev, dt)
                        X_new[p] = xj
                        t_base = (k + j) * dt
                        if step_jumps is None:
                            step_jumps = {}
                        step_jumps[p] = [(t_base + tl, sz, ci) for (tl, sz, ci) in jumps]
            # freeze diverged paths at their escape value
            X_new = np.where(alive[:, None], X_new, X)
            overflow = alive & (np.linalg.norm(X_new, axis=1) > DIVERGENCE_THRESHOLD)
            if np.any(overflow):
                escape[overflow] = (k + j + 1) * dt
                diverged[overflow] = True
                alive = alive & ~overflow
            X = X_new
            if step_jumps:
                for p, js in step_jumps.items():
                    if config.keep_jump_log:
                        jump_logs[p].extend(js)
                    jump_counts[p, min(rec_i + 1, n_rec - 1)] += len(js)
            if (k + j + 1) % stride == 0:
                rec_i += 1
                states[:, rec_i] = X
        k += m

    times = np.arange(n_rec) * (stride * dt)
    return states, jump_counts, jump_logs, diverged, escape, times


def simulate_ensemble(model: PiecewiseOUModel, config: PathConfig) -> PathEnsemble:
    """Simulate n_paths independent paths; deterministic per (seed, index).

    Threading splits paths into contiguous batches; results are merged in
    path order and are bit-identical for any thread count.
    """
    indices = np.arange(config.n_paths)
    threads = max(1, int(config.threads))
    if threads == 1 or config.n_paths == 1:
        batches = [indices]
    else:
        batches = np.array_split(indices, threads)
        batches = [b for b in batches if b.size]
    if len(batches) == 1:
        results = [_simulate_batch(model, config, list(batches[0]))]
    else:
        with ThreadPoolExecutor(max_workers=len(batches)) as pool:
            results = list(pool.map(
                lambda b: _simulate_batch(model, config, list(b)), batches))
    states = np.concatenate([r[0] for r in results], axis=0)
    jump_counts = np.concatenate([r[1] for r in results], axis=0)
    jump_logs = [log for r in results for log in r[2]]
    diverged = np.concatenate([r[3] for r in results])
    escape = np.concatenate([r[4] for r in results])
    times = results[0][5]
    return PathEnsemble(times=times, states=states, jump_counts=jump_counts,
                        jump_logs=jump_logs, diverged=diverged, escape_times=escape,
                        path_indices=indices, master_seed=config.master_seed,
                        model_hash=model.model_hash())


def simulate_path(model: PiecewiseOUModel, config: PathConfig, path_index: int):
    """Single path, identical to the corresponding row of an ensemble."""
    states, jump_counts, jump_logs, diverged, escape, times = _simulate_batch(
        model, config, [path_index])
    return PathEnsemble(times=times, states=states, jump_counts=jump_counts,
                        jump_logs=jump_logs, diverged=diverged, escape_times=escape,
                        path_indices=np.array([path_index]),
                        master_seed=config.master_seed,
                        model_hash=model.model_hash())


def _acf(series, lag):
    x = series - series.mean()
    if lag >= x.size or x.size < 8:
        return 0.0
    c0 = float(np.dot(x, x))
    if c0 <= 0:
        return 0.0
    return float(np.dot(x[:-lag], x[lag:]) / c0)


def stationary_sample(model: PiecewiseOUModel, config: PathConfig,
                      override: bool = False) -> StationaryEstimate:
    """Pooled post-burn-in, thinned states across an ensemble.

    Refuses to run when the model parameters predict no invariant law
    (override=True forces the run anyway).  The thinning stride targets a
    total-count autocorrelation of at most 0.2; effective sample size is
    reported after an AR(1)-style correction at the chosen stride.
    """
    from htol.ergodicity_lab import classify  # lazy: avoids import cycle

    report = classify(model)
    if report.regime in ("transient-predicted", "not-positive-recurrent") \
            and not override:
        raise TransientModelError(
            f"model classified {report.regime}; pass override=True to sample anyway")
    ens = simulate_ensemble(model, config)
    rec_dt = ens.times[1] - ens.times[0] if len(ens.times) > 1 else config.dt
    first = int(np.searchsorted(ens.times, config.effective_burn_in, side="right"))
    post = ens.states[:, first:, :]
    totals = post.sum(axis=2)
    if config.thin_stride is not None:
        stride_rec = max(1, int(round(config.thin_stride / rec_dt)))
    else:
        stride_rec = 1
        for lag in range(1, min(totals.shape[1] // 4, 200) + 1):
            rho = np.mean([_acf(totals[p], lag) for p in
                           range(min(8, totals.shape[0]))])
            if rho <= 0.2:
                stride_rec = lag
                break
        else:
            stride_rec = max(1, min(totals.shape[1] // 4, 200))
    thinned = post[:, ::stride_rec, :]
    n_paths, n_keep, d = thinned.shape
    states = thinned.reshape(-1, d)
    path_ids = np.repeat(np.arange(n_paths), n_keep)
    rho = np.mean([abs(_acf(totals[p], stride_rec))
                   for p in range(min(8, n_paths))]) if n_keep > 8 else 0.0
    ess = states.shape[0] * (1.0 - rho) / (1.0 + rho) if rho < 1 else states.shape[0]
    return StationaryEstimate(states=states, path_ids=path_ids, ess=float(ess),
                              stride=stride_rec * rec_dt, acf_at_stride=float(rho),
                              model_hash=ens.model_hash,
                              master_seed=config.master_seed)
