"""M-matrix validation and quadratic Lyapunov certificates.

The drift of the piecewise OU process switches between the matrices M and
A = M - (M - Gamma) v e'.  Ergodicity certificates are positive definite
matrices Q making both symmetrized products positive (semi)definite:

    form1 = Q M + M' Q
    form2 = Q A + A' Q

With no abandonment in the served direction (Gamma v = 0) the second form
can at best be positive semidefinite: A v = 0 forces v into its kernel, and
any admissible Q must satisfy Q v parallel to (M^-1)' e.  The search here
works in that reduced parametrization, which removes the degenerate
direction; a projected subgradient ascent on the smallest margins is kept
as a fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, solve_continuous_lyapunov

__all__ = [
    "MMatrixReport",
    "LyapunovCertificate",
    "QCheckReport",
    "HypothesisError",
    "CertificateNotFound",
    "NoSolutionError",
    "validate_m_matrix",
    "solve_lyapunov",
    "find_q",
    "check_q",
]

PSD_TOL = 1e-10  # eigenvalue >= -PSD_TOL * ||form||_F counts as PSD


class HypothesisError(ValueError):
    """Inputs violate the structural hypotheses of the certificate mode."""


class CertificateNotFound(RuntimeError):
    """Search exhausted its budget without reaching positive margins."""

    def __init__(self, message, best_margins=None):
        super().__init__(message)
        self.best_margins = best_margins


class NoSolutionError(ValueError):
    """Lyapunov equation has no positive definite solution."""


@dataclass(frozen=True)
class MMatrixReport:
    ok: bool
    s: float
    spectral_radius_N: float
    row_condition: bool


@dataclass(frozen=True)
class LyapunovCertificate:
    """Certificate matrix with independently re-checked margins."""
    Q: np.ndarray
    margin_first: float
    margin_second: float
    mode: str  # "no-abandonment" or "abandonment"

    def as_dict(self):
        return {"Q": self.Q.tolist(), "margin_first": self.margin_first,
                "margin_second": self.margin_second, "mode": self.mode}


@dataclass(frozen=True)
class QCheckReport:
    margin_first: float
    margin_second: float
    interpolated_margin: float  # min over t in {0,...,0.9} of the blended form


def _as_square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    return M


def validate_m_matrix(M) -> MMatrixReport:
    """Check the sI - N decomposition with s = max diagonal entry.

    ok requires nonpositive off-diagonal entries and spectral radius of
    N = sI - M strictly below s.  row_condition reports whether the vector
    of column sums e'M is componentwise nonnegative.
    """
    M = _as_square(M)
    d = M.shape[0]
    off = M - np.diag(np.diag(M))
    s = float(np.max(np.diag(M)))
    N = s * np.eye(d) - M
    rad = float(np.max(np.abs(np.linalg.eigvals(N)))) if d > 0 else 0.0
    ok = bool(np.all(off <= 0.0) and s > 0.0 and rad < s)
    row_condition = bool(np.all(M.sum(axis=0) >= -1e-12))
    return MMatrixReport(ok=ok, s=s, spectral_radius_N=rad, row_condition=row_condition)


def solve_lyapunov(M) -> np.ndarray:
    """Positive definite S with S M + M' S = I.

    Requires the spectrum of M in the open right half-plane; the result is
    symmetrized and validated by substitution (residual <= 1e-10).
    """
    M = _as_square(M)
    d = M.shape[0]
    if np.min(np.linalg.eigvals(M).real) <= 0:
        raise NoSolutionError("spectrum of M must lie in the open right half-plane")
    S = solve_continuous_lyapunov(M.T, np.eye(d))
    S = 0.5 * (S + S.T)
    residual = np.linalg.norm(S @ M + M.T @ S - np.eye(d))
    if residual > 1e-10:
        raise NoSolutionError(f"Lyapunov residual {residual:.2e} exceeds 1e-10")
    np.linalg.cholesky(S)
    return S


def _forms(M, Gamma, v, Q):
    d = M.shape[0]
    e = np.ones(d)
    A = M - (M - Gamma) @ np.outer(v, e)
    form1 = Q @ M + M.T @ Q
    form2 = Q @ A + A.T @ Q
    return form1, form2


def _margins(M, Gamma, v, Q):
    form1, form2 = _forms(M, Gamma, v, Q)
    m1 = float(eigh(form1, eigvals_only=True)[0])
    m2 = float(eigh(form2, eigvals_only=True)[0])
    return m1, m2, form1, form2


def check_q(M, Gamma, v, Q, mode: str = "no-abandonment") -> QCheckReport:
    """Diagnostic margins of both certificate forms for a given Q.

    Also evaluates the t-blended form (I - t e v')M'Q + Q M(I - t v e')
    on t in {0, 0.1, ..., 0.9} and reports the smallest eigenvalue seen.
    """
    M = _as_square(M)
    d = M.shape[0]
    Gamma = np.zeros((d, d)) if Gamma is None else _as_square(Gamma)
    v = np.asarray(v, dtype=float)
    Q = _as_square(Q)
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    m1, m2, _, _ = _margins(M, Gamma, v, Q)
    e = np.ones(d)
    interp = np.inf
    for t in np.arange(0.0, 0.95, 0.1):
        P = np.eye(d) - t * np.outer(v, e)
        form_t = P.T @ M.T @ Q + Q @ M @ P
        interp = min(interp, float(eigh(form_t, eigvals_only=True)[0]))
    return QCheckReport(margin_first=m1, margin_second=m2,
                        interpolated_margin=float(interp))


def _null_basis_of_e(d):
    """Orthonormal basis of the hyperplane {z : <e, z> = 0}."""
    e = np.ones((d, 1)) / np.sqrt(d)
    full = np.linalg.svd(e @ e.T)[0]
    return full[:, 1:]


def _reduced_candidates(M, v):
    """Closed-form candidate family for the Gamma v = 0 mode.

    Any admissible Q satisfies Q v = kappa * (M^-1)' e, and on the hyperplane
    orthogonal to e the second form reduces to a Lyapunov product with the
    compression B of (I - v e')M.  Solving the reduced Lyapunov equation and
    scanning the two remaining scalars (tau, kappa) yields a certificate
    whenever B is positively stable.
    """
    d = M.shape[0]
    e = np.ones(d)
    wt = np.linalg.solve(M.T, e)
    P = np.eye(d) - np.outer(v, e)
    K = np.outer(P.T @ wt, e) + np.outer(e, P.T @ wt) + float(wt @ v) * np.outer(e, e)
    if d == 1:
        return np.zeros((1, 1)), K
    U = _null_basis_of_e(d)
    B = U.T @ (P @ M) @ U
    if np.min(np.linalg.eigvals(B).real) <= 1e-12:
        return None, K
    Y = solve_continuous_lyapunov(B.T, np.eye(d - 1))
    base = P.T @ (U @ Y @ U.T) @ P
    return base, K


def _scan_two_scalars(M, Gamma, v, base, K):
    """Maximize the normalized first margin over Q = tau*base + kappa*K."""
    best = None
    taus = [0.0] if base is None or not np.any(base) else np.geomspace(1e-3, 1e3, 19)
    for tau in taus:
        for kappa in np.geomspace(1e-4, 1e3, 22):
            Q = tau * base + kappa * K if base is not None else kappa * K
            Q = 0.5 * (Q + Q.T)
            lam_q = float(np.linalg.eigvalsh(Q)[0])
            if lam_q <= 1e-14 * np.linalg.norm(Q):
                continue
            m1, m2, _, form2 = _margins(M, Gamma, v, Q)
            if m2 < -PSD_TOL * max(np.linalg.norm(form2), 1.0):
                continue
            score = m1 / np.linalg.norm(Q)
            if m1 > 0 and (best is None or score > best[0]):
                best = (score, Q, m1, m2)
    return best


def _subgradient_ascent(M, Gamma, v, strict_second, max_iter=10000, seed=0):
    """Projected subgradient ascent on min of normalized margins.

    Parametrization is the full symmetric cone when the second form must be
    strictly positive, and the reduced (R on ker e', kappa) family when it
    can only reach semidefiniteness.  The objective, a min of smallest
    eigenvalues of affine matrix maps, is concave.
    """
    d = M.shape[0]
    e = np.ones(d)

    if strict_second:
        def make_q(theta):
            Q = np.zeros((d, d))
            idx = np.triu_indices(d)
            Q[idx] = theta
            Q = Q + np.triu(Q, 1).T
            return Q

        n_par = d * (d + 1) // 2
        theta = np.zeros(n_par)
        theta[np.cumsum([0] + list(range(d, 1, -1)))] = 1.0  # Q = I start
    else:
        base, K = _reduced_candidates(M, v)
        U = _null_basis_of_e(d) if d > 1 else None

        def make_q(theta):
            kappa = theta[-1]
            Q = kappa * K
            if d > 1:
                R = np.zeros((d - 1, d - 1))
                idx = np.triu_indices(d - 1)
                R[idx] = theta[:-1]
                R = R + np.triu(R, 1).T
                P = np.eye(d) - np.outer(v, e)
                Q = Q + P.T @ (U @ R @ U.T) @ P
            return 0.5 * (Q + Q.T)

        n_par = (d - 1) * d // 2 + 1
        theta = np.zeros(n_par)
        theta[-1] = 1.0

    def margins_of(theta):
        Q = make_q(theta)
        m1, m2, form1, form2 = _margins(M, Gamma, v, Q)
        lam_q = float(np.linalg.eigvalsh(Q)[0])
        return Q, m1, m2, lam_q

    def objective(theta):
        Q, m1, m2, lam_q = margins_of(theta)
        scale = max(np.linalg.norm(Q), 1e-12)
        parts = [m1 / scale, lam_q / scale]
        if strict_second:
            parts.append(m2 / scale)
        else:
            # second form margin on the complement of v (0 in the v direction)
            parts.append(_second_margin_reduced(M, Gamma, v, Q) / scale)
        return min(parts), Q

    def _second_margin_reduced(M, Gamma, v, Q):
        _, form2 = _forms(M, Gamma, v, Q)
        W = _complement_basis(v)
        return float(np.linalg.eigvalsh(W.T @ form2 @ W)[0]) if W.shape[1] else 0.0

    def _complement_basis(v):
        vv = v / np.linalg.norm(v)
        full = np.linalg.svd(np.outer(vv, vv))[0]
        return full[:, 1:]

    rng = np.random.default_rng(seed)
    best_val, best_q = objective(theta)
    step0 = 0.5
    cur = theta.copy()
    for it in range(max_iter):
        # numerical subgradient via smallest-eigenvector sensitivity
        val, _ = objective(cur)
        grad = np.zeros_like(cur)
        h = 1e-6
        for j in range(cur.size):
            probe = cur.copy()
            probe[j] += h
            grad[j] = (objective(probe)[0] - val) / h
        gn = np.linalg.norm(grad)
        if gn < 1e-14:
            break
        cur = cur + step0 / np.sqrt(it + 1.0) * grad / gn
        nrm = np.linalg.norm(cur)
        if nrm > 10.0:
            cur *= 10.0 / nrm
        val, Q = objective(cur)
        if val > best_val:
            best_val, best_q = val, Q
        if best_val > 1e-4 and it > 50:
            break
    return best_q, best_val


def find_q(M, Gamma, v, mode: str = "no-abandonment",
           max_iter: int = 10000) -> LyapunovCertificate:
    """Search for a certificate matrix Q for the requested drift mode.

    no-abandonment requires column sums e'M >= 0 and Gamma v = 0; returns Q
    with form1 positive definite and form2 positive semidefinite (its margin
    is exactly zero in the v direction).  abandonment requires Mv >= Gamma*v
    with Gamma*v nonzero, or diagonal positive M with Gamma*v nonzero, and
    returns Q with both margins strictly positive.  Margins are re-verified
    with a second eigenvalue routine before returning.
    """
    M = _as_square(M)
    d = M.shape[0]
    Gamma = np.zeros((d, d)) if Gamma is None else _as_square(Gamma)
    v = np.asarray(v, dtype=float)
    if v.shape != (d,) or np.any(v < -1e-12) or abs(v.sum() - 1.0) > 1e-9:
        raise HypothesisError("control must be a probability vector over classes")
    report = validate_m_matrix(M)
    if not report.ok:
        raise HypothesisError("drift matrix is not a nonsingular M-matrix")
    gv = Gamma @ v

    if mode == "no-abandonment":
        if not report.row_condition:
            raise HypothesisError("column-sum condition e'M >= 0 fails")
        if np.linalg.norm(gv) > 1e-12:
            raise HypothesisError("no-abandonment mode requires Gamma v = 0")
        base, K = _reduced_candidates(M, v)
        best = None
        if base is not None:
            best = _scan_two_scalars(M, Gamma, v, base, K)
        if best is None:
            Q, _ = _subgradient_ascent(M, Gamma, v, strict_second=False,
                                       max_iter=max_iter)
            m1, m2, _, form2 = _margins(M, Gamma, v, Q)
            if m1 <= 0 or m2 < -PSD_TOL * max(np.linalg.norm(form2), 1.0):
                raise CertificateNotFound(
                    "no certificate with positive margins found",
                    best_margins=(m1, m2))
            best = (m1 / np.linalg.norm(Q), Q, m1, m2)
        _, Q, m1, m2 = best
    elif mode == "abandonment":
        hyp_i = bool(np.all(M @ v >= gv - 1e-12) and np.any(gv > 1e-12)
                     and np.all(gv >= -1e-12))
        hyp_ii = bool(np.allclose(M, np.diag(np.diag(M)))
                      and np.all(np.diag(M) > 0) and np.linalg.norm(gv) > 1e-12)
        if not (hyp_i or hyp_ii):
            raise HypothesisError(
                "abandonment mode needs Mv >= Gamma v (nonzero) or diagonal M "
                "with Gamma v nonzero")
        e = np.ones(d)
        A = M - (M - Gamma) @ np.outer(v, e)
        candidates = []
        if np.min(np.linalg.eigvals(A).real) > 1e-12:
            QA = solve_continuous_lyapunov(A.T, np.eye(d))
            candidates.append(0.5 * (QA + QA.T))
        if np.min(np.linalg.eigvals(M).real) > 0:
            QS = solve_continuous_lyapunov(M.T, np.eye(d))
            candidates.append(0.5 * (QS + QS.T))
        candidates.append(np.eye(d))
        best = None
        for Q in candidates:
            if np.linalg.eigvalsh(Q)[0] <= 0:
                continue
            m1, m2, _, _ = _margins(M, Gamma, v, Q)
            score = min(m1, m2) / np.linalg.norm(Q)
            if m1 > 0 and m2 > 0 and (best is None or score > best[0]):
                best = (score, Q, m1, m2)
        if best is None:
            Q, _ = _subgradient_ascent(M, Gamma, v, strict_second=True,
                                       max_iter=max_iter)
            m1, m2, _, _ = _margins(M, Gamma, v, Q)
            if m1 <= 0 or m2 <= 0:
                raise CertificateNotFound(
                    "no certificate with positive margins found",
                    best_margins=(m1, m2))
            best = (min(m1, m2) / np.linalg.norm(Q), Q, m1, m2)
        _, Q, m1, m2 = best
    else:
        raise ValueError(f"unknown mode {mode!r}")

    # independent re-check with a second symmetric eigensolver
    form1, form2 = _forms(M, Gamma, v, Q)
    r1 = float(np.linalg.eigvalsh(form1)[0])
    r2 = float(np.linalg.eigvalsh(form2)[0])
    scale = max(np.linalg.norm(form1), np.linalg.norm(form2), 1.0)
    if abs(r1 - m1) > 1e-8 * scale or abs(r2 - m2) > 1e-8 * scale:
        raise CertificateNotFound("eigenvalue re-check disagrees with search margins",
                                  best_margins=(m1, m2))
    np.linalg.cholesky(Q)
    return LyapunovCertificate(Q=Q, margin_first=r1, margin_second=r2, mode=mode)
