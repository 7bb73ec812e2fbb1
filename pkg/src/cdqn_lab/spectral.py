"""Hessians of the MSBE loss for a trajectory and a cycle, and their spectra.

The uniform 1/N (or 2/N) prefactor of the loss is left out of every matrix:
it rescales all eigenvalues alike and cancels in the condition number.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Kind(enum.Enum):
    TRAJECTORY = "trajectory"
    CYCLE = "cycle"


@dataclass(frozen=True)
class SymmetricMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("a symmetric matrix must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("matrix is not exactly symmetric")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def trajectory_hessian(n: int) -> SymmetricMatrix:
    """Tridiagonal matrix, diagonal 4 and off-diagonal -2.

    Hessian in {Q_t} of the trajectory loss sum (Q_t - r_t - Q_{t+1})^2 at
    gamma = 1 when the terminal value is fixed and the extra Q^2(s_0, a_0)
    term is added (times N, without the factor 1/N).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h = 4.0 * np.eye(n)
    i = np.arange(n - 1)
    h[i, i + 1] = h[i + 1, i] = -2.0
    return SymmetricMatrix(h)


def cycle_hessian(n: int, gamma: float) -> SymmetricMatrix:
    """Circulant Hessian of sum (Q_t - r_t - gamma Q_{t+1 mod N})^2: diagonal 2(1+gamma^2), neighbours -2 gamma."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    h = np.zeros((n, n))
    idx = np.arange(n)
    h[idx, idx] = 2.0 * (1.0 + gamma * gamma)
    # for n = 2 both neighbours are the same entry and the contributions add
    np.add.at(h, (idx, (idx + 1) % n), -2.0 * gamma)
    np.add.at(h, ((idx + 1) % n, idx), -2.0 * gamma)
    return SymmetricMatrix(h)


def analytic_eigs(kind, n: int, gamma: float | None = None) -> np.ndarray:
    """Closed-form spectra, sorted ascending.

    Trajectory: 4 - 4 cos(k pi/(N+1)), k = 1..N.
    Cycle: 2(1+gamma^2) - 4 gamma cos(2 k pi/N), k = 0..N-1. The sine and
    cosine standing waves share eigenvalues, so each k appears once and the
    multiplicities come out right without deduplication.
    Both use half-angle forms to avoid cancellation at small k.
    """
    kind = Kind(kind)
    if kind is Kind.TRAJECTORY:
        if n < 1:
            raise ValueError("n must be >= 1")
        k = np.arange(1, n + 1)
        return np.sort(8.0 * np.sin(k * np.pi / (2 * (n + 1))) ** 2)
    if gamma is None:
        raise ValueError("cycle spectrum needs gamma")
    if n < 2 or not 0.0 <= gamma < 1.0:
        raise ValueError("cycle spectrum needs n >= 2 and 0 <= gamma < 1")
    k = np.arange(n)
    return np.sort(2.0 * (1.0 - gamma) ** 2 + 8.0 * gamma * np.sin(k * np.pi / n) ** 2)


def standing_wave(n: int, k: int) -> np.ndarray:
    """(sin(j k pi/(N+1)))_j, an eigenvector of the trajectory Hessian."""
    j = np.arange(1, n + 1)
    return np.sin(j * k * np.pi / (n + 1))


def jacobi_eigs(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Cyclic Jacobi eigenvalues of a symmetric matrix.

    Sweeps over all (p, q) pairs, zeroing a[p, q] with a plane rotation, until
    the off-diagonal Frobenius norm is below ``tol`` times the matrix norm.
    The remaining error in each eigenvalue is bounded by that off-diagonal norm.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            return np.sort(np.diag(a))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
    raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")


def numeric_eigs(m: SymmetricMatrix, tol: float = 1e-12, method: str = "lapack") -> np.ndarray:
    """Full spectrum, sorted ascending.

    ``method='lapack'`` uses the symmetric LAPACK driver (fast for N in the
    hundreds); ``method='jacobi'`` uses :func:`jacobi_eigs`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = m.entries
    if np.count_nonzero(a - np.diag(np.diag(a))) == 0:
        return np.sort(np.diag(a).copy())
    if method == "jacobi":
        return jacobi_eigs(a, tol)
    if method == "lapack":
        return np.sort(np.linalg.eigvalsh(a))
    raise ValueError(f"unknown eigen method {method!r}")


def condition_number(eigs) -> float:
    e = np.abs(np.asarray(eigs, dtype=float))
    if e.size == 0 or e.min() == 0.0:
        raise ZeroDivisionError("condition number of a singular matrix")
    return float(e.max() / e.min())


def trajectory_kappa_exact(n: int) -> float:
    """(1 + cos(pi/(N+1))) / (1 - cos(pi/(N+1))) = cot^2(pi/(2(N+1)))."""
    return float(1.0 / np.tan(np.pi / (2 * (n + 1))) ** 2)


def cycle_kappa_limit(gamma: float) -> float:
    return (1.0 + gamma) ** 2 / (1.0 - gamma) ** 2


def scaling_exponent(ns, kappas) -> float:
    """Least-squares slope of log kappa against log N."""
    ns, kappas = np.asarray(ns, dtype=float), np.asarray(kappas, dtype=float)
    if ns.size < 3 or ns.size != kappas.size:
        raise ValueError("scaling fit needs at least 3 matched points")
    return float(np.polyfit(np.log(ns), np.log(kappas), 1)[0])


def spectral_table(ns, kind="trajectory", gamma=None, method="lapack"):
    """Rows (N, kappa_numeric, kappa_analytic)."""
    rows = []
    for n in ns:
        m = trajectory_hessian(n) if Kind(kind) is Kind.TRAJECTORY else cycle_hessian(n, gamma)
        rows.append((int(n), condition_number(numeric_eigs(m, method=method)),
                     condition_number(analytic_eigs(kind, n, gamma))))
    return rows
