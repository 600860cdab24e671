"""Waveguide basis, coupling vectors, the truncated coupled system and its
reduction to two scalar governing functions.

Notation: ``O[j, m] = (phi_j, psi_m)`` on the opening; the coupled system
for the cavity coefficients ``d`` is ``T(mu) d = 0`` with

    T(mu) = diag(lam - mu) - s * sum_j i alpha_j(mu) O[j]^T O[j]

where ``s`` is 1 for index sweeps and ``1/(1 + delta C_R)`` under boundary
scaling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .cavity_analytic import overlap_rect
from .errors import BandViolation, IllConditioned, NearZeroCoupling

_SNAP = 1e-10


def alpha(mu, j, h):
    """Longitudinal wavenumber of waveguide mode ``j``.

    ``alpha_0 = sqrt(mu)`` (principal root, outgoing). For ``j >= 1``,
    ``alpha_j = i sqrt((j pi/h)^2 - mu)`` so that ``i alpha_j`` has negative
    real part (evanescent decay) on both sides of the real axis; this is the
    analytic continuation from real ``mu`` below cutoff.
    """
    mu = complex(mu)
    if j == 0:
        return np.sqrt(mu)
    k2 = (j * math.pi / h) ** 2
    return 1j * np.sqrt(k2 - mu)


def alphas(mu, h, J):
    """Vector ``[alpha_0, ..., alpha_J]``."""
    k2 = (np.arange(J + 1) * math.pi / h) ** 2
    mu = complex(mu)
    out = 1j * np.sqrt(k2 - mu + 0j)
    out[0] = np.sqrt(mu)
    return out


def ialpha_real(mu, h, J):
    """``i alpha_j`` for ``j = 1..J`` at real ``mu`` below cutoff (all
    negative)."""
    k2 = (np.arange(1, J + 1) * math.pi / h) ** 2
    return -np.sqrt(k2 - mu)


@dataclass(frozen=True)
class WaveguideBasis:
    h: float
    J_wg: int

    def k(self, j):
        return j * math.pi / self.h

    def phi(self, j, y):
        """Cosine profile, orthonormal on ``(-h/2, h/2)``."""
        y = np.asarray(y, dtype=float)
        if j == 0:
            return np.full_like(y, math.sqrt(1 / self.h))
        return math.sqrt(2 / self.h) * np.cos(self.k(j) * (y + self.h / 2))

    def eta(self, j, y):
        """Sine profile matching ``phi_j`` (zero for ``j = 0``)."""
        y = np.asarray(y, dtype=float)
        if j == 0:
            return np.zeros_like(y)
        return math.sqrt(2 / self.h) * np.sin(self.k(j) * (y + self.h / 2))

    def alpha(self, mu):
        return alphas(mu, self.h, self.J_wg)

    def gram(self):
        """Closed-form Gram matrix of the phi profiles (the identity)."""
        return np.eye(self.J_wg + 1)

    def field(self, b, mu, x1, x2):
        """``sum_j b_j exp(i alpha_j x1) phi_j(x2)`` on arrays of points."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        a = self.alpha(mu)
        out = np.zeros(np.broadcast(x1, x2).shape, dtype=complex)
        for j, bj in enumerate(b):
            out += bj * np.exp(1j * a[j] * x1) * self.phi(j, x2)
        return out


@dataclass
class OverlapTable:
    """``O[j, m] = (phi_j, psi_m)`` on the opening; ``norms2[m]`` is
    ``||psi_m||^2`` on the opening (Bessel bound)."""

    O: np.ndarray
    provenance: str
    norms2: np.ndarray | None = None

    @property
    def J_wg(self):
        return self.O.shape[0] - 1

    @property
    def M_cav(self):
        return self.O.shape[1]

    def truncated(self, J_wg=None, M_cav=None):
        J = self.J_wg if J_wg is None else J_wg
        M = self.M_cav if M_cav is None else M_cav
        n2 = None if self.norms2 is None else self.norms2[:M]
        return OverlapTable(self.O[: J + 1, :M], self.provenance, n2)

    def scaled(self, factor):
        n2 = None if self.norms2 is None else self.norms2 * factor**2
        return OverlapTable(self.O * factor, self.provenance, n2)

    def bessel_excess(self):
        """max over m of ``sum_j O[j,m]^2 - ||psi_m||^2`` (should be <= 0)."""
        if self.norms2 is None:
            return None
        return float(np.max((self.O**2).sum(0) - self.norms2))


def hat_integrals(y, h, J):
    """``G[i, j] = int phi_j(t) e_i(t) dt`` for the P1 hat functions ``e_i``
    on the ascending nodes ``y`` spanning the opening."""
    y = np.asarray(y, dtype=float)
    ya, yb = y[:-1], y[1:]
    dy = yb - ya
    n = len(y)
    G = np.zeros((n, J + 1))
    # j = 0: constant profile
    G[:-1, 0] += dy / 2
    G[1:, 0] += dy / 2
    G[:, 0] *= math.sqrt(1 / h)
    if J == 0:
        return G
    k = np.arange(1, J + 1) * math.pi / h
    sa = k[None, :] * (ya[:, None] + h / 2)
    sb = k[None, :] * (yb[:, None] + h / 2)
    d = dy[:, None]
    # For f linear on [ya, yb], int f cos(s) with F(t) = f sin(s)/k + f' cos(s)/k^2.
    # Hat rising from 0 at ya to 1 at yb, and falling from 1 to 0.
    kk = k[None, :]
    rise = np.sin(sb) / kk + (np.cos(sb) - np.cos(sa)) / (d * kk**2)
    fall = -np.sin(sa) / kk - (np.cos(sb) - np.cos(sa)) / (d * kk**2)
    c = math.sqrt(2 / h)
    G[1:, 1:] += c * rise
    G[:-1, 1:] += c * fall
    return G


def overlaps(basis, wg, analytic_modes=None):
    """Overlap table for a cavity basis.

    Analytic bases (carrying :class:`RectMode` objects) use the closed-form
    rectangle overlaps; FEM bases integrate the piecewise-linear wall trace
    against each profile edge by edge.
    """
    h, J = wg.h, wg.J_wg
    if basis.modes is not None:
        O = np.array([[overlap_rect(m, j, h) for m in basis.modes] for j in range(J + 1)])
        n2 = np.array([_rect_trace_norm2(m, h) for m in basis.modes])
        return OverlapTable(O, "analytic", n2)
    sel = np.abs(basis.wall_y) <= h / 2 + _SNAP
    y = basis.wall_y[sel]
    if len(y) < 2 or abs(y[0] + h / 2) > _SNAP or abs(y[-1] - h / 2) > _SNAP:
        from .errors import SnapFailure

        raise SnapFailure("opening endpoints are not wall nodes", h=h)
    v = basis.wall_values[sel]
    G = hat_integrals(y, h, J)
    O = G.T @ v
    # exact L2 norm of the piecewise-linear trace
    dy = np.diff(y)[:, None]
    a, b = v[:-1], v[1:]
    n2 = (dy * (a * a + a * b + b * b) / 3).sum(0)
    return OverlapTable(O, "FEM-trace", n2)


def _rect_trace_norm2(mode, h):
    a = mode.q * math.pi / mode.W
    b = a * mode.y0
    c2 = mode.norm_const**2
    # cos^2 = (1 + cos(2at + 2b)) / 2
    return c2 * 0.5 * (h + h * math.cos(2 * b) * np.sinc(2 * a * h / (2 * math.pi)))


def full_matrix(mu, table, lambdas, h, scaling=1.0):
    """Truncated coupled matrix ``T(mu)`` (complex symmetric)."""
    O = table.O
    a = alphas(mu, h, table.J_wg)
    lam = np.asarray(lambdas, dtype=float)
    return np.diag(lam - mu).astype(complex) - scaling * (O.T * (1j * a)) @ O


def full_matrix_derivative(mu, table, h, scaling=1.0):
    """``dT/dmu``; uses ``d(i alpha_j)/dmu = i / (2 alpha_j)``."""
    O = table.O
    a = alphas(mu, h, table.J_wg)
    return -np.eye(table.M_cav) - scaling * (O.T * (1j / (2 * a))) @ O


def sigma_min(A):
    return float(np.linalg.svd(A, compute_uv=False)[-1])


@dataclass
class ReducedSystem:
    """Blocks and scalars of the reduction at one real ``(delta, mu)``.

    Index sets: ``lo = 0..M-3``, ``pair = (M-2, M-1)``, ``hi = M..M_cav-1``,
    ``low = lo + pair``.
    """

    delta: float
    mu: float
    M: int
    M_cav: int
    J_wg: int
    A: np.ndarray
    B: np.ndarray
    V: np.ndarray
    D: np.ndarray
    C00: np.ndarray
    C01: np.ndarray
    C10: np.ndarray
    C11: np.ndarray
    L00: np.ndarray
    L11: np.ndarray
    a: np.ndarray  # 3x2: rows (a00, a01), (a10, a11), (a20, a21)
    f0: float
    f1: float
    lambdas: np.ndarray
    X: np.ndarray  # d_lo = X d_pair
    hi_map: np.ndarray  # d_hi = hi_map d_low
    cond_L: float

    @property
    def a00(self):
        return self.a[0, 0]

    @property
    def a01(self):
        return self.a[0, 1]

    @property
    def a10(self):
        return self.a[1, 0]

    @property
    def a11(self):
        return self.a[1, 1]

    @property
    def a20(self):
        return self.a[2, 0]

    @property
    def a21(self):
        return self.a[2, 1]

    def g(self, which):
        """Residual ``lam - mu + f`` of governing equation ``which``."""
        lam = self.lambdas[self.M - 2 + which]
        return lam - self.mu + (self.f0 if which == 0 else self.f1)

    def small_system(self):
        """The 3x2 matrix acting on ``(d_{M-2}, d_{M-1})``."""
        lam = self.lambdas
        S = self.a.copy()
        S[0, 0] += lam[self.M - 2] - self.mu
        S[1, 1] += lam[self.M - 1] - self.mu
        return S

    def coefficients(self, d_pair):
        """Full cavity coefficient vector from the pair coefficients."""
        d_pair = np.asarray(d_pair, dtype=float)
        d_low = np.concatenate([self.X @ d_pair, d_pair])
        return np.concatenate([d_low, self.hi_map @ d_low])


def build_reduction(mu, table, lambdas, M, h, scaling=1.0, delta=0.0,
                    coupling_floor=None, cond_max=1e12, check=True):
    """Reduce the real part of the truncated system plus the radiation
    condition to the 3x2 system on the crossing pair.

    ``lambdas`` must list the pair at positions ``M-2, M-1`` (branch order);
    every ``lambdas[m]`` with ``m >= M`` must exceed ``mu``.
    """
    lam = np.asarray(lambdas, dtype=float)
    O = table.O
    Mc, J = table.M_cav, table.J_wg
    mu = float(mu)
    hi = np.arange(M, Mc)
    if check and np.any(lam[hi] <= mu):
        bad = hi[lam[hi] <= mu]
        raise BandViolation(
            "a truncated-out eigenvalue lies at or below mu",
            delta=delta, mu=mu, modes=bad.tolist(), lambdas=lam[bad].tolist(),
        )
    # S = s * sum_{j>=1} i alpha_j v_j v_j^T, negative semidefinite
    ia = ialpha_real(mu, h, J)
    Oe = O[1:]
    S = scaling * (Oe.T * ia) @ Oe
    low = np.arange(M)
    lo = np.arange(M - 2)
    pr = np.arange(M - 2, M)

    Dd = 1.0 / np.sqrt(lam[hi] - mu)
    D = np.diag(Dd)
    B = Dd[:, None] * S[np.ix_(hi, hi)] * Dd[None, :]
    V = Dd[:, None] * S[np.ix_(hi, low)]
    A = S[np.ix_(low, low)]
    IB = np.eye(len(hi)) - B
    if len(hi):
        fac = sla.cho_factor(IB)
        W = sla.cho_solve(fac, V)  # (I - B)^-1 V
    else:
        W = np.zeros((0, M))
    C = A + V.T @ W
    C = (C + C.T) / 2
    C00 = C[np.ix_(lo, lo)]
    C01 = C[np.ix_(lo, pr)]
    C10 = C[np.ix_(pr, lo)]
    C11 = C[np.ix_(pr, pr)]
    L00 = np.diag(lam[lo] - mu)
    L11 = np.diag(lam[pr] - mu)
    Lc = L00 - C00
    cond = float(np.linalg.cond(Lc)) if len(lo) else 1.0
    if check and cond > cond_max:
        raise IllConditioned(
            "eliminated low-mode block is ill conditioned",
            delta=delta, mu=mu, cond=cond,
        )
    X = np.linalg.solve(Lc, C01) if len(lo) else np.zeros((0, 2))
    a = np.empty((3, 2))
    a[:2] = -C11 - C10 @ X
    hi_map = Dd[:, None] * W  # d_hi = D (I-B)^-1 V d_low
    v0 = O[0]
    ext = np.vstack([X, np.eye(2)])
    a[2] = v0[low] @ ext + v0[hi] @ (hi_map @ ext)
    floor = 1e-6 * math.sqrt(h) if coupling_floor is None else coupling_floor
    if check and min(abs(a[2, 0]), abs(a[2, 1])) < floor:
        raise NearZeroCoupling(
            "radiation coupling of the crossing pair is below the floor",
            delta=delta, mu=mu, a20=a[2, 0], a21=a[2, 1], floor=floor,
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = a[0, 0] - a[0, 1] * a[2, 0] / a[2, 1]
        f1 = a[1, 1] - a[1, 0] * a[2, 1] / a[2, 0]
    return ReducedSystem(
        delta=delta, mu=mu, M=M, M_cav=Mc, J_wg=J,
        A=A, B=B, V=V, D=D, C00=C00, C01=C01, C10=C10, C11=C11,
        L00=L00, L11=L11, a=a, f0=float(f0), f1=float(f1), lambdas=lam,
        X=X, hi_map=hi_map, cond_L=cond,
    )


def schur_reference(mu, table, lambdas, M, h, scaling=1.0):
    """3x2 Schur complement of the real system ``[Re T; O_0]`` after
    eliminating every mode except the pair, computed directly from the full
    matrix. Used to cross-check :func:`build_reduction`."""
    T = full_matrix(mu, table, lambdas, h, scaling).real
    R = np.vstack([T, table.O[0][None, :]])
    Mc = table.M_cav
    keep = np.array([M - 2, M - 1])
    other = np.setdiff1d(np.arange(Mc), keep)
    rows_k = np.array([M - 2, M - 1, Mc])
    X = np.linalg.solve(R[np.ix_(other, other)], R[np.ix_(other, keep)])
    return R[np.ix_(rows_k, keep)] - R[np.ix_(rows_k, other)] @ X


def write_diagnostics(path, rows):
    """CSV ``delta, mu, f0, f1, a20, a21, sigma_min_full``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "mu", "f0", "f1", "a20", "a21", "sigma_min_full"])
        for r in rows:
            w.writerow([repr(float(r[k])) for k in ("delta", "mu", "f0", "f1", "a20", "a21", "sigma_min_full")])
