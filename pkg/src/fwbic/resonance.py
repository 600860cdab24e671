"""Complex resonances of the open cavity from the truncated coupled matrix.

``T(mu)`` is complex symmetric, so the left null vector is the unconjugated
transpose of the right one. Newton's method is applied to the eigenvalue
``kappa(mu)`` of ``T(mu)`` closest to zero, with

    dkappa/dmu = r^T T'(mu) r / r^T r .
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import BranchJump, EscapedBand, NoConvergence
from .modematch import full_matrix, full_matrix_derivative, sigma_min

CERT_THRESHOLD = 1e-8


@dataclass
class ResonancePoint:
    delta: float
    mu: complex
    branch: int
    sigma_min: float
    iterations: int


def _newton(md, mu, coupling=1.0, tol=1e-10, maxit=60, cutoff=None):
    s = md.scaling * coupling
    h = md.h
    for it in range(1, maxit + 1):
        T = full_matrix(mu, md.table, md.lambdas, h, s)
        kap, vec = np.linalg.eig(T)
        i = int(np.argmin(np.abs(kap)))
        r = vec[:, i]
        dT = full_matrix_derivative(mu, md.table, h, s)
        den = r @ dT @ r
        step = kap[i] * (r @ r) / den
        mu = mu - step
        if cutoff is not None and not (0 < mu.real < cutoff):
            raise EscapedBand(
                "resonance left the single-mode band", delta=md.delta, mu=mu, cutoff=cutoff,
            )
        if abs(step) < 1e-15 * max(1.0, abs(mu)):
            break
    T = full_matrix(mu, md.table, md.lambdas, h, s)
    smin = sigma_min(T)
    tnorm = np.linalg.norm(T, 2)
    if smin > tol * tnorm:
        raise NoConvergence(
            "resonance Newton iteration did not converge",
            module="resonance", delta=md.delta, mu=mu, sigma_min=smin, iterations=it,
        )
    return complex(mu), smin, it


def find_resonance(md, mu_guess, branch=-1, tol=1e-10, maxit=60):
    """Resonance of the truncated system near ``mu_guess``."""
    cutoff = (math.pi / md.h) ** 2
    mu0 = complex(mu_guess)
    if not 0 < mu0.real < cutoff:
        raise EscapedBand("initial guess outside the single-mode band", mu=mu0, cutoff=cutoff)
    mu, smin, it = _newton(md, mu0, 1.0, tol, maxit, cutoff)
    return ResonancePoint(float(md.delta), mu, branch, smin, it)


def coupling_homotopy(md, branch, steps=20, tol=1e-10):
    """Follow the root from ``mu = lam_branch`` at zero coupling to full
    coupling; this fixes which resonance belongs to which cavity branch."""
    cutoff = (math.pi / md.h) ** 2
    mu = complex(md.lambdas[branch])
    prev = mu
    its = 0
    for t in np.linspace(0, 1, steps + 1)[1:]:
        guess = mu + (mu - prev) if its else mu
        prev = mu
        mu, smin, it = _newton(md, guess, t, tol, 60, cutoff)
        its += it
    return ResonancePoint(float(md.delta), mu, branch, smin, its)


def scan_resonances(model, deltas, branches=None, data=None, executor=None,
                    jump_factor=10.0):
    """Continue resonances along ``deltas`` for the given cavity branches.

    The first point of each branch comes from a coupling homotopy; later
    points are seeded by linear extrapolation of the previous two roots.
    Returns ``{branch: [ResonancePoint, ...]}``.
    """
    M = model.M
    branches = (M - 2, M - 1) if branches is None else tuple(branches)
    if data is None:
        data = model.sweep(deltas, executor)
    out = {}
    for m in branches:
        pts = [coupling_homotopy(data[0], m)]
        steps = []
        for k in range(1, len(data)):
            if len(pts) >= 2:
                guess = 2 * pts[-1].mu - pts[-2].mu
            else:
                guess = pts[-1].mu
            p = find_resonance(data[k], guess, m)
            jump = abs(p.mu - pts[-1].mu)
            if len(steps) >= 3:
                med = float(np.median(steps))
                if jump > jump_factor * med and jump > 1e-8:
                    raise BranchJump(
                        "resonance jumped between consecutive parameter values",
                        branch=m, delta=p.delta, jump=jump, median_step=med,
                    )
            steps.append(jump)
            pts.append(p)
        out[m] = pts
    return out


def min_imag(points):
    """Parameter of least ``|Im mu|`` on the grid, refined by a parabola
    through the three neighbouring samples of ``Im mu``."""
    d = np.array([p.delta for p in points])
    im = np.array([p.mu.imag for p in points])
    k = int(np.argmin(np.abs(im)))
    out = {"index": k, "delta_grid": float(d[k]), "im_grid": float(im[k]),
           "re_grid": float(points[k].mu.real)}
    if 0 < k < len(d) - 1:
        c = np.polyfit(d[k - 1 : k + 2], im[k - 1 : k + 2], 2)
        if c[0] < 0:
            dv = -c[1] / (2 * c[0])
            if d[k - 1] <= dv <= d[k + 1]:
                out["delta_refined"] = float(dv)
                re = np.array([p.mu.real for p in points[k - 1 : k + 2]])
                out["re_refined"] = float(np.polyval(np.polyfit(d[k - 1 : k + 2], re, 2), dv))
    out.setdefault("delta_refined", out["delta_grid"])
    out.setdefault("re_refined", out["re_grid"])
    out["below_threshold"] = bool(abs(out["im_grid"]) < CERT_THRESHOLD)
    return out


def write_resonances(path, scan):
    """CSV ``delta, branch, re_mu, im_mu, sigma_min``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "branch", "re_mu", "im_mu", "sigma_min"])
        for m, pts in scan.items():
            for p in pts:
                w.writerow([repr(p.delta), m, repr(p.mu.real), repr(p.mu.imag), repr(p.sigma_min)])
