"""Governing-equation branches mu_0(delta), mu_1(delta), their intersection
(the interference BIC), mode reconstruction and the parity-protected case.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from .errors import (
    BandViolation,
    FWBICError,
    NearZeroCoupling,
    NoCrossing,
    NoRootInBand,
    NoSignChange,
    ParityViolation,
)
from .modematch import WaveguideBasis, build_reduction, full_matrix, ialpha_real, sigma_min
from .problem import IndexSweep, derive_mu_band


@dataclass
class BranchRoot:
    mu: float
    iterations: int
    ratios: list
    method: str


def fixed_point(lam, f, band, tol=1e-13, maxit=100):
    """Solve ``lam - mu + f(mu) = 0`` by ``mu <- lam + f(mu)`` from ``mu = lam``.

    Falls back to Brent's method on ``g(mu) = lam - mu + f(mu)`` over
    ``band`` when the iteration stalls or leaves the band.
    """
    mu_l, mu_r = band
    mu = lam
    steps = []
    ok = False
    try:
        for _ in range(maxit):
            new = lam + f(mu)
            steps.append(abs(new - mu))
            mu = new
            if not (mu_l < mu < mu_r) or not math.isfinite(mu):
                break
            if steps[-1] < tol:
                ok = True
                break
            if len(steps) > 3 and steps[-1] > 0.99 * steps[-2]:
                break
    except FWBICError:
        ok = False
    ratios = [steps[i + 1] / steps[i] for i in range(len(steps) - 1) if steps[i] > 0]
    if ok:
        return BranchRoot(float(mu), len(steps), ratios, "fixed-point")

    def g(m):
        return lam - m + f(m)

    gl, gr = g(mu_l), g(mu_r)
    if not (gl > 0 > gr):
        raise NoRootInBand(
            "governing function has no sign change over the band",
            band=band, g_left=gl, g_right=gr,
        )
    root = brentq(g, mu_l, mu_r, xtol=tol, rtol=4 * np.finfo(float).eps)
    return BranchRoot(float(root), len(steps), ratios, "brent")


def band_for(model, ref=None):
    """Spectral band: the configured one, else derived at ``delta = 0``."""
    if model.spec.mu_band is not None:
        return tuple(model.spec.mu_band)
    ref = model.modal(0.0) if ref is None else ref
    band, _ = derive_mu_band(np.sort(ref.lambdas), model.M)
    return band


def solve_branch(md, which, M, band, tol=1e-13, coupling_floor=None):
    """Root of ``lam_{M-2+which}(delta) - mu + f_which(delta, mu) = 0``."""

    def f(mu):
        r = build_reduction(mu, md.table, md.lambdas, M, md.h, md.scaling, md.delta,
                            coupling_floor=coupling_floor)
        return r.f0 if which == 0 else r.f1

    return fixed_point(float(md.lambdas[M - 2 + which]), f, band, tol)


def lipschitz(md, which, M, band, n=41, step=1e-4):
    """Largest finite-difference slope of ``f_which`` over ``n`` band points."""
    out = 0.0
    for mu in np.linspace(band[0] + step, band[1] - step, n):
        vals = []
        for m in (mu - step, mu + step):
            r = build_reduction(m, md.table, md.lambdas, M, md.h, md.scaling, md.delta,
                                check=False)
            vals.append(r.f0 if which == 0 else r.f1)
        out = max(out, abs(vals[1] - vals[0]) / (2 * step))
    return out


@dataclass
class BICSolution:
    delta_star: float
    mu_star: float
    n_star: float | None
    curves: dict
    d: np.ndarray
    b: np.ndarray
    diagnostics: dict
    modal: object = None
    reduced: object = None

    @property
    def certified(self):
        return bool(self.diagnostics.get("certified", False))

    def summary(self):
        out = {
            "delta_star": self.delta_star,
            "mu_star": self.mu_star,
            "n_star": self.n_star,
        }
        out.update({k: v for k, v in self.diagnostics.items() if np.isscalar(v) or v is None})
        return out


def _sign_changes(g):
    """Intervals ``[i, i+1]`` on which ``g`` changes sign; an exact zero at
    the right end counts, so a grid point on the root is not missed."""
    g = np.asarray(g)
    a, b = g[:-1], g[1:]
    return np.where((a * b < 0) | ((a != 0) & (b == 0) & np.isfinite(a)))[0]


def _pair_solve(md, M, band, tol):
    r0 = solve_branch(md, 0, M, band, tol)
    r1 = solve_branch(md, 1, M, band, tol)
    return r0, r1


def _null_vector(S):
    _, _, vh = np.linalg.svd(S)
    return vh[-1]


def certify(md, M, mu, red=None):
    """Cavity and waveguide coefficients at a candidate BIC plus the
    certificate quantities."""
    if red is None:
        red = build_reduction(mu, md.table, md.lambdas, M, md.h, md.scaling, md.delta,
                              check=False)
    S = red.small_system()
    dp = _null_vector(S)
    d = red.coefficients(dp)
    d /= np.linalg.norm(d)
    if d[M - 2] < 0:
        d = -d
    # physical waveguide coefficients: the table carries reference-domain
    # normalization sqrt(1/scaling) under boundary scaling
    b = math.sqrt(md.scaling) * (md.table.O @ d)
    T = full_matrix(mu, md.table, md.lambdas, md.h, md.scaling)
    smin = sigma_min(T)
    tnorm = float(np.linalg.norm(T, 2))
    bnorm = float(np.linalg.norm(b))
    diag = {
        "sigma_min": smin,
        "T_norm": tnorm,
        "sigma_min_rel": smin / tnorm,
        "b0_abs": float(abs(b[0])),
        "b_norm": bnorm,
        "b0_rel": float(abs(b[0]) / bnorm) if bnorm else 0.0,
        "residual_Td": float(np.linalg.norm(T @ d)),
        "small_sigma": float(np.linalg.svd(S, compute_uv=False)[-1]),
    }
    diag["certified"] = bool(diag["sigma_min_rel"] < 1e-8 and diag["b0_rel"] < 1e-6)
    return d, b, diag, red


def find_bic(model, delta_interval=None, steps=41, refine=4, executor=None, band=None):
    """Locate ``delta*`` where the two governing branches meet.

    The branches are sampled on ``steps`` points; the first sign change of
    ``mu_0 - mu_1`` is subdivided ``refine`` times and then solved by a
    bracketing root finder to ``root_tol`` in ``delta``.
    """
    spec = model.spec
    M = model.M
    tol = spec.tolerances
    lo, hi = spec.delta_range if delta_interval is None else delta_interval
    deltas = np.linspace(lo, hi, steps)
    data = model.sweep(deltas, executor)
    if band is None:
        band = band_for(model)
    lam0 = np.array([m.lambdas[M - 2] for m in data])
    lam1 = np.array([m.lambdas[M - 1] for m in data])
    eig_gap = lam0 - lam1
    curves = {"delta": deltas, "lambda0": lam0, "lambda1": lam1}
    if len(_sign_changes(eig_gap)) == 0:
        raise NoCrossing(
            "the tracked pair does not cross on the interval",
            module="bic_search", delta=deltas, gap=eig_gap,
        )
    k = int(np.argmin(np.abs(eig_gap)))
    floor = 1e-6 * math.sqrt(model.h)
    po = data[k].basis.origin_values[M - 2 : M]
    if np.min(np.abs(po)) < floor:
        raise NearZeroCoupling(
            "a crossing mode vanishes at the opening center",
            psi_at_o=po, floor=floor,
        )

    mu0 = np.full(steps, np.nan)
    mu1 = np.full(steps, np.nan)
    iters = []
    ratios = []
    fallbacks = 0
    failures = {}
    for i, md in enumerate(data):
        try:
            r0, r1 = _pair_solve(md, M, band, tol.fixed_point_tol)
        except (BandViolation, NoRootInBand, NearZeroCoupling) as exc:
            failures[float(md.delta)] = exc.record()
            continue
        mu0[i], mu1[i] = r0.mu, r1.mu
        iters.append(max(r0.iterations, r1.iterations))
        fallbacks += (r0.method != "fixed-point") + (r1.method != "fixed-point")
        ratios.extend(r0.ratios[:3] + r1.ratios[:3])
    gap = mu0 - mu1
    curves.update(mu0=mu0, mu1=mu1, gap=gap)
    sc = _sign_changes(gap)
    if len(sc) == 0:
        raise NoSignChange(
            "the governing branches do not intersect on the interval",
            delta=deltas, gap=gap, failures=failures,
        )
    i = int(sc[0])
    left = data[i]

    def gap_at(d, ref=left):
        md = model.modal(d, ref)
        r0, r1 = _pair_solve(md, M, band, tol.fixed_point_tol)
        return r0.mu - r1.mu, md, r0

    # refine the bracket
    a, b = deltas[i], deltas[i + 1]
    ga = gap[i]
    sub = np.linspace(a, b, refine + 1)
    for s0, s1 in zip(sub[:-1], sub[1:]):
        g1 = gap[i + 1] if s1 == b else gap_at(s1)[0]
        if np.sign(g1) != np.sign(ga):
            a, b = s0, s1
            break
        ga = g1
    if a != deltas[i]:
        left = model.modal(a, left)
    cache = {}

    def fgap(d):
        g, md, r0 = gap_at(d, left)
        cache[d] = (md, r0)
        return g

    dstar = brentq(fgap, a, b, xtol=tol.root_tol, rtol=4 * np.finfo(float).eps)
    if dstar not in cache:
        fgap(dstar)
    md, r0 = cache[dstar]
    mu_star = r0.mu
    d, bcoef, diag, red = certify(md, M, mu_star)
    diag["g0"] = float(red.g(0))
    diag["g1"] = float(red.g(1))
    diag["max_fixed_point_iterations"] = int(max(iters)) if iters else None
    diag["max_contraction_ratio"] = float(max(ratios)) if ratios else 0.0
    diag["fixed_point_fallbacks"] = int(fallbacks)
    diag["band"] = list(band)
    diag["solves"] = model.n_solves
    diag["failures"] = failures
    # branch continuity against the local eigenvalue jump
    ok = np.isfinite(mu0) & np.isfinite(mu1)
    if ok.sum() > 1:
        jm = np.maximum(np.abs(np.diff(mu0[ok])), np.abs(np.diff(mu1[ok])))
        jl = np.maximum(np.abs(np.diff(lam0[ok])), np.abs(np.diff(lam1[ok])))
        diag["continuity_ratio"] = float(np.max(jm / np.maximum(jl, 1e-14)))
    n_star = None
    if isinstance(spec.perturbation, IndexSweep):
        n_star = float(spec.perturbation.index(dstar))
    return BICSolution(dstar, mu_star, n_star, curves, d, bcoef, diag, md, red)


def write_curves(path, solution):
    c = solution.curves
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "mu0", "mu1"])
        for row in zip(c["delta"], c["mu0"], c["mu1"]):
            w.writerow([repr(float(v)) for v in row])


def write_summary(path, solution):
    with open(path, "w") as fh:
        json.dump(solution.summary(), fh, indent=2, default=float)


# ---------------------------------------------------------------------------
# mode reconstruction


def _locate(nodes, triangles, pts):
    """Barycentric coordinates of ``pts`` in the triangulation (brute force
    over nearby triangles via a KD-tree on centroids)."""
    from scipy.spatial import cKDTree

    p = nodes[triangles]
    tree = cKDTree(p.mean(1))
    k = min(12, len(triangles))
    _, cand = tree.query(pts, k=k)
    tri = np.full(len(pts), -1)
    bary = np.zeros((len(pts), 3))
    for c in range(k):
        t = cand[:, c]
        a, b, cc = p[t, 0], p[t, 1], p[t, 2]
        v0, v1, v2 = b - a, cc - a, pts - a
        den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
        l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
        l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
        l0 = 1 - l1 - l2
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12) & (tri < 0)
        tri[inside] = t[inside]
        bary[inside] = np.column_stack([l0, l1, l2])[inside]
    return tri, bary


def cavity_field(solution, model, x1, x2):
    """``sum_m d_m psi_m`` at points inside the cavity."""
    md = solution.modal
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    shape = np.broadcast(x1, x2).shape
    pts = np.column_stack([np.broadcast_to(x1, shape).ravel(), np.broadcast_to(x2, shape).ravel()])
    if md.basis.modes is not None:
        vals = sum(dm * m(pts[:, 0], pts[:, 1]) for dm, m in zip(solution.d, md.basis.modes))
        return np.asarray(vals).reshape(shape)
    mesh = model.mesh
    p = model.spec.perturbation
    nodes = mesh.nodes
    if hasattr(p, "C_R"):
        nodes = mesh.scaled(p.factor(solution.delta_star)).nodes
    u = md.basis.vectors @ solution.d
    tri, bary = _locate(nodes, mesh.triangles, pts)
    out = np.full(len(pts), np.nan)
    ok = tri >= 0
    out[ok] = (u[mesh.triangles[tri[ok]]] * bary[ok]).sum(1)
    return out.reshape(shape)


def waveguide_coefficients(solution, J):
    """``b_j``, ``j = 0..J``, of the waveguide field matching the cavity
    trace (independent of the truncation used to find the solution)."""
    md = solution.modal.with_h(solution.modal.h, J)
    return math.sqrt(md.scaling) * (md.table.O @ solution.d), md


def waveguide_field(solution, model, x1, x2, b=None):
    """``sum_j b_j exp(i alpha_j x1) phi_j(x2)`` in the waveguide."""
    b = solution.b if b is None else b
    wg = model.wg if len(b) == model.wg.J_wg + 1 else WaveguideBasis(model.h, len(b) - 1)
    return wg.field(b, solution.mu_star, x1, x2)


def reconstruct_mode(solution, model, n1=61, n2=121, wg_length=None, J_trace=400):
    """Sample the BIC field on uniform grids over the cavity and a waveguide
    section, and report the matching and decay checks.

    The waveguide side uses ``J_trace + 1`` transverse profiles so that the
    trace comparison on the opening measures the matching, not the
    truncation of the profile series (whose L2 tail decays like J^-1.5).
    """
    spec = model.spec
    h = model.h
    bx, _ = waveguide_coefficients(solution, max(J_trace, model.wg.J_wg))
    xs = np.linspace(spec.x_min, spec.x_max, n1)
    if hasattr(spec.perturbation, "C_R"):
        xs = xs * spec.perturbation.factor(solution.delta_star)
    ys = np.linspace(spec.y_min, spec.y_max, n2)
    X1, X2 = np.meshgrid(xs, ys, indexing="ij")
    u_in = cavity_field(solution, model, X1, X2)
    L = 3 * h if wg_length is None else wg_length
    xw = np.linspace(0.0, L, n1)
    yw = np.linspace(-h / 2, h / 2, max(11, n2 // 4))
    W1, W2 = np.meshgrid(xw, yw, indexing="ij")
    u_out = waveguide_field(solution, model, W1, W2, bx)
    # trace matching on the opening
    yg = np.linspace(-h / 2, h / 2, 2001)
    cav = cavity_field(solution, model, np.zeros_like(yg), yg)
    wav = waveguide_field(solution, model, np.zeros_like(yg), yg, bx).real
    scale = np.sqrt(trapezoid(cav**2, yg))
    mismatch = np.sqrt(trapezoid((cav - wav) ** 2, yg)) / scale if scale else 0.0
    b = solution.b
    checks = {
        "b0_over_bmax": float(abs(b[0]) / np.max(np.abs(b))),
        "decay_ratio": float(np.max(np.abs(u_out[-1])) / np.max(np.abs(u_out[0]))),
        "trace_mismatch": float(mismatch),
    }
    return {
        "cavity": (X1, X2, u_in),
        "waveguide": (W1, W2, u_out),
        "checks": checks,
    }


def write_field(path, field_data):
    """CSV ``x1, x2, re_u`` of both sampled regions."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "re_u"])
        for key in ("cavity", "waveguide"):
            X1, X2, U = field_data[key]
            for a, b, c in zip(X1.ravel(), X2.ravel(), np.real(U).ravel()):
                if np.isfinite(c):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


# ---------------------------------------------------------------------------
# parity-protected BIC


def odd_modes(table, tol=1e-8):
    """Indices of modes whose overlaps with every even-index profile vanish
    relative to the column norm (odd about the opening center)."""
    O = table.O
    col = np.linalg.norm(O, axis=0)
    col[col == 0] = 1.0
    even = np.abs(O[0::2]).max(axis=0) / col
    return np.where(even < tol)[0], even


@dataclass
class SymmetricBIC:
    mu: float
    branch: int
    iterations: int
    method: str
    d: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def odd_reduction(mu, md, m, odd):
    """``a(mu)`` of the odd subsystem for mode ``m``: Schur complement of the
    real odd block on the remaining odd modes."""
    O = md.table.O[1::2]  # odd profiles j = 1, 3, ...
    J = md.table.J_wg
    ia = ialpha_real(mu, md.h, J)[0::2]
    S = md.scaling * (O[:, odd].T * ia) @ O[:, odd]
    lam = md.lambdas[odd]
    pos = int(np.where(odd == m)[0][0])
    rest = np.array([i for i in range(len(odd)) if i != pos])
    if len(rest) == 0:
        return -S[pos, pos], np.zeros(0), rest
    R = np.diag(lam[rest] - mu) - S[np.ix_(rest, rest)]
    cond = np.linalg.cond(R)
    if cond > 1e12:
        from .errors import IllConditioned

        raise IllConditioned("odd subsystem block is ill conditioned", mu=mu, cond=cond)
    x = np.linalg.solve(R, S[rest, pos])
    a = -(S[pos, pos] + S[pos, rest] @ x)
    return float(a), x, rest


def symmetry_bic(md, m, tol=1e-13, parity_tol=1e-8, band=None):
    """Solve ``lam_m - mu + a(mu) = 0`` on the odd subsystem of a symmetric
    cavity."""
    odd, even = odd_modes(md.table, parity_tol)
    if m not in set(odd.tolist()):
        raise ParityViolation(
            "selected mode is not odd about the opening center",
            branch=m, even_fraction=float(even[m]),
        )
    cutoff = (math.pi / md.h) ** 2
    lam = float(md.lambdas[m])
    if band is None:
        # any interval below cutoff bracketing lam and avoiding neighbours
        others = np.delete(md.lambdas[odd], np.where(odd == m)[0])
        below = others[others < lam]
        above = others[others > lam]
        lo = 0.5 * (lam + below.max()) if len(below) else max(lam - 1.0, 1e-9)
        hi = 0.5 * (lam + above.min()) if len(above) else lam + 1.0
        band = (max(lo, 1e-9), min(hi, cutoff * (1 - 1e-9)))

    root = fixed_point(lam, lambda mu: odd_reduction(mu, md, m, odd)[0], band, tol)
    a, x, rest = odd_reduction(root.mu, md, m, odd)
    d = np.zeros(md.M_cav)
    d[m] = 1.0
    d[odd[rest]] = x
    d /= np.linalg.norm(d)
    T = full_matrix(root.mu, md.table, md.lambdas, md.h, md.scaling)
    smin = sigma_min(T)
    tnorm = float(np.linalg.norm(T, 2))
    diag = {
        "sigma_min": smin,
        "sigma_min_rel": smin / tnorm,
        "residual_Td": float(np.linalg.norm(T @ d)),
        "b0_abs": float(abs(md.table.O[0] @ d)),
        "certified": bool(smin / tnorm < 1e-8),
    }
    return SymmetricBIC(root.mu, m, root.iterations, root.method, d, diag)
