"""Invariant checks across modules and truncation/mesh doubling studies."""

from __future__ import annotations

import math

import numpy as np

from . import problem
from .cavity_analytic import rect_eigenpairs
from .modematch import (
    alpha,
    build_reduction,
    full_matrix,
    schur_reference,
)


def _check(name, ok, detail):
    return {"name": name, "pass": bool(ok), "detail": detail}


def pair_midpoint(md, M):
    return float(0.5 * (md.lambdas[M - 2] + md.lambdas[M - 1]))


def operator_checks(md, M, mu, rng, n_vectors=100):
    """Checks on the reduction blocks at one real ``(delta, mu)``."""
    out = []
    r = build_reduction(mu, md.table, md.lambdas, M, md.h, md.scaling, md.delta, check=False)
    IB = np.eye(len(r.B)) - r.B
    smin = np.linalg.svd(IB, compute_uv=False).min() if len(IB) else 1.0
    out.append(_check("sigma_min(I-B) >= 1", smin >= 1 - 1e-10, f"{smin:.3e}"))
    worst = np.inf
    for _ in range(n_vectors):
        x = rng.standard_normal(len(IB))
        x /= np.linalg.norm(x)
        worst = min(worst, x @ IB @ x - 1.0)
    out.append(_check("x^T (I-B) x >= |x|^2", worst >= -1e-10, f"min excess {worst:.3e}"))
    out.append(_check("B symmetric", np.allclose(r.B, r.B.T, atol=1e-13), ""))
    out.append(_check("C10 = C01^T", np.allclose(r.C10, r.C01.T, atol=1e-13), ""))
    ref = schur_reference(mu, md.table, md.lambdas, M, md.h, md.scaling)
    s1 = np.linalg.svd(r.small_system(), compute_uv=False)[-1]
    s2 = np.linalg.svd(ref, compute_uv=False)[-1]
    rel = abs(s1 - s2) / max(abs(s2), 1e-300)
    out.append(_check("3x2 system equals full Schur complement", rel < 1e-10, f"rel {rel:.2e}"))
    T = full_matrix(mu, md.table, md.lambdas, md.h, md.scaling)
    im = T.imag
    sv = np.linalg.svd(im, compute_uv=False)
    rank1 = sv[1] <= 1e-12 * max(sv[0], 1e-300) if len(sv) > 1 else True
    expect = -md.scaling * np.sqrt(mu) * np.outer(md.table.O[0], md.table.O[0])
    out.append(_check("Im T = -s alpha_0 v0 v0^T (rank <= 1)",
                      rank1 and np.allclose(im, expect, atol=1e-13), f"sv2 {sv[1] if len(sv) > 1 else 0:.1e}"))
    R = T.real - np.diag(md.lambdas - mu)
    ev = np.linalg.eigvalsh((R + R.T) / 2)
    out.append(_check("Re T - diag(lam - mu) >= 0", ev.min() >= -1e-12 * max(1, ev.max()),
                      f"min eig {ev.min():.2e}"))
    return out


def run_suite(spec, model, seed=0):
    """Run the invariant suite on ``spec`` with the given model."""
    rng = np.random.default_rng(seed)
    checks = []
    M = model.M

    # problem
    v2 = problem.validate_spec(spec, check_clear_zone=False)
    checks.append(_check("validate_spec idempotent", v2 == spec, ""))
    checks.append(_check("JSON round trip", problem.parse(problem.emit(spec)) == spec, ""))

    # waveguide branch conventions
    h = spec.waveguide_width
    a0 = alpha(1.0, 0, h)
    a1 = alpha(1.0, 1, h)
    checks.append(_check("alpha_0(1) = 1", abs(a0 - 1) < 1e-15, f"{a0}"))
    k1 = (math.pi / h) ** 2
    checks.append(_check("i alpha_1 < 0 below cutoff",
                         abs(1j * a1 + math.sqrt(k1 - 1.0)) < 1e-12 * k1, f"{1j * a1}"))
    ac = alpha(1.7 - 0.01j, 0, h)
    checks.append(_check("alpha_0 outgoing continuation", ac.real > 0 and ac.imag < 0, f"{ac}"))

    md = model.modal(0.0)
    b = md.basis
    # cavity
    checks.append(_check("lambda_0 ~ 0", abs(b.lambdas[0]) < 1e-8, f"{b.lambdas[0]:.2e}"))
    checks.append(_check("ascending eigenvalues", np.all(np.diff(b.lambdas) >= -1e-12), ""))
    if b.vectors is not None:
        from .cavity_fem import assemble

        mesh = model.mesh
        K, Mm = assemble(mesh, spec.region_indices(0.0))
        one = np.ones(mesh.n_nodes)
        kn = np.abs(K @ one).max() / abs(K).sum(1).max()
        checks.append(_check("K 1 = 0", kn < 1e-12, f"{kn:.1e}"))
        rs = np.asarray(Mm.sum(1)).ravel()
        lumped = np.zeros(mesh.n_nodes)
        np.add.at(lumped, mesh.triangles.ravel(), np.repeat(mesh.areas / 3, 3))
        checks.append(_check("M row sums = area/3", np.allclose(rs, lumped, rtol=1e-12), ""))
        x = b.vectors
        gram = np.abs(x.T @ (Mm @ x) - np.eye(b.count)).max()
        checks.append(_check("M-orthonormal eigenvectors", gram < 1e-10, f"{gram:.1e}"))
        x0 = x[:, 0]
        var = (x0.max() - x0.min()) / abs(x0).max()
        checks.append(_check("constant kernel vector", var < 1e-6, f"{var:.1e}"))
        if spec.is_homogeneous:
            ref = rect_eigenpairs(spec.length, spec.height, b.count, y0=spec.y0).lambdas
            rel = np.abs(b.lambdas[1:7] - ref[1:7]) / ref[1:7]
            checks.append(_check("FEM vs analytic eigenvalues (rel 1e-3)", rel.max() < 1e-3,
                                 f"max rel {rel.max():.1e}"))
        if isinstance(spec.perturbation, problem.IndexSweep):
            lo, hi = spec.delta_range
            la = model.basis(lo).lambdas
            lb = model.basis(hi).lambdas
            mono = np.all(lb[: M + 1] <= la[: M + 1] + 1e-12)
            checks.append(_check("eigenvalues decrease as n increases", mono, ""))
    else:
        # Gram matrix of analytic modes by tensor Gauss quadrature
        xs, ws = np.polynomial.legendre.leggauss(64)
        L, W = spec.length, spec.height
        x1 = -L / 2 + L / 2 * xs
        x2 = -spec.y0 + W / 2 + W / 2 * xs
        X1, X2 = np.meshgrid(x1, x2, indexing="ij")
        wq = np.outer(ws, ws) * (L / 2) * (W / 2)
        F = np.stack([m(X1, X2) for m in b.modes[:12]])
        G = np.einsum("aij,bij,ij->ab", F, F, wq)
        err = np.abs(G - np.eye(len(F))).max()
        checks.append(_check("analytic Gram = I (quadrature)", err < 1e-10, f"{err:.1e}"))

    # overlaps
    tab = md.table
    exc = tab.bessel_excess()
    checks.append(_check("Bessel bound on overlaps", exc is None or exc <= 1e-12, f"{exc:.1e}"))
    c0 = tab.O[0, 0]
    expect = math.sqrt(h / spec.area) * math.sqrt(1 / md.scaling)
    checks.append(_check("constant mode j=0 overlap = sqrt(h/|Omega|)",
                         abs(abs(c0) - expect) < 1e-8 * expect, f"{c0:.6e} vs {expect:.6e}"))

    # reduction at points in the band
    from .bic_search import band_for

    band = band_for(model, md)
    mus = [pair_midpoint(md, M)] + list(rng.uniform(band[0], band[1], 4))
    for mu in mus:
        if np.any(md.lambdas[M:] <= mu):
            continue
        for c in operator_checks(md, M, float(mu), rng):
            c["name"] += f" @ mu={mu:.4f}"
            checks.append(c)

    # resonance: zero coupling returns the eigenvalue
    from .resonance import find_resonance
    from .modematch import OverlapTable

    zero = type(md)(md.delta, md.lambdas, OverlapTable(0 * tab.O, "stub"), md.scaling, md.basis, md.h)
    lam = md.lambdas[M - 2]
    gap = np.min(np.abs(np.delete(md.lambdas, M - 2) - lam))
    r = find_resonance(zero, lam + 0.25 * gap, M - 2)
    checks.append(_check("zero coupling resonance = eigenvalue",
                         abs(r.mu - md.lambdas[M - 2]) < 1e-12, f"{r.mu}"))
    return {"checks": checks}


def convergence_study(spec, engine=None, delta=0.0, mu=None, h_levels=4):
    """Doubling studies of ``f0, f1`` and the pair eigenvalues at fixed
    ``(delta, mu)``: mesh resolution, ``M_cav``, ``J_wg`` and ``h``."""
    from .model import CavityModel

    engine = engine or ("analytic" if spec.is_homogeneous else "fem")
    t = spec.truncation
    M = t.M
    rows = []
    h0 = spec.waveguide_width
    breaks = [s * h0 / 2**k / 2 for k in range(1, h_levels) for s in (-1, 1)]
    base = CavityModel(spec, engine=engine, M_cav=2 * t.M_cav, extra_breaks=breaks)
    md2 = base.modal(delta)
    if mu is None:
        mu = pair_midpoint(md2, M)

    def record(study, level, md, J=None):
        m = md if J is None else md.with_h(md.h, J)
        r = build_reduction(mu, m.table, m.lambdas, M, m.h, m.scaling, delta, check=False)
        rows.append({"study": study, "level": level, "name": "f0", "value": r.f0})
        rows.append({"study": study, "level": level, "name": "f1", "value": r.f1})
        return r

    def trunc(md, Mc):
        from .model import ModalData

        b = md.basis.permuted(np.arange(Mc))
        return ModalData(md.delta, md.lambdas[:Mc], md.table.truncated(M_cav=Mc),
                         md.scaling, b, md.h)

    md1 = trunc(md2, t.M_cav)
    record("M_cav", t.M_cav, md1)
    record("M_cav", 2 * t.M_cav, md2)
    record("J_wg", t.J_wg, md1)
    record("J_wg", 2 * t.J_wg, md1, J=2 * t.J_wg)
    for k in range(h_levels):
        h = h0 / 2**k
        m = md1.with_h(h, t.J_wg)
        r = build_reduction(mu, m.table, m.lambdas, M, h, m.scaling, delta, check=False)
        rows.append({"study": "h", "level": h, "name": "max_abs_f", "value": max(abs(r.f0), abs(r.f1))})
        gap = abs(r.a20 / math.sqrt(h) - m.basis.origin_values[M - 2])
        rows.append({"study": "h", "level": h, "name": "a20_gap", "value": gap})
    if engine == "fem":
        for res in (spec.resolution, 2 * spec.resolution):
            m = CavityModel(spec, engine="fem", resolution=res).modal(delta)
            rows.append({"study": "mesh", "level": res, "name": "lambda_pair0", "value": m.lambdas[M - 2]})
            rows.append({"study": "mesh", "level": res, "name": "lambda_pair1", "value": m.lambdas[M - 1]})
    return rows
