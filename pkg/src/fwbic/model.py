"""Cavity models: modal data (eigenvalues in branch order, overlap table,
boundary scaling factor) as a function of the sweep parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cavity_analytic, cavity_fem
from .modematch import OverlapTable, WaveguideBasis, overlaps
from .problem import BoundaryScaling


@dataclass
class ModalData:
    delta: float
    lambdas: np.ndarray
    table: OverlapTable
    scaling: float
    basis: cavity_fem.EigenBasis
    h: float
    extras: dict = field(default_factory=dict)

    @property
    def M_cav(self):
        return len(self.lambdas)

    def with_h(self, h, J_wg):
        """Same cavity data seen through an opening of width ``h``."""
        wg = WaveguideBasis(h, J_wg)
        tab = overlaps(self.basis, wg)
        if self.scaling != 1.0:
            tab = tab.scaled(np.sqrt(1.0 / self.scaling))
        return ModalData(self.delta, self.lambdas, tab, self.scaling, self.basis, h)


class CavityModel:
    """Computes and tracks :class:`ModalData`.

    Parameters
    ----------
    spec : ProblemSpec
        Validated problem.
    engine : {"fem", "analytic"}
        ``"analytic"`` requires a homogeneous cavity.
    resolution : int, optional
        FEM mesh resolution; defaults to ``spec.resolution``.
    track : int, optional
        Number of low branches continued by overlap matching; defaults to
        ``M + 1``.
    """

    def __init__(self, spec, engine="fem", resolution=None, rule="fraction",
                 extra_breaks=(), M_cav=None, J_wg=None, track=None):
        self.spec = spec
        self.engine = engine
        t = spec.truncation
        self.M = t.M
        self.M_cav = t.M_cav if M_cav is None else M_cav
        self.J_wg = t.J_wg if J_wg is None else J_wg
        self.h = spec.waveguide_width
        self.wg = WaveguideBasis(self.h, self.J_wg)
        self.track = self.M + 1 if track is None else track
        self.tol = spec.tolerances.eig_tol
        self.n_solves = 0
        if engine == "fem":
            self.mesh = cavity_fem.build_mesh(spec, resolution, extra_breaks, rule)
        elif engine == "analytic":
            if not spec.is_homogeneous:
                raise ValueError("analytic engine needs a homogeneous cavity")
            self.mesh = None
        else:
            raise ValueError(f"unknown engine {engine!r}")

    # -- raw solves -------------------------------------------------------
    def scaling(self, delta):
        p = self.spec.perturbation
        if isinstance(p, BoundaryScaling):
            return 1.0 / p.factor(delta)
        return 1.0

    def basis(self, delta):
        """Sorted eigenbasis at ``delta`` (untracked)."""
        spec = self.spec
        p = spec.perturbation
        self.n_solves += 1
        if self.engine == "analytic":
            L = spec.length
            if isinstance(p, BoundaryScaling):
                L *= p.factor(delta)
            return cavity_analytic.rect_eigenpairs(
                L, spec.height, self.M_cav, y0=spec.y0, delta=delta, h=self.h
            )
        mesh = self.mesh
        if isinstance(p, BoundaryScaling):
            mesh = mesh.scaled(p.factor(delta))
        return cavity_fem.cavity_basis(
            mesh, spec.region_indices(delta), self.M_cav, delta=delta, tol=self.tol
        )

    def modal_from_basis(self, basis):
        tab = overlaps(basis, self.wg)
        s = self.scaling(basis.delta)
        if s != 1.0:
            # Reference-domain modes are normalized without the Jacobian
            # weight, so their traces carry a factor sqrt(1 + delta C_R).
            tab = tab.scaled(np.sqrt(1.0 / s))
        return ModalData(basis.delta, basis.lambdas, tab, s, basis, self.h)

    def modal(self, delta, ref=None):
        """Modal data at ``delta``; branch labels continue those of ``ref``."""
        b = self.basis(delta)
        if ref is not None:
            b = cavity_fem.match_branches(ref.basis, b, count=self.track)
        return self.modal_from_basis(b)

    def sweep(self, deltas, executor=None):
        """Tracked modal data along ``deltas`` (solves may run in parallel)."""
        mapper = map if executor is None else executor.map
        bases = list(mapper(self.basis, deltas))
        tracked = cavity_fem.track_branches(bases, count=self.track)
        return [self.modal_from_basis(b) for b in tracked]
