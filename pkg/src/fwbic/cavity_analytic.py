"""Closed-form Neumann eigenpairs of a homogeneous rectangle.

The rectangle is ``(-L, 0) x (-y0, W - y0)``; the waveguide opening is
centered at the origin on the right wall.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RectMode:
    """Neumann mode ``c cos(p pi (x1+L)/L) cos(q pi (x2+y0)/W)``."""

    p: int
    q: int
    L: float
    W: float
    y0: float

    @property
    def lam(self):
        return (self.p * math.pi / self.L) ** 2 + (self.q * math.pi / self.W) ** 2

    @property
    def norm_const(self):
        return math.sqrt((2 - (self.p == 0)) * (2 - (self.q == 0)) / (self.L * self.W))

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return (
            self.norm_const
            * np.cos(self.p * math.pi * (x1 + self.L) / self.L)
            * np.cos(self.q * math.pi * (x2 + self.y0) / self.W)
        )

    def wall_trace(self, x2):
        """Values on the junction wall ``x1 = 0``."""
        return self(0.0, x2)

    def grad(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        a = self.p * math.pi / self.L
        b = self.q * math.pi / self.W
        s1 = a * (x1 + self.L)
        s2 = b * (x2 + self.y0)
        c = self.norm_const
        return (-c * a * np.sin(s1) * np.cos(s2), -c * b * np.cos(s1) * np.sin(s2))


def rect_modes(L, W, count, y0=None):
    """First ``count`` modes ordered by eigenvalue, ties by (p, q)."""
    if not (L > 0 and W > 0):
        raise ValueError("side lengths must be positive")
    if count < 1:
        raise ValueError("count must be at least 1")
    if y0 is None:
        y0 = W / 2

    # Best-first enumeration over the (p, q) lattice. The eigenvalue is
    # increasing in both p and q, so expanding (p+1, q) and (p, q+1) from each
    # popped node visits modes in order.
    def key(p, q):
        return ((p / L) ** 2 + (q / W) ** 2, p, q)

    heap = [key(0, 0)]
    seen = {(0, 0)}
    out = []
    while len(out) < count:
        _, p, q = heapq.heappop(heap)
        out.append(RectMode(p, q, float(L), float(W), float(y0)))
        for pq in ((p + 1, q), (p, q + 1)):
            if pq not in seen:
                seen.add(pq)
                heapq.heappush(heap, key(*pq))
    # Exact ties in the float key are resolved by the (p, q) fields of the
    # tuple; near-ties from rounding are re-sorted with a tolerance.
    out.sort(key=lambda m: (round(m.lam, 10), m.p, m.q))
    return out


def _sinc_integral(a, b, h):
    """``int_{-h/2}^{h/2} cos(a t + b) dt`` without cancellation."""
    return h * math.cos(b) * np.sinc(a * h / (2 * math.pi))


def overlap_rect(mode, j, h):
    """``(phi_j, psi)`` over the opening ``|x2| < h/2`` on ``x1 = 0``.

    Products of cosines are expanded into sums, each integrated in closed
    form.
    """
    if j < 0:
        raise ValueError("j must be non-negative")
    if not (-mode.y0 <= -h / 2 and h / 2 <= mode.W - mode.y0):
        raise ValueError("opening does not fit on the wall")
    amp = mode.norm_const * math.cos(mode.p * math.pi)
    a = mode.q * math.pi / mode.W
    b = a * mode.y0
    if j == 0:
        return amp * math.sqrt(1 / h) * _sinc_integral(a, b, h)
    # phi_j = sqrt(2/h) cos(k t + k h/2)
    k = j * math.pi / h
    c = k * h / 2
    val = 0.5 * (_sinc_integral(a + k, b + c, h) + _sinc_integral(a - k, b - c, h))
    return amp * math.sqrt(2 / h) * val


def rect_eigenpairs(L, W, count, y0=None, delta=0.0, h=None):
    """Analytic :class:`~fwbic.cavity_fem.EigenBasis` of the first ``count``
    modes. When ``h`` is given the wall traces are sampled on a fine grid of
    the opening for plotting and interpolation; overlaps never use them."""
    from .cavity_fem import EigenBasis

    modes = rect_modes(L, W, count, y0)
    y0 = modes[0].y0
    lams = np.array([m.lam for m in modes])
    ys = np.linspace(-y0, W - y0, 513)
    if h is not None:
        ys = np.union1d(ys, [-h / 2, 0.0, h / 2])
    values = np.column_stack([m.wall_trace(ys) for m in modes])
    return EigenBasis(
        delta=float(delta),
        lambdas=lams,
        vectors=None,
        wall_y=ys,
        wall_values=values,
        origin_values=np.array([float(m(0.0, 0.0)) for m in modes]),
        labels=np.arange(count),
        modes=tuple(modes),
        provenance="analytic",
    )
