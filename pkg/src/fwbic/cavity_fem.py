"""P1 finite elements for the Neumann problem ``-div(n^-2 grad psi) = lam psi``
on a rectangle with circular inclusions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linear_sum_assignment

from .errors import AmbiguousAssignment, NoConvergence, SnapFailure

_SNAP = 1e-10


# ---------------------------------------------------------------------------
# mesh


@dataclass
class Mesh:
    """Conforming triangulation of the cavity rectangle.

    ``fractions`` maps region id -> per-triangle area fraction covered by
    that region; the remainder of each triangle is host medium. ``material``
    is the dominant region per triangle (by centroid).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    material: np.ndarray
    fractions: dict
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    wall_nodes: np.ndarray
    h: float

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def wall_y(self):
        return self.nodes[self.wall_nodes, 1]

    def gamma_nodes(self, h=None):
        """Wall nodes on the opening ``|x2| <= h/2``, ascending in x2."""
        h = self.h if h is None else h
        y = self.wall_y
        sel = np.abs(y) <= h / 2 + _SNAP
        nodes = self.wall_nodes[sel]
        ys = y[sel]
        if len(ys) < 2 or abs(ys[0] + h / 2) > _SNAP or abs(ys[-1] - h / 2) > _SNAP:
            raise SnapFailure(
                "opening endpoints are not mesh nodes on the wall", h=h
            )
        return nodes

    @property
    def gamma_edges(self):
        g = self.gamma_nodes()
        return np.column_stack([g[:-1], g[1:]])

    def scaled(self, factor):
        """Copy stretched along x1 about the junction wall."""
        nodes = self.nodes.copy()
        nodes[:, 0] *= factor
        return replace(self, nodes=nodes)


def _axis(lo, hi, step, breaks=(), even=False):
    pts = sorted({lo, hi, *[b for b in breaks if lo + _SNAP < b < hi - _SNAP]})
    out = [lo]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, math.ceil((b - a) / step - 1e-9))
        if even and len(pts) == 2 and n % 2:
            n += 1
        out.extend(np.linspace(a, b, n + 1)[1:])
    return np.array(out)


def _disk_fraction(pts, center, radius):
    return ((pts[..., 0] - center[0]) ** 2 + (pts[..., 1] - center[1]) ** 2 < radius**2).mean(-1)


def _subsample(k):
    """Barycentric centroids of the k*k congruent sub-triangles."""
    up = [((i + 1 / 3) / k, (j + 1 / 3) / k) for i in range(k) for j in range(k - i)]
    down = [((i + 2 / 3) / k, (j + 2 / 3) / k) for i in range(k) for j in range(k - i - 1)]
    return np.array(up + down)


def material_fractions(nodes, triangles, inclusions, rule="fraction", samples=8):
    """Per-region coverage of each triangle.

    ``rule="fraction"`` estimates the covered area fraction from ``samples**2``
    equal sub-triangles; ``rule="centroid"`` uses a 0/1 centroid test.
    """
    p = nodes[triangles]
    if rule == "centroid":
        pts = p.mean(1)[:, None, :]
    elif rule == "fraction":
        bary = _subsample(samples)
        pts = (
            p[:, None, 0]
            + bary[None, :, 0, None] * (p[:, None, 1] - p[:, None, 0])
            + bary[None, :, 1, None] * (p[:, None, 2] - p[:, None, 0])
        )
    else:
        raise ValueError(f"unknown material rule {rule!r}")
    fractions = {}
    centroid = p.mean(1)
    material = np.zeros(len(triangles), dtype=int)
    for inc in inclusions:
        fr = _disk_fraction(pts, inc.center, inc.radius)
        fractions[inc.region_id] = fractions.get(inc.region_id, 0.0) + fr
        inside = (centroid[:, 0] - inc.center[0]) ** 2 + (
            centroid[:, 1] - inc.center[1]
        ) ** 2 < inc.radius**2
        material[inside] = inc.region_id
    return material, fractions


def structured_grid(xs, ys):
    """Nodes and union-jack triangles of the tensor grid ``xs x ys``."""
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * ny + j
    b = (i + 1) * ny + j
    c = (i + 1) * ny + j + 1
    d = i * ny + j + 1
    # Union-jack diagonals: mirror symmetric about both center lines.
    flip = (i >= (nx - 1) / 2) ^ (j >= (ny - 1) / 2)
    t1 = np.where(flip[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(flip[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    tris = np.empty((2 * len(a), 3), dtype=int)
    tris[0::2] = t1
    tris[1::2] = t2
    return nodes, tris


def _boundary(nodes, triangles, box):
    edges = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    (xl, yl), (xh, yh) = box
    mid = nodes[bnd].mean(1)
    tags = np.full(len(bnd), "", dtype=object)
    tags[np.abs(mid[:, 0] - xh) < _SNAP] = "right"
    tags[np.abs(mid[:, 0] - xl) < _SNAP] = "left"
    tags[np.abs(mid[:, 1] - yl) < _SNAP] = "bottom"
    tags[np.abs(mid[:, 1] - yh) < _SNAP] = "top"
    return bnd, tags


def _finish(nodes, triangles, spec, material, fractions):
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    neg = area < 0
    triangles = triangles.copy()
    triangles[neg] = triangles[neg][:, [0, 2, 1]]
    box = ((spec.x_min, spec.y_min), (spec.x_max, spec.y_max))
    bnd, tags = _boundary(nodes, triangles, box)
    h = spec.waveguide_width
    tags = tags.copy()
    mid = nodes[bnd].mean(1)
    tags[(tags == "right") & (np.abs(mid[:, 1]) < h / 2)] = "gamma"
    wall = np.where(np.abs(nodes[:, 0] - spec.x_max) < _SNAP)[0]
    wall = wall[np.argsort(nodes[wall, 1])]
    mesh = Mesh(
        nodes=nodes,
        triangles=triangles,
        material=material,
        fractions=fractions,
        boundary_edges=bnd,
        boundary_tags=tags,
        wall_nodes=wall,
        h=h,
    )
    mesh.gamma_nodes()
    return mesh


def build_mesh(spec, resolution=None, extra_breaks=(), rule="fraction"):
    """Structured union-jack triangulation with mesh lines through the opening
    endpoints ``x2 = +-h/2``, the origin and any ``extra_breaks``.

    The x1 direction uses an even number of cells so that the mesh is
    mirror symmetric about the cavity's vertical center line.
    """
    resolution = spec.resolution if resolution is None else resolution
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    step = 1.0 / resolution
    h = spec.waveguide_width
    breaks = [-h / 2, 0.0, h / 2, *extra_breaks]
    for b in breaks:
        if not spec.y_min < b < spec.y_max:
            raise SnapFailure("mesh break lies outside the wall", value=b)
    xs = _axis(spec.x_min, spec.x_max, step, even=True)
    ys = _axis(spec.y_min, spec.y_max, step, breaks)
    nodes, tris = structured_grid(xs, ys)
    material, fractions = material_fractions(nodes, tris, spec.inclusions, rule)
    return _finish(nodes, tris, spec, material, fractions)


def read_triangle(node_path, ele_path, spec, index_of_attribute=None):
    """Import a mesh in Triangle ``.node``/``.ele`` format.

    The first attribute column of the ``.ele`` file is the region id.
    """

    def rows(path):
        out = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line.split())
        return out

    nrows = rows(node_path)
    n, _dim, _nattr, _nbm = (int(v) for v in nrows[0][:4])
    body = nrows[1 : n + 1]
    base = int(body[0][0])
    nodes = np.array([[float(r[1]), float(r[2])] for r in body])
    erows = rows(ele_path)
    t, per, nattr = (int(v) for v in erows[0][:3])
    if per != 3:
        raise ValueError("only linear triangles are supported")
    body = erows[1 : t + 1]
    tris = np.array([[int(v) - base for v in r[1:4]] for r in body])
    if nattr:
        material = np.array([int(float(r[4])) for r in body])
    else:
        material = np.zeros(len(tris), dtype=int)
    fractions = {
        int(r): (material == r).astype(float) for r in np.unique(material) if r != 0
    }
    return _finish(nodes, tris, spec, material, fractions)


def write_triangle(mesh, stem):
    """Write ``stem.node`` and ``stem.ele`` (1-based, region attribute)."""
    stem = Path(stem)
    with open(stem.with_suffix(".node"), "w") as fh:
        fh.write(f"{mesh.n_nodes} 2 0 0\n")
        for i, (x, y) in enumerate(mesh.nodes, 1):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
    with open(stem.with_suffix(".ele"), "w") as fh:
        fh.write(f"{len(mesh.triangles)} 3 1\n")
        for i, (t, m) in enumerate(zip(mesh.triangles, mesh.material), 1):
            fh.write(f"{i} {t[0] + 1} {t[1] + 1} {t[2] + 1} {m}\n")
    return stem.with_suffix(".node"), stem.with_suffix(".ele")


# ---------------------------------------------------------------------------
# assembly


def local_matrices(p):
    """P1 stiffness (unit coefficient) and mass for triangles ``p`` of
    shape (T, 3, 2)."""
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    # gradient of the hat at vertex i is the rotated opposite edge / 2A
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], 1)
    g = np.stack([e[:, :, 1], -e[:, :, 0]], 2) / (2 * area[:, None, None])
    kl = np.einsum("tik,tjk->tij", g, g) * area[:, None, None]
    ml = (np.ones((3, 3)) + np.eye(3)) / 12 * area[:, None, None]
    return kl, ml


def triangle_weights(mesh, n_of_region):
    """Per-triangle coefficient ``1/n^2`` averaged by area fraction."""
    w = np.ones(len(mesh.triangles))
    covered = np.zeros(len(mesh.triangles))
    for rid, fr in mesh.fractions.items():
        n = n_of_region[rid]
        w += fr * (1.0 / n**2 - 1.0)
        covered += fr
    if np.any(covered > 1 + 1e-12):
        raise ValueError("inclusions overlap")
    return w


def assemble(mesh, n_of_region):
    """Global stiffness ``K`` (weighted by ``1/n^2``) and consistent mass ``M``."""
    kl, ml = local_matrices(mesh.nodes[mesh.triangles])
    kl *= triangle_weights(mesh, n_of_region)[:, None, None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, 3).ravel()
    n = mesh.n_nodes
    K = sp.csr_matrix((kl.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((ml.ravel(), (rows, cols)), shape=(n, n))
    return K, M


# ---------------------------------------------------------------------------
# eigenpairs


@dataclass
class EigenBasis:
    """Cavity eigenpairs at one parameter value.

    Columns are in branch order: column ``m`` holds branch ``m``. Before
    tracking this is the sorted order. ``wall_values[:, m]`` is the trace of
    mode ``m`` at the ascending wall coordinates ``wall_y``; FEM traces are
    exact piecewise-linear interpolants of these nodal values.
    """

    delta: float
    lambdas: np.ndarray
    vectors: np.ndarray | None
    wall_y: np.ndarray
    wall_values: np.ndarray
    origin_values: np.ndarray
    labels: np.ndarray
    modes: tuple | None = None
    provenance: str = "FEM"
    sorted_position: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.lambdas)

    def permuted(self, order):
        """Copy with columns reordered by ``order``."""
        order = np.asarray(order)
        return replace(
            self,
            lambdas=self.lambdas[order],
            vectors=None if self.vectors is None else self.vectors[:, order],
            wall_values=self.wall_values[:, order],
            origin_values=self.origin_values[order],
            modes=None if self.modes is None else tuple(self.modes[i] for i in order),
            sorted_position=(
                np.argsort(np.argsort(self.lambdas))[order]
                if self.sorted_position is None
                else self.sorted_position[order]
            ),
        )

    def flipped(self, signs):
        signs = np.asarray(signs, dtype=float)
        return replace(
            self,
            vectors=None if self.vectors is None else self.vectors * signs,
            wall_values=self.wall_values * signs,
            origin_values=self.origin_values * signs,
        )

    def gamma_traces(self, h):
        """Per-mode, per-edge ``(value_left, value_right)`` on the opening and
        the edge endpoints ``y``."""
        sel = np.abs(self.wall_y) <= h / 2 + _SNAP
        y = self.wall_y[sel]
        v = self.wall_values[sel]
        return y, np.stack([v[:-1], v[1:]], axis=-1)


def _fix_signs(x):
    idx = np.argmax(np.abs(x) > 0.5 * np.abs(x).max(axis=0), axis=0)
    s = np.sign(x[idx, np.arange(x.shape[1])])
    s[s == 0] = 1.0
    return x * s


def solve_eigen(K, M, count, shift=None, tol=1e-8, dense_limit=3000, v0=None):
    """Lowest ``count`` eigenpairs of ``K x = lam M x``.

    Small problems use a dense symmetric solve. Larger ones use ARPACK in
    shift-invert mode with a shift below zero, so that ``K - shift M`` is
    positive definite and the eigenvalues nearest the shift are the lowest
    ones. The Ritz vectors are then refined by a Rayleigh-Ritz projection and
    checked for residual and M-orthonormality.

    Returns ``(lambdas, vectors)``.
    """
    n = K.shape[0]
    if count > n:
        raise ValueError("count exceeds the problem dimension")
    if n <= dense_limit:
        lam, x = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, count - 1])
    else:
        if shift is None:
            # any negative shift keeps K - shift M definite; one of the size
            # of the low spectrum keeps the wanted pairs well separated
            shift = -0.1
        if v0 is None:
            v0 = np.ones(n) + 0.01 * np.cos(np.arange(n))
        lam = None
        for attempt in range(3):
            try:
                lam, x = spla.eigsh(
                    K, k=count, M=M, sigma=shift, which="LM", v0=v0, tol=0,
                    maxiter=50 * n,
                )
                break
            except spla.ArpackNoConvergence as exc:
                err = exc
                shift *= 1.37
        if lam is None:
            raise NoConvergence(
                "shift-invert Lanczos did not converge",
                converged=len(err.eigenvalues),
                requested=count,
            )
        # Rayleigh-Ritz on the returned subspace
        kr = x.T @ (K @ x)
        mr = x.T @ (M @ x)
        lam, y = sla.eigh((kr + kr.T) / 2, (mr + mr.T) / 2)
        x = x @ y
    order = np.argsort(lam)
    lam, x = lam[order], x[:, order]
    x = _fix_signs(x)
    mx = M @ x
    res = np.linalg.norm(K @ x - mx * lam, axis=0)
    bound = tol * np.maximum(np.linalg.norm(mx, axis=0), 1.0) * max(1.0, np.abs(lam).max())
    gram = x.T @ mx
    gram_err = np.abs(gram - np.eye(count)).max()
    if np.any(res > bound) or gram_err > 1e-10:
        raise NoConvergence(
            "eigenpairs fail the residual or orthonormality check",
            max_residual=float(res.max()),
            gram_error=float(gram_err),
        )
    return lam, x


def boundary_trace(basis, mesh):
    """Fill the wall trace and the value at the opening center from the
    nodal vectors."""
    y = mesh.wall_y
    vals = basis.vectors[mesh.wall_nodes]
    origin = np.array([np.interp(0.0, y, vals[:, m]) for m in range(vals.shape[1])])
    return replace(basis, wall_y=y, wall_values=vals, origin_values=origin)


def cavity_basis(mesh, n_of_region, count, delta=0.0, tol=1e-8, return_mass=False):
    """Assemble, solve and extract traces in one call."""
    K, M = assemble(mesh, n_of_region)
    # a tenth of the lowest nonzero Neumann eigenvalue of the bounding box
    diam = np.ptp(mesh.nodes, axis=0).max()
    lam, x = solve_eigen(K, M, count, shift=-0.1 * (np.pi / diam) ** 2, tol=tol)
    basis = EigenBasis(
        delta=float(delta),
        lambdas=lam,
        vectors=x,
        wall_y=np.empty(0),
        wall_values=np.empty((0, count)),
        origin_values=np.empty(count),
        labels=np.arange(count),
    )
    basis = boundary_trace(basis, mesh)
    basis.extras["mass"] = M
    if return_mass:
        return basis, K, M
    return basis


# ---------------------------------------------------------------------------
# branch tracking


def _overlap(a, b, mass):
    if a.vectors is not None and b.vectors is not None:
        return a.vectors.T @ (mass @ b.vectors)
    if a.modes is not None and b.modes is not None:
        key = [(m.p, m.q) for m in b.modes]
        s = np.zeros((a.count, b.count))
        for i, m in enumerate(a.modes):
            if (m.p, m.q) in key:
                s[i, key.index((m.p, m.q))] = 1.0
        return s
    raise ValueError("bases carry neither vectors nor analytic modes")


def match_branches(prev, new, count=None, window=2, margin=0.1, mass=None):
    """Relabel ``new`` so its first ``count`` columns continue the branches of
    ``prev``; remaining columns stay in sorted order. Signs are fixed so that
    consecutive overlaps are positive."""
    count = prev.count if count is None else min(count, prev.count)
    mass = mass if mass is not None else new.extras.get("mass", prev.extras.get("mass"))
    cand = min(new.count, count + window)
    s = _overlap(prev, new, mass)[:count, :cand]
    a = np.abs(s)
    rows, cols = linear_sum_assignment(-a)
    chosen = a[rows, cols]
    alt = a.copy()
    alt[rows, cols] = -np.inf
    second = np.maximum(alt.max(axis=1), alt.max(axis=0)[cols])
    gaps = chosen - np.maximum(second, 0.0)
    if gaps.min() < margin:
        i = int(np.argmin(gaps))
        raise AmbiguousAssignment(
            "branch assignment margin below threshold",
            delta=(prev.delta, new.delta),
            branch=int(rows[i]),
            margin=float(gaps[i]),
        )
    order = list(cols)
    order += [c for c in range(new.count) if c not in set(cols)]
    out = new.permuted(order)
    signs = np.ones(new.count)
    signs[:count] = np.sign(s[rows, cols])
    signs[signs == 0] = 1.0
    out = out.flipped(signs)
    return replace(out, labels=np.arange(new.count))


def track_branches(bases, count=None, margin=0.1):
    """Continue branch labels along a parameter sweep.

    Returns relabeled bases; ``sorted_position[m]`` gives the position of
    branch ``m`` in ascending order at each step.
    """
    if not bases:
        return []
    first = bases[0].permuted(np.arange(bases[0].count))
    out = [first]
    for b in bases[1:]:
        out.append(match_branches(out[-1], b, count=count, margin=margin))
    return out


def write_eigen_csv(path, bases, branches=None):
    """CSV ``delta, branch, lambda, psi_at_o`` for tracked bases."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "branch", "lambda", "psi_at_o"])
        for b in bases:
            idx = range(b.count) if branches is None else branches
            for m in idx:
                w.writerow([repr(float(b.delta)), m, repr(float(b.lambdas[m])),
                            repr(float(b.origin_values[m]))])
