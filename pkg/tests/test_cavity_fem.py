import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from fwbic import problem as P
from fwbic.cavity_analytic import RectMode, rect_eigenpairs
from fwbic.cavity_fem import (
    EigenBasis,
    assemble,
    build_mesh,
    cavity_basis,
    local_matrices,
    match_branches,
    read_triangle,
    solve_eigen,
    structured_grid,
    track_branches,
    write_eigen_csv,
    write_triangle,
)
from fwbic.errors import AmbiguousAssignment, SnapFailure


@pytest.fixture(scope="module")
def rect():
    return P.validate_spec(P.rectangle_spec())


@pytest.fixture(scope="module")
def rect_basis(rect):
    mesh = build_mesh(rect, 20)
    return mesh, cavity_basis(mesh, {0: 1.0}, 8)


def test_unit_square_counts():
    g = np.linspace(0, 1, 3)
    nodes, tris = structured_grid(g, g)
    assert len(nodes) == 9 and len(tris) == 8


def test_reference_element():
    p = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    kl, ml = local_matrices(p)
    np.testing.assert_allclose(kl[0], 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]))
    assert ml[0].sum() == pytest.approx(0.5)


def test_mesh_invariants(rect):
    mesh = build_mesh(rect, 6)
    assert np.all(mesh.areas > 0)
    # conforming: every interior edge shared by exactly two triangles
    e = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert set(counts) <= {1, 2}
    y = mesh.nodes[mesh.gamma_nodes(), 1]
    h = rect.waveguide_width
    assert y[0] == pytest.approx(-h / 2, abs=1e-14) and y[-1] == pytest.approx(h / 2, abs=1e-14)
    assert np.all(np.diff(y) > 0)
    assert mesh.areas.sum() == pytest.approx(rect.area, rel=1e-12)
    assert set(mesh.boundary_tags) == {"left", "right", "top", "bottom", "gamma"}


def test_assembly_identities(rect):
    mesh = build_mesh(rect, 5)
    K, M = assemble(mesh, {0: 1.0})
    assert abs(K - K.T).max() < 1e-14 and abs(M - M.T).max() < 1e-14
    one = np.ones(mesh.n_nodes)
    assert np.abs(K @ one).max() < 1e-12 * abs(K).max()
    lumped = np.zeros(mesh.n_nodes)
    np.add.at(lumped, mesh.triangles.ravel(), np.repeat(mesh.areas / 3, 3))
    np.testing.assert_allclose(np.asarray(M.sum(1)).ravel(), lumped, rtol=1e-12)


def test_inclusion_area_fraction():
    spec = P.validate_spec(P.example_spec())
    target = 6 * math.pi * 0.48**2 / (2 * math.pi**2)
    mesh = build_mesh(spec, 20)
    frac = (mesh.fractions[1] * mesh.areas).sum() / mesh.areas.sum()
    assert frac == pytest.approx(target, abs=2e-3)
    cmesh = build_mesh(spec, 20, rule="centroid")
    cfrac = (cmesh.fractions[1] * cmesh.areas).sum() / cmesh.areas.sum()
    assert cfrac == pytest.approx(target, abs=1e-2)


def test_triangle_round_trip(tmp_path, rect):
    mesh = build_mesh(rect, 4)
    node, ele = write_triangle(mesh, tmp_path / "m")
    back = read_triangle(node, ele, rect)
    assert back.n_nodes == mesh.n_nodes and len(back.triangles) == len(mesh.triangles)
    np.testing.assert_allclose(back.nodes, mesh.nodes)


def test_import_without_opening_nodes(tmp_path, rect):
    g_x = np.linspace(rect.x_min, 0, 5)
    g_y = np.linspace(rect.y_min, rect.y_max, 5)
    nodes, tris = structured_grid(g_x, g_y)
    (tmp_path / "a.node").write_text(
        f"{len(nodes)} 2 0 0\n" + "".join(f"{i} {float(x)!r} {float(y)!r}\n" for i, (x, y) in enumerate(nodes))
    )
    (tmp_path / "a.ele").write_text(
        f"{len(tris)} 3 0\n" + "".join(f"{i} {a} {b} {c}\n" for i, (a, b, c) in enumerate(tris))
    )
    with pytest.raises(SnapFailure):
        read_triangle(tmp_path / "a.node", tmp_path / "a.ele", rect)


def test_homogeneous_eigenvalues(rect_basis):
    _, b = rect_basis
    ref = rect_eigenpairs(math.pi, 2 * math.pi, 8).lambdas
    rel = np.abs(b.lambdas[1:7] - ref[1:7]) / ref[1:7]
    assert rel.max() < 1e-3
    assert abs(b.lambdas[0]) < 1e-8
    x0 = b.vectors[:, 0]
    assert (x0.max() - x0.min()) / abs(x0).max() < 1e-6


def test_mesh_convergence_rate(rect):
    ref = rect_eigenpairs(math.pi, 2 * math.pi, 6).lambdas
    errs = []
    ress = (4, 8, 16)
    for r in ress:
        b = cavity_basis(build_mesh(rect, r), {0: 1.0}, 6)
        errs.append(np.abs(b.lambdas[1:] - ref[1:]).max())
    slope = -np.polyfit(np.log(ress), np.log(errs), 1)[0]
    assert 1.7 <= slope <= 2.3


def test_dense_and_sparse_agree(rect):
    mesh = build_mesh(rect, 8)
    K, M = assemble(mesh, {0: 1.0})
    ld, xd = solve_eigen(K, M, 6, dense_limit=10**9)
    ls, xs = solve_eigen(K, M, 6, dense_limit=0)
    np.testing.assert_allclose(ld, ls, rtol=1e-9, atol=1e-10)


def test_constant_mode_trace(rect_basis, rect):
    _, b = rect_basis
    y, tr = b.gamma_traces(rect.waveguide_width)
    np.testing.assert_allclose(tr[:, 0], 1 / math.sqrt(rect.area), rtol=1e-6)


def test_trace_matches_analytic_mode():
    spec = P.validate_spec(P.rectangle_spec(length=2.0))
    mesh = build_mesh(spec, 20)
    b = cavity_basis(mesh, {0: 1.0}, 4)
    ref = RectMode(0, 2, 2.0, 2 * math.pi, math.pi)
    k = int(np.argmin(np.abs(b.lambdas - ref.lam)))
    y, tr = b.gamma_traces(spec.waveguide_width)
    exact = ref.wall_trace(y)
    got = b.wall_values[np.abs(b.wall_y) <= spec.waveguide_width / 2 + 1e-10, k]
    got = got * np.sign(got @ exact)
    assert np.abs(got - exact).max() < 1e-3 * np.abs(exact).max()


def test_odd_mode_vanishes_at_origin(rect_basis):
    _, b = rect_basis
    # lambda = 0.25 is the (0, 1) mode, odd about the opening center
    assert abs(b.origin_values[1]) < 1e-6


def test_example_one_crossing_pair_values():
    spec = P.validate_spec(P.example_spec())
    b = cavity_basis(build_mesh(spec, 20), spec.region_indices(0.0), 8)
    assert b.lambdas[5] == pytest.approx(1.695, abs=0.02)
    assert b.lambdas[6] == pytest.approx(1.695, abs=0.02)


@pytest.fixture(scope="module")
def example_sweep():
    spec = P.validate_spec(P.example_spec(delta_range=(-0.061, 0.059)))
    mesh = build_mesh(spec, 10)
    deltas = np.linspace(-0.061, 0.059, 13)
    bases = [cavity_basis(mesh, spec.region_indices(d), 9, delta=d) for d in deltas]
    return deltas, bases


def test_tracking_swaps_sorted_labels(example_sweep):
    deltas, bases = example_sweep
    tracked = track_branches(bases, count=8)
    lam5 = np.array([b.lambdas[5] for b in tracked])
    lam6 = np.array([b.lambdas[6] for b in tracked])
    gap = lam5 - lam6
    assert gap[0] * gap[-1] < 0
    assert tracked[0].sorted_position[5] == 5 and tracked[-1].sorted_position[5] == 6
    for a, b in zip(tracked[:-1], tracked[1:]):
        s = a.vectors[:, :8].T @ (a.extras["mass"] @ b.vectors[:, :8])
        assert np.all(np.diag(s) > 0)


def test_monotone_in_index(example_sweep):
    _, bases = example_sweep
    L = np.array([b.lambdas[:8] for b in bases])
    assert np.all(np.diff(L, axis=0) <= 1e-12)


def test_constant_spectrum_identity(rect):
    mesh = build_mesh(rect, 6)
    bases = [cavity_basis(mesh, {0: 1.0}, 6, delta=d) for d in (0.0, 0.1, 0.2)]
    for b in track_branches(bases):
        np.testing.assert_array_equal(b.sorted_position, np.arange(6))


def test_sign_flipped_inputs(rect):
    mesh = build_mesh(rect, 6)
    a = cavity_basis(mesh, {0: 1.0}, 6)
    b = a.flipped(-np.ones(6))
    out = match_branches(a, replace(b, delta=0.1))
    s = a.vectors.T @ (a.extras["mass"] @ out.vectors)
    assert np.all(np.diag(s) > 0)


def test_ambiguous_assignment(rect):
    mesh = build_mesh(rect, 6)
    a = cavity_basis(mesh, {0: 1.0}, 6)
    x = a.vectors.copy()
    c = s = 1 / math.sqrt(2)
    x[:, 2], x[:, 3] = c * a.vectors[:, 2] + s * a.vectors[:, 3], -s * a.vectors[:, 2] + c * a.vectors[:, 3]
    with pytest.raises(AmbiguousAssignment):
        match_branches(a, replace(a, vectors=x, delta=0.1))


def test_csv_export(tmp_path, rect_basis):
    _, b = rect_basis
    path = tmp_path / "e.csv"
    write_eigen_csv(path, [b])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["delta", "branch", "lambda", "psi_at_o"]
    assert len(rows) == 1 + b.count


def test_eigenbasis_permutation_round_trip(rect_basis):
    _, b = rect_basis
    order = np.array([0, 2, 1, 3, 4, 5, 7, 6])
    p = b.permuted(order)
    np.testing.assert_array_equal(p.lambdas, b.lambdas[order])
    assert isinstance(p, EigenBasis)
