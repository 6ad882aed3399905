"""Global assembly, factorization caching, the local/global solve, and
energy monotonicity on randomized systems."""

import numpy as np
import pytest

from volblend import mesh as vm
from volblend import solver as ps
from volblend.errors import SolverError

from test_mesh import random_rotations


def single_tet_constraints(rest, w_vol=1e3, w_str=1e2):
    dminv = ps.tet_rest_inverse(rest)
    cs = ps.ConstraintSet(4)
    cs.add_tet_volume(np.array([[0, 1, 2, 3]]), dminv[None], w_vol)
    cs.add_tet_strain(np.array([[0, 1, 2, 3]]), dminv[None], w_str)
    return cs


def independent_total_energy(cs, x):
    """Direct summation oracle over public projections (independent of
    the solver's internal accounting)."""
    total = 0.0
    for idx, w, dminv, project in [
        (cs.vol_idx, cs.vol_w, cs.vol_dminv, ps.project_volume),
        (cs.str_idx, cs.str_w, cs.str_dminv, ps.project_strain),
    ]:
        for i in range(len(idx)):
            p = x[idx[i]]
            ds = np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])
            f = ds @ dminv[i]
            total += w[i] * np.linalg.norm(f - project(f)) ** 2
    for i in range(len(cs.dg_idx)):
        p = x[cs.dg_idx[i]]
        ds = np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])
        f = ds @ cs.dg_dminv[i]
        total += cs.dg_w[i] * np.linalg.norm(
            f - ps.project_strain(f, target=cs.dg_targets[i])) ** 2
    for i in range(len(cs.tri_idx)):
        p = x[cs.tri_idx[i]]
        ds = np.stack([p[1] - p[0], p[2] - p[0]], axis=1)
        f = ds @ cs.tri_dminv[i]
        proj = ps._project_tri_strain_batch(f[None])[0]
        total += cs.tri_w[i] * np.linalg.norm(f - proj) ** 2
    for b in cs._curv_compiled():
        for i in range(len(b["idx"])):
            delta = b["l"][i] @ x[b["idx"][i]]
            proj = ps.project_curvature(delta, b["rest"][i])
            total += b["w"][i] * np.linalg.norm(delta - proj) ** 2
    for i in range(len(cs.rect_idx)):
        quad = x[cs.rect_idx[i]]
        proj = ps.project_rectangularity(quad)
        total += cs.rect_w[i] * ((quad - proj) ** 2).sum()
    for i in range(len(cs.tgt_idx)):
        total += cs.tgt_w[i] * np.linalg.norm(x[cs.tgt_idx[i]] - cs.tgt_pos[i]) ** 2
    for i in range(len(cs.db_idx)):
        p = ps.project_distance_band(x[cs.db_idx[i]], cs.db_anchor[i],
                                     cs.db_dist[i], cs.db_dir[i])
        total += cs.db_w[i] * np.linalg.norm(x[cs.db_idx[i]] - p) ** 2
    return total


def test_single_target_constraint_solves_exactly():
    cs = ps.ConstraintSet(1)
    cs.add_targets(np.array([0]), np.array([[3.0, -1.0, 2.0]]), 1.0)
    state = ps.assemble_and_factorize(cs, initial_positions=np.zeros((1, 3)))
    x = ps.solve(state, 1)
    assert np.allclose(x[0], [3.0, -1.0, 2.0], atol=1e-7)


def test_system_matrix_matches_hand_assembly_with_pin():
    # One triangle strain constraint on a 3-vertex mesh, vertex 2 pinned.
    rest = np.array([[0.0, 0, 0], [2.0, 0, 0], [0.0, 1.5, 0]])
    dm2inv = ps.triangle_rest_inverse(rest)
    w = 3.0
    cs = ps.ConstraintSet(3)
    cs.add_tri_strain(np.array([[0, 1, 2]]), dm2inv[None], w)
    state = ps.assemble_and_factorize(
        cs, pins=(np.array([2]), rest[2][None]), initial_positions=rest)

    # Hand assembly: per-coordinate operator G (3 verts x 2 gradient cols),
    # full matrix w * G G^T; keep free rows/cols {0, 1}.
    g = np.zeros((3, 2))
    g[1:] = dm2inv
    g[0] = -dm2inv.sum(axis=0)
    full = w * (g @ g.T)
    expected = full[np.ix_([0, 1], [0, 1])]
    assert np.allclose(state.system_matrix.toarray(), expected, atol=1e-12)


def test_refactorization_counter_contract():
    rest = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    cs = single_tet_constraints(rest)
    before = ps.FACTORIZATION_COUNT
    state = ps.assemble_and_factorize(cs, initial_positions=rest)
    assert ps.FACTORIZATION_COUNT == before + 1
    ps.solve(state, 5)
    ps.solve(state, 5)
    assert ps.FACTORIZATION_COUNT == before + 1  # solving never refactorizes


def test_target_update_without_refactorization():
    cs = ps.ConstraintSet(2)
    cs.add_targets(np.array([0, 1]), np.zeros((2, 3)), 1.0)
    state = ps.assemble_and_factorize(cs, initial_positions=np.ones((2, 3)))
    before = ps.FACTORIZATION_COUNT
    cs.set_target_positions(np.array([[1.0, 2, 3], [4, 5, 6]]))
    x = ps.solve(state, 1)
    assert np.allclose(x, [[1, 2, 3], [4, 5, 6]], atol=1e-7)
    assert ps.FACTORIZATION_COUNT == before


def test_floating_vertex_error_lists_vertices():
    cs = ps.ConstraintSet(3)
    cs.add_targets(np.array([0]), np.zeros((1, 3)), 1.0)
    with pytest.raises(SolverError, match=r"\[1, 2\]"):
        ps.assemble_and_factorize(cs, initial_positions=np.zeros((3, 3)))


def test_already_optimal_positions_unchanged():
    rest = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * 2.0
    cs = single_tet_constraints(rest)
    cs.add_targets(np.arange(4), rest, 10.0)
    state = ps.assemble_and_factorize(cs, initial_positions=rest)
    x = ps.solve(state, 5)
    assert np.abs(x - rest).max() < 1e-10


def test_stretched_tet_volume_recovers_with_paper_weights():
    # Volume near-hard at w_vol = 1e3: a x2-stretched tet returns to
    # within 1% of its rest volume after 20 iterations.
    rest = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * 3.0
    cs = single_tet_constraints(rest, w_vol=1e3, w_str=1e2)
    stretched = rest * 2.0
    state = ps.assemble_and_factorize(cs, initial_positions=stretched)
    x = ps.solve(state, 20)
    vol = np.linalg.det(np.column_stack(
        [x[1] - x[0], x[2] - x[0], x[3] - x[0]])) / 6
    rest_vol = np.linalg.det(np.column_stack(
        [rest[1] - rest[0], rest[2] - rest[0], rest[3] - rest[0]])) / 6
    assert abs(vol - rest_vol) / rest_vol < 0.01


def test_rigid_rotation_gives_zero_strain_energy():
    # deformation_gradient composed with closest_rotation: rigidly rotated
    # tet has zero strain energy.
    rng = np.random.default_rng(2)
    rest = rng.normal(size=(4, 3)) * 4
    while np.linalg.det(np.column_stack([rest[1] - rest[0], rest[2] - rest[0],
                                         rest[3] - rest[0]])) / 6 < 0.1:
        rest = rng.normal(size=(4, 3)) * 4
    q = random_rotations(rng, 1)[0]
    moved = rest @ q.T + np.array([5.0, -2.0, 1.0])
    f = vm.deformation_gradient(rest, moved)
    r = vm.closest_rotation(f)
    assert np.linalg.norm(f - r) ** 2 < 1e-10


def random_system(rng, n_verts):
    """A random mixed-constraint system for monotonicity testing."""
    x0 = rng.normal(size=(n_verts, 3)) * 5
    cs = ps.ConstraintSet(n_verts)
    n_tets = max(2, n_verts // 3)
    tets = []
    while len(tets) < n_tets:
        cand = rng.choice(n_verts, size=4, replace=False)
        e = np.column_stack([x0[cand[1]] - x0[cand[0]], x0[cand[2]] - x0[cand[0]],
                             x0[cand[3]] - x0[cand[0]]])
        if np.linalg.det(e) / 6 > 0.5:
            tets.append(cand)
    tets = np.array(tets)
    dminv = np.linalg.inv(vm.tet_edge_matrices(x0, tets))
    cs.add_tet_volume(tets, dminv, rng.uniform(0.5, 5.0))
    cs.add_tet_strain(tets, dminv, rng.uniform(0.5, 5.0))

    tris = tets[:, :3]
    dm2inv = np.array([ps.triangle_rest_inverse(x0[t]) for t in tris])
    cs.add_tri_strain(tris, dm2inv, rng.uniform(0.5, 5.0))

    quad_idx = rng.choice(n_verts, size=(max(1, n_verts // 8), 4), replace=False)
    cs.add_rectangularity(quad_idx, rng.uniform(0.5, 2.0))

    k = max(1, n_verts // 4)
    t_idx = rng.choice(n_verts, size=k, replace=False)
    cs.add_targets(t_idx, x0[t_idx] + rng.normal(size=(k, 3)), rng.uniform(1.0, 10.0))

    db_idx = rng.choice(n_verts, size=k, replace=False)
    anchors = x0[db_idx] + rng.normal(size=(k, 3)) * 2
    dirs = x0[db_idx] - anchors
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cs.add_distance_bands(db_idx, anchors, rng.uniform(0.5, 2.0, size=k), dirs, 2.0)

    uncovered = np.setdiff1d(np.arange(n_verts), cs.touched_vertices())
    if uncovered.size:
        cs.add_targets(uncovered, x0[uncovered], 0.5)
    return cs, x0


def test_energy_monotone_on_random_system_with_independent_oracle():
    rng = np.random.default_rng(77)
    cs, x0 = random_system(rng, 40)
    start = x0 + rng.normal(size=x0.shape) * 0.5
    state = ps.assemble_and_factorize(cs, initial_positions=start)
    energies = [independent_total_energy(cs, state.positions)]
    for _ in range(20):
        ps.solve(state, 1)
        energies.append(independent_total_energy(cs, state.positions))
    energies = np.array(energies)
    rel_increase = np.diff(energies) / np.maximum(energies[:-1], 1e-30)
    assert rel_increase.max() < 1e-8
    # internal log agrees with the oracle
    log = []
    state2 = ps.assemble_and_factorize(cs, initial_positions=start)
    ps.solve(state2, 3, energy_log=log)
    assert np.isclose(log[0]["total_energy"], energies[0], rtol=1e-10)


def test_solve_energy_log_has_per_kind_columns(tmp_path):
    rng = np.random.default_rng(5)
    cs, x0 = random_system(rng, 20)
    state = ps.assemble_and_factorize(cs, initial_positions=x0 * 1.1)
    log = []
    ps.solve(state, 4, energy_log=log)
    assert len(log) == 4
    for key in ("iter", "total_energy", "volume_energy", "target_energy"):
        assert key in log[0]
    path = tmp_path / "energy.csv"
    ps.write_energy_log_csv(path, log, header_comment="test")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].split(",")[0] == "iter"
    assert len(lines) == 2 + 4


def test_constraint_set_text_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    cs, x0 = random_system(rng, 15)
    op = vm.cotangent_laplacian(vm.icosphere(0))
    # include one curvature constraint in the round trip
    row = op.weights.getrow(0)
    cs2 = ps.ConstraintSet(15)
    path = tmp_path / "constraints.txt"
    ps.write_constraint_set(cs, path)
    back = ps.read_constraint_set(path)
    assert back.n_vertices == cs.n_vertices
    assert back.counts() == cs.counts()
    assert np.allclose(back.vol_dminv, cs.vol_dminv)
    assert np.allclose(back.tgt_pos, cs.tgt_pos)
    assert np.allclose(back.db_dist, cs.db_dist)
    # identical energies at identical positions
    e1 = ps.constraint_energies(cs, x0)
    e2 = ps.constraint_energies(back, x0)
    assert np.isclose(e1["total"], e2["total"], rtol=1e-12)


def test_reduction_with_slaved_vertices():
    # Vertex 2 is slaved to the midpoint of vertices 0 and 1; a target on
    # the slaved vertex must drive the masters.
    from scipy import sparse
    r = sparse.csr_matrix(np.array([[1.0, 0, 0, 0, 0, 0],
                                    [0, 1.0, 0, 0, 0, 0],
                                    [0.5, 0.5, 0, 0, 0, 0]])[:, :2])
    red = ps.Reduction(r, None, np.array([0, 1]))
    cs = ps.ConstraintSet(3)
    cs.add_targets(np.array([0, 1]), np.array([[0.0, 0, 0], [2.0, 0, 0]]), 1.0)
    cs.add_targets(np.array([2]), np.array([[1.0, 4.0, 0]]), 10.0)
    state = ps.assemble_and_factorize(
        cs, reduction=red, initial_positions=np.zeros((3, 3)), tikhonov=0.0)
    x = ps.solve(state, 30)
    assert np.allclose(x[2], 0.5 * (x[0] + x[1]), atol=1e-12)
    # strong slaved target pulls the midpoint up
    assert x[2][1] > 3.0


def test_nan_positions_raise_with_iteration_index():
    cs = ps.ConstraintSet(1)
    cs.add_targets(np.array([0]), np.array([[np.nan, 0, 0]]), 1.0)
    state = ps.assemble_and_factorize(cs, initial_positions=np.zeros((1, 3)))
    with pytest.raises(SolverError, match="iteration"):
        ps.solve(state, 1)


def test_single_constraint_objects_and_validation():
    c = ps.Constraint(kind="target", element=(2,), weight=1.5,
                      rest_data={"position": np.array([1.0, 2, 3])})
    cs = ps.ConstraintSet.from_constraints([c], n_vertices=3)
    assert cs.counts()["target"] == 1
    with pytest.raises(Exception, match="unknown constraint kind"):
        ps.Constraint(kind="bogus", element=(0,), weight=1.0)
    with pytest.raises(Exception, match="weight"):
        ps.Constraint(kind="target", element=(0,), weight=-1.0)
    with pytest.raises(Exception, match="indices"):
        ps.Constraint(kind="volume", element=(0, 1, 2), weight=1.0)


def test_solver_weights_validation():
    w = ps.SolverWeights()
    w.validate()
    w.w_vol = -1.0
    with pytest.raises(Exception, match="w_vol"):
        w.validate()
