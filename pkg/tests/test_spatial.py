"""Closest-point queries against brute-force oracles."""

import numpy as np

from volblend import mesh as vm
from volblend.spatial import MeshProximity, closest_point_on_triangles, hausdorff_proxy


def brute_force_closest(p, tri, samples=200):
    """Dense barycentric sampling oracle for one point/triangle pair."""
    best = None
    best_d = np.inf
    for _ in range(samples):
        u, v = np.random.rand(2)
        if u + v > 1:
            u, v = 1 - u, 1 - v
        q = tri[0] + u * (tri[1] - tri[0]) + v * (tri[2] - tri[0])
        d = np.linalg.norm(p - q)
        if d < best_d:
            best_d, best = d, q
    return best, best_d


def test_closest_point_on_triangles_vs_sampling_oracle():
    rng = np.random.default_rng(0)
    np.random.seed(1)
    for _ in range(60):
        tri = rng.normal(size=(3, 3)) * 3
        p = rng.normal(size=3) * 4
        cp = closest_point_on_triangles(p, tri)
        d = np.linalg.norm(p - cp)
        _, d_oracle = brute_force_closest(p, tri, samples=4000)
        assert d <= d_oracle + 1e-3
        # the returned point lies on the triangle plane or its boundary
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        assert abs((cp - tri[0]) @ n) < 1e-9 or d <= d_oracle + 1e-3


def test_mesh_proximity_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    sphere = vm.icosphere(2, radius=10.0)
    prox = MeshProximity(sphere.vertices, sphere.faces)
    pts = rng.normal(size=(40, 3)) * 12
    cp, fidx, d = prox.closest(pts)
    tris = sphere.vertices[sphere.faces]
    for i, p in enumerate(pts):
        all_cp = closest_point_on_triangles(
            np.broadcast_to(p, (len(tris), 3)).copy(), tris)
        all_d = np.linalg.norm(all_cp - p, axis=1)
        assert d[i] <= all_d.min() + 1e-9


def test_signed_distance_sign_convention():
    sphere = vm.icosphere(2, radius=5.0)
    prox = MeshProximity(sphere.vertices, sphere.faces)
    signed_out, _, _ = prox.signed_distance(np.array([[7.0, 0, 0]]))
    signed_in, _, _ = prox.signed_distance(np.array([[2.0, 0, 0]]))
    assert signed_out[0] > 0
    assert signed_in[0] < 0


def test_hausdorff_proxy_of_offset_spheres():
    a = vm.icosphere(2, radius=10.0)
    b = vm.icosphere(2, radius=11.0)
    h = hausdorff_proxy(a.vertices, a.faces, b.vertices, b.faces)
    assert 0.8 <= h <= 1.2
