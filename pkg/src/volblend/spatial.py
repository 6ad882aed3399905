"""Point-to-surface proximity queries shared by the massage, fitting,
and collision passes."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def closest_point_on_triangles(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Closest points on triangles for paired queries.

    points: (..., 3); tris: (..., 3, 3). Shapes broadcast on the leading
    axes. Implements the standard region-based algorithm.
    """
    a, b, c = tris[..., 0, :], tris[..., 1, :], tris[..., 2, :]
    ab = b - a
    ac = c - a
    ap = points - a

    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = points - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = points - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    w_edge_ac = np.where(np.abs(d2 - d6) > 0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0)
    v_edge_ab = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    w_edge_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))

    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v_face = vb / denom
    w_face = vc / denom

    result = a + v_face[..., None] * ab + w_face[..., None] * ac  # interior default
    # edge BC region
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    result = np.where(on_bc[..., None], b + w_edge_bc[..., None] * (c - b), result)
    # edge AC region
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = np.where(on_ac[..., None], a + w_edge_ac[..., None] * ac, result)
    # edge AB region
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = np.where(on_ab[..., None], a + v_edge_ab[..., None] * ab, result)
    # vertex regions
    result = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, result)
    result = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, result)
    result = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, result)
    return result


class MeshProximity:
    """KD-tree accelerated closest-point queries against a triangle soup."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.asarray(vertices, float)
        self.faces = np.asarray(faces, int)
        self.tris = self.vertices[self.faces]  # (F, 3, 3)
        centroids = self.tris.mean(axis=1)
        self._tree = cKDTree(centroids)
        fn = np.cross(self.tris[:, 1] - self.tris[:, 0],
                      self.tris[:, 2] - self.tris[:, 0])
        norms = np.linalg.norm(fn, axis=1, keepdims=True)
        self.face_normals = fn / np.maximum(norms, 1e-30)

    def closest(self, points: np.ndarray, k: int = 16):
        """Closest surface points. Returns (points, face_indices, distances)."""
        points = np.asarray(points, float).reshape(-1, 3)
        k = min(k, len(self.faces))
        _, cand = self._tree.query(points, k=k)
        if k == 1:
            cand = cand[:, None]
        cp = closest_point_on_triangles(points[:, None, :], self.tris[cand])
        d = np.linalg.norm(cp - points[:, None, :], axis=2)
        best = np.argmin(d, axis=1)
        rows = np.arange(len(points))
        return cp[rows, best], cand[rows, best], d[rows, best]

    def signed_distance(self, points: np.ndarray, k: int = 16):
        """Distance signed by the winding of the nearest face: positive
        outside (along the face normal), negative inside. Adequate for
        closed, consistently wound surfaces."""
        cp, fidx, d = self.closest(points, k=k)
        side = np.einsum("ij,ij->i", np.asarray(points, float).reshape(-1, 3) - cp,
                         self.face_normals[fidx])
        return np.where(side >= 0, d, -d), cp, fidx


def mesh_distance_stats(verts_a, mesh_b_proximity: MeshProximity):
    _, _, d = mesh_b_proximity.closest(verts_a)
    return float(d.mean()), float(d.max())


def hausdorff_proxy(verts_a, faces_a, verts_b, faces_b) -> float:
    """Two-sided vertex-to-surface Hausdorff distance."""
    pa = MeshProximity(verts_a, faces_a)
    pb = MeshProximity(verts_b, faces_b)
    _, max_ab = mesh_distance_stats(verts_a, pb)
    _, max_ba = mesh_distance_stats(verts_b, pa)
    return max(max_ab, max_ba)
