"""Triangle/tet mesh types, discrete operators, and ASCII mesh I/O.

All positions are in millimeters. Meshes are immutable after
construction (the underlying numpy buffers are locked) and can be
shared freely across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import FormatError, ValidationError

# Rest tets below this volume (mm^3) are treated as degenerate.
DEGENERATE_TET_VOLUME = 1e-9


def _lock(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass
class TriangleMesh:
    """A triangle mesh with optional named vertex-index regions.

    Parameters
    ----------
    vertices : (V, 3) float array, millimeters.
    faces : (F, 3) int array of vertex indices.
    region_masks : dict mapping region name to a sorted int array of
        vertex indices (e.g. "lips_upper", "teeth", "jaw", "cranium").
    """

    vertices: np.ndarray
    faces: np.ndarray
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = _lock(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        self.faces = _lock(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        self.region_masks = {
            name: _lock(np.asarray(idx, dtype=np.int64).ravel())
            for name, idx in self.region_masks.items()
        }

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same connectivity and masks, new vertex positions."""
        return TriangleMesh(vertices, self.faces, dict(self.region_masks))

    def mask(self, name: str) -> np.ndarray:
        if name not in self.region_masks:
            raise KeyError(f"mesh has no region mask {name!r}; "
                           f"available: {sorted(self.region_masks)}")
        return self.region_masks[name]

    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2), sorted pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def validate(self) -> None:
        """Raise ValidationError on out-of-range indices, degenerate
        faces, or masks referencing missing vertices."""
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise ValidationError("face indices out of range")
        areas = self.face_areas()
        bad = np.flatnonzero(areas < 1e-12)
        if bad.size:
            raise ValidationError(f"degenerate (zero-area) faces: {bad[:20].tolist()}")
        for name, idx in self.region_masks.items():
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_vertices):
                raise ValidationError(f"region mask {name!r} references missing vertices")


@dataclass
class TetMesh:
    """A tetrahedral mesh with precomputed rest-state data.

    ``rest_inverse_edges[t]`` is the inverse of the rest edge matrix
    [x1-x0, x2-x0, x3-x0] (columns are edges) of tet t and
    ``rest_volumes[t]`` its signed volume in mm^3. Degenerate rest tets
    get NaN inverse entries; ``validate()`` rejects them.
    """

    vertices: np.ndarray
    tets: np.ndarray
    rest_inverse_edges: np.ndarray = None
    rest_volumes: np.ndarray = None

    def __post_init__(self):
        self.vertices = _lock(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        self.tets = _lock(np.asarray(self.tets, dtype=np.int64).reshape(-1, 4))
        if self.rest_volumes is None:
            edges = tet_edge_matrices(self.vertices, self.tets)
            self.rest_volumes = np.linalg.det(edges) / 6.0
            inv = np.full_like(edges, np.nan)
            ok = np.abs(self.rest_volumes) > DEGENERATE_TET_VOLUME
            if ok.any():
                inv[ok] = np.linalg.inv(edges[ok])
            self.rest_inverse_edges = inv
        self.rest_volumes = _lock(np.asarray(self.rest_volumes, dtype=np.float64))
        self.rest_inverse_edges = _lock(np.asarray(self.rest_inverse_edges, dtype=np.float64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def validate(self) -> None:
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= self.n_vertices):
            raise ValidationError("tet indices out of range")
        bad = np.flatnonzero(~(self.rest_volumes > DEGENERATE_TET_VOLUME))
        if bad.size:
            raise ValidationError(
                f"non-positive rest volumes in tets: {bad[:20].tolist()}")


@dataclass
class DeformationGradientField:
    """One 3x3 deformation gradient per tet of an associated TetMesh."""

    gradients: np.ndarray

    def __post_init__(self):
        self.gradients = _lock(np.asarray(self.gradients, dtype=np.float64).reshape(-1, 3, 3))

    def __len__(self) -> int:
        return len(self.gradients)


@dataclass
class LaplacianOperator:
    """Cotangent Laplacian with mixed Voronoi areas.

    ``weights`` is the symmetric cotangent weight matrix with zero row
    sums (diagonal is minus the off-diagonal row sum), so
    ``weights @ x`` gives the integrated Laplacian of a vertex function
    x. ``rest_laplacians`` is ``weights @ positions`` at build time.
    """

    weights: sparse.csr_matrix
    voronoi_areas: np.ndarray
    rest_laplacians: np.ndarray

    def laplacians(self, positions: np.ndarray) -> np.ndarray:
        return self.weights @ positions


# ----------------------------------------------------------------------------
# Deformation gradients and rotation fitting


def tet_edge_matrices(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Per-tet 3x3 edge matrices with edges as columns, (T, 3, 3)."""
    p = vertices[tets]
    return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)


def deformation_gradient(rest: np.ndarray, current: np.ndarray, tet_index: int = 0) -> np.ndarray:
    """Deformation gradient of a single tet given rest/current corners (4, 3).

    Returns the current edge matrix times the inverse rest edge matrix;
    the identity when current equals rest.
    """
    rest = np.asarray(rest, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    dm = np.column_stack([rest[1] - rest[0], rest[2] - rest[0], rest[3] - rest[0]])
    vol = np.linalg.det(dm) / 6.0
    if not vol > DEGENERATE_TET_VOLUME:
        raise ValidationError(
            f"degenerate rest tet {tet_index} (volume {vol:.3e} mm^3)")
    ds = np.column_stack([current[1] - current[0], current[2] - current[0],
                          current[3] - current[0]])
    return ds @ np.linalg.inv(dm)


def tet_deformation_gradients(rest_inverse_edges: np.ndarray,
                              positions: np.ndarray,
                              tets: np.ndarray) -> np.ndarray:
    """Batched deformation gradients, (T, 3, 3)."""
    ds = tet_edge_matrices(positions, tets)
    return ds @ rest_inverse_edges


def closest_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation(s) to 3x3 matrices in the Frobenius norm.

    Uses the signed SVD: when det(U V^T) < 0 the last column of U is
    negated, so the result always has determinant +1. Accepts a single
    (3, 3) matrix or a batch (..., 3, 3).
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    if single:
        m = m[None]
    u, _, vt = np.linalg.svd(m)
    det = np.linalg.det(u @ vt)
    u = u.copy()
    u[det < 0, :, 2] *= -1.0
    r = u @ vt
    return r[0] if single else r


# ----------------------------------------------------------------------------
# Discrete differential operators


def nonmanifold_edges(mesh: TriangleMesh) -> np.ndarray:
    """Edges incident to more than two faces, (K, 2)."""
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts > 2]


def cotangent_laplacian(mesh: TriangleMesh) -> LaplacianOperator:
    """Cotangent-weight Laplacian of a manifold triangle mesh.

    Off-diagonal weight of edge (i, j) is (cot a + cot b) / 2 over the
    one or two opposite angles; the diagonal makes row sums zero.
    Voronoi areas use the mixed rule with a one-third-triangle-area
    fallback for obtuse triangles, which keeps all areas positive.
    """
    bad = nonmanifold_edges(mesh)
    if len(bad):
        raise ValidationError(f"non-manifold edges: {bad[:20].tolist()}")

    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    i0, i1, i2 = f[:, 0], f[:, 1], f[:, 2]
    e0 = v[i2] - v[i1]  # edge opposite corner 0
    e1 = v[i0] - v[i2]
    e2 = v[i1] - v[i0]
    double_area = np.linalg.norm(np.cross(e2, -e1), axis=1)
    double_area = np.maximum(double_area, 1e-300)
    # cot of the angle at corner k = dot of adjacent edges / (2 * area)
    cot0 = np.einsum("ij,ij->i", -e1, e2) / double_area
    cot1 = np.einsum("ij,ij->i", -e2, e0) / double_area
    cot2 = np.einsum("ij,ij->i", -e0, e1) / double_area

    rows = np.concatenate([i1, i2, i0])
    cols = np.concatenate([i2, i0, i1])
    vals = 0.5 * np.concatenate([cot0, cot1, cot2])
    w = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n))
    w = (w + w.T).tocsr()
    w = w - sparse.diags(np.asarray(w.sum(axis=1)).ravel())
    w = w.tocsr()

    area = double_area / 2.0
    obtuse = (cot0 < 0) | (cot1 < 0) | (cot2 < 0)
    areas = np.zeros(n)
    # Non-obtuse: per-corner Voronoi area (|e|^2 cot terms) / 8.
    sq0 = np.einsum("ij,ij->i", e0, e0)
    sq1 = np.einsum("ij,ij->i", e1, e1)
    sq2 = np.einsum("ij,ij->i", e2, e2)
    a0 = np.where(obtuse, area / 3.0, (sq2 * cot2 + sq1 * cot1) / 8.0)
    a1 = np.where(obtuse, area / 3.0, (sq0 * cot0 + sq2 * cot2) / 8.0)
    a2 = np.where(obtuse, area / 3.0, (sq1 * cot1 + sq0 * cot0) / 8.0)
    np.add.at(areas, i0, a0)
    np.add.at(areas, i1, a1)
    np.add.at(areas, i2, a2)

    return LaplacianOperator(weights=w, voronoi_areas=areas, rest_laplacians=w @ v)


def area_weighted_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit per-vertex normals from area-weighted incident face normals.

    Orientation follows the face winding. Isolated vertices (no
    incident face) get a zero normal and trigger a warning.
    """
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area*normal
    normals = np.zeros_like(v)
    for k in range(3):
        np.add.at(normals, f[:, k], fn)
    norms = np.linalg.norm(normals, axis=1)
    isolated = norms < 1e-14
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices have zero normals")
    normals[~isolated] /= norms[~isolated, None]
    return normals


def icosphere(subdivisions: int, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere.

    Subdivision is midpoint-based, so the vertex set of level k is a
    prefix of the vertex set of level k+1 (the first vertices of a
    finer sphere coincide with the coarser one). Faces wind outward.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    vlist = [row for row in verts]
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint_cache.get(key)
            if idx is None:
                m = vlist[a] + vlist[b]
                m /= np.linalg.norm(m)
                vlist.append(m)
                idx = len(vlist) - 1
                midpoint_cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    verts = np.array(vlist) * radius
    return TriangleMesh(verts, faces)


def enclosed_volume(mesh: TriangleMesh) -> float:
    """Signed volume enclosed by a closed surface (divergence theorem)."""
    p = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", p[:, 0],
                           np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


# ----------------------------------------------------------------------------
# ASCII mesh I/O
#
# Triangle meshes: OBJ restricted to v/f records with triangle faces.
# Tet meshes: "tetmesh 1" header, then v/t records with 0-based indices.
# Region masks: sidecar text file of "mask <name>" blocks.
# Floats are written with repr() so read/write round trips are bit-exact.


def _fmt_floats(x) -> str:
    return " ".join(repr(float(c)) for c in x)


def write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_fmt_floats(v)}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise FormatError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:]])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad vertex coordinate ({exc})") from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FormatError(
                        f"{path}:{lineno}: only triangle faces are supported "
                        f"(got {len(parts) - 1} corners)")
                try:
                    idx = [int(p) for p in parts[1:]]
                except ValueError:
                    raise FormatError(
                        f"{path}:{lineno}: face corners must be plain vertex indices") from None
                faces.append([i - 1 for i in idx])
            else:
                raise FormatError(f"{path}:{lineno}: unsupported record {parts[0]!r}")
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_tet(mesh: TetMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("tetmesh 1\n")
        for v in mesh.vertices:
            fh.write(f"v {_fmt_floats(v)}\n")
        for t in mesh.tets:
            fh.write(f"t {t[0]} {t[1]} {t[2]} {t[3]}\n")


def read_tet(path) -> TetMesh:
    verts, tets = [], []
    with open(path) as fh:
        first = fh.readline()
        if first.strip() != "tetmesh 1":
            raise FormatError(f"{path}:1: expected header 'tetmesh 1'")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v" and len(parts) == 4:
                try:
                    verts.append([float(p) for p in parts[1:]])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad coordinate ({exc})") from None
            elif parts[0] == "t" and len(parts) == 5:
                try:
                    tets.append([int(p) for p in parts[1:]])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: tet record needs 4 integers") from None
            else:
                raise FormatError(f"{path}:{lineno}: unsupported record {line!r}")
    return TetMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(tets, dtype=np.int64).reshape(-1, 4))


def write_masks(masks: dict[str, np.ndarray], path) -> None:
    with open(path, "w") as fh:
        for name in sorted(masks):
            fh.write(f"mask {name}\n")
            idx = np.asarray(masks[name], dtype=np.int64).ravel()
            for start in range(0, len(idx), 16):
                fh.write(" ".join(str(i) for i in idx[start:start + 16]) + "\n")


def read_masks(path) -> dict[str, np.ndarray]:
    masks: dict[str, list[int]] = {}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "mask":
                if len(parts) != 2:
                    raise FormatError(f"{path}:{lineno}: mask record needs one name")
                current = parts[1]
                masks.setdefault(current, [])
            else:
                if current is None:
                    raise FormatError(f"{path}:{lineno}: indices before any 'mask' record")
                try:
                    masks[current].extend(int(p) for p in parts)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: mask indices must be integers") from None
    return {name: np.array(idx, dtype=np.int64) for name, idx in masks.items()}


def load_mesh(path):
    """Read a TriangleMesh (.obj) or TetMesh (.tet) based on extension."""
    path = str(path)
    if path.endswith(".obj"):
        return read_obj(path)
    if path.endswith(".tet"):
        return read_tet(path)
    raise FormatError(f"unknown mesh extension: {path}")


def save_mesh(mesh, path) -> None:
    path = str(path)
    if isinstance(mesh, TriangleMesh):
        if not path.endswith(".obj"):
            raise FormatError(f"triangle meshes are written as .obj, got {path}")
        write_obj(mesh, path)
    elif isinstance(mesh, TetMesh):
        if not path.endswith(".tet"):
            raise FormatError(f"tet meshes are written as .tet, got {path}")
        write_tet(mesh, path)
    else:
        raise FormatError(f"cannot save object of type {type(mesh).__name__}")
