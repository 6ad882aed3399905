"""Template-to-identity fitting: triharmonic RBF space warp, PCA distance
regressor, skull-layer optimization, muscle placement heuristic, skull
placement, and the full fit pipeline."""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import mesh as vm
from . import solver as ps
from .errors import FormatError, ValidationError
from .lhm import (LayeredHeadModel, build_tissue_meshes, validate_lhm,
                  MIN_LAYER_GAP)
from .spatial import MeshProximity

MAX_RBF_CENTERS = 1500
REGRESSOR_MAGIC = b"VBSR1"


# ----------------------------------------------------------------------------
# Triharmonic RBF space warp


@dataclass
class RbfWarp:
    """Triharmonic (r^3 kernel) space warp with an affine polynomial term.

    Interpolates its center/target pairs exactly and reproduces affine
    maps exactly (the side conditions kill the kernel part for affine
    source-to-target data)."""

    centers: np.ndarray       # (n, 3)
    coefficients: np.ndarray  # (n, 3)
    affine: np.ndarray        # (4, 3): rows x, y, z, 1

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, float).reshape(-1, 3)
        out = np.hstack([points, np.ones((len(points), 1))]) @ self.affine
        # chunked kernel evaluation keeps memory bounded
        for start in range(0, len(points), 4096):
            block = points[start:start + 4096]
            d = np.linalg.norm(block[:, None, :] - self.centers[None], axis=2)
            out[start:start + 4096] += (d ** 3) @ self.coefficients
        return out


def farthest_point_subsample(points: np.ndarray, k: int,
                             seed_index: int = 0) -> np.ndarray:
    """Indices of k points spread by greedy farthest-point sampling."""
    points = np.asarray(points, float)
    n = len(points)
    if k >= n:
        return np.arange(n)
    chosen = np.empty(k, dtype=int)
    chosen[0] = seed_index
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def build_rbf_warp(sources: np.ndarray, targets: np.ndarray) -> RbfWarp:
    """Solve the dense symmetric triharmonic interpolation system.

    Requires at least 4 non-coplanar, pairwise-distinct sources. The
    kernel block is augmented with the affine polynomial and its side
    conditions; solved with pivoting.
    """
    sources = np.asarray(sources, float).reshape(-1, 3)
    targets = np.asarray(targets, float).reshape(-1, 3)
    n = len(sources)
    if n < 4:
        raise ValidationError("triharmonic warp needs at least 4 sources")
    d = np.linalg.norm(sources[:, None, :] - sources[None], axis=2)
    off_diag = d + np.eye(n)
    if off_diag.min() < 1e-6:
        raise ValidationError("duplicate warp sources (pairwise distance < 1e-6)")
    span = sources - sources.mean(axis=0)
    if np.linalg.svd(span, compute_uv=False)[-1] < 1e-9 * max(1.0, d.max()):
        raise ValidationError("warp sources are coplanar")

    p = np.hstack([sources, np.ones((n, 1))])  # (n, 4)
    a = np.zeros((n + 4, n + 4))
    a[:n, :n] = d ** 3
    a[:n, n:] = p
    a[n:, :n] = p.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = targets
    try:
        sol = sla.solve(a, rhs)
    except sla.LinAlgError:
        raise ValidationError(
            "singular warp system; subsample the sources") from None
    if not np.isfinite(sol).all():
        raise ValidationError("singular warp system; subsample the sources")
    return RbfWarp(centers=sources, coefficients=sol[:n], affine=sol[n:])


def warp_skin_wrap(template: LayeredHeadModel, target_skin: vm.TriangleMesh,
                   max_centers: int = MAX_RBF_CENTERS) -> tuple[vm.TriangleMesh, RbfWarp]:
    """Warp the template skin wrap with the template-skin-to-target warp.

    Centers are subsampled by farthest-point sampling (dense triharmonic
    systems scale cubically). Reports, but does not fail on, warp-induced
    self-intersections; downstream validation gates those.
    """
    if target_skin.n_vertices != template.skin.n_vertices:
        raise ValidationError("target skin must share the template topology")
    idx = farthest_point_subsample(template.skin.vertices,
                                   min(max_centers, template.skin.n_vertices))
    warp = build_rbf_warp(template.skin.vertices[idx], target_skin.vertices[idx])
    wrapped = template.skin_wrap.with_vertices(warp(template.skin_wrap.vertices))
    return wrapped, warp


# ----------------------------------------------------------------------------
# Skin-to-skull-layer distance regressor


@dataclass
class DistanceRegressor:
    """Linear regressor between PCA coordinates of stacked skin-wrap
    vertices and PCA coordinates of per-column skin-to-skull distances.

    Predictions are floored at ``min_distance`` so downstream fits can
    never produce skin/skull intersections or degenerate prisms."""

    skin_mean: np.ndarray    # (3V,)
    skin_basis: np.ndarray   # (3V, k_in), orthonormal columns
    dist_mean: np.ndarray    # (V,)
    dist_basis: np.ndarray   # (V, k_out), orthonormal columns
    linear_map: np.ndarray   # (k_in, k_out)
    min_distance: float = 1.0

    def predict(self, skin_wrap_vertices: np.ndarray) -> np.ndarray:
        x = np.asarray(skin_wrap_vertices, float).ravel() - self.skin_mean
        a = x @ self.skin_basis
        d = self.dist_mean + self.dist_basis @ (a @ self.linear_map)
        return np.maximum(d, self.min_distance)


def _pca(data: np.ndarray, k: int, what: str):
    mean = data.mean(axis=0)
    centered = data - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > 1e-9 * max(s[0], 1e-12)).sum())
    if k > rank:
        warnings.warn(f"{what}: requested {k} components exceeds rank {rank}; reduced")
        k = max(rank, 1)
    return mean, vt[:k].T, u[:, :k] * s[:k]


def train_distance_regressor(skin_wraps: np.ndarray, distances: np.ndarray,
                             k_in: int = 40, k_out: int = 40,
                             ridge: float = 1e-3,
                             min_distance: float = 1.0) -> DistanceRegressor:
    """Fit the PCA-to-PCA ridge regressor from paired instances.

    skin_wraps: (N, V, 3) wrap geometry per instance; distances: (N, V)
    per-column skin-to-skull-layer distances (mm).
    """
    skin_wraps = np.asarray(skin_wraps, float)
    distances = np.asarray(distances, float)
    n = len(skin_wraps)
    if n < 2 or n != len(distances):
        raise ValidationError("need >= 2 paired instances")
    if n < k_in + 1:
        warnings.warn(f"only {n} instances for k_in={k_in}; components reduced")

    x = skin_wraps.reshape(n, -1)
    skin_mean, skin_basis, a = _pca(x, k_in, "skin PCA")
    dist_mean, dist_basis, b = _pca(distances, k_out, "distance PCA")

    # ridge strength is relative to the coefficient scale, so the same
    # setting regularizes meaningfully regardless of head size or count
    ata = a.T @ a
    scale = np.trace(ata) / max(ata.shape[0], 1)
    ata = ata + ridge * scale * np.eye(a.shape[1])
    linear_map = np.linalg.solve(ata, a.T @ b)
    return DistanceRegressor(skin_mean=skin_mean, skin_basis=skin_basis,
                             dist_mean=dist_mean, dist_basis=dist_basis,
                             linear_map=linear_map, min_distance=min_distance)


def save_regressor(reg: DistanceRegressor, path) -> None:
    """Versioned little-endian binary: magic, dims, then row-major arrays."""
    with open(path, "wb") as fh:
        fh.write(REGRESSOR_MAGIC)
        three_v = len(reg.skin_mean)
        v = len(reg.dist_mean)
        k_in = reg.skin_basis.shape[1]
        k_out = reg.dist_basis.shape[1]
        fh.write(struct.pack("<4i", three_v, v, k_in, k_out))
        fh.write(struct.pack("<d", reg.min_distance))
        for arr in (reg.skin_mean, reg.skin_basis, reg.dist_mean,
                    reg.dist_basis, reg.linear_map):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_regressor(path) -> DistanceRegressor:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != REGRESSOR_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {REGRESSOR_MAGIC!r}")
        three_v, v, k_in, k_out = struct.unpack("<4i", fh.read(16))
        (min_distance,) = struct.unpack("<d", fh.read(8))

        def arr(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            if data.size != count:
                raise FormatError(f"{path}: truncated regressor file")
            return data.reshape(shape).copy()

        return DistanceRegressor(
            skin_mean=arr((three_v,)), skin_basis=arr((three_v, k_in)),
            dist_mean=arr((v,)), dist_basis=arr((v, k_out)),
            linear_map=arr((k_in, k_out)), min_distance=min_distance)


# ----------------------------------------------------------------------------
# Layer fitting


def fit_skull_layer(skin_wrap: vm.TriangleMesh, regressor: DistanceRegressor,
                    template: LayeredHeadModel,
                    weights: ps.SolverWeights | None = None,
                    n_iterations: int = 60) -> vm.TriangleMesh:
    """Optimize the skull wrap under rectangularity + predicted-distance
    + curvature energies, starting from the normal-offset initialization.

    Curvature rest data comes from the template skull wrap; distances
    are the regressor's (floored) predictions anchored at the fitted
    skin wrap's vertices.
    """
    weights = weights or ps.SolverWeights()
    n = skin_wrap.n_vertices
    d = regressor.predict(skin_wrap.vertices)
    normals = vm.area_weighted_normals(skin_wrap)
    x0 = skin_wrap.vertices - d[:, None] * normals

    lap = vm.cotangent_laplacian(template.skull_wrap)
    edges = skin_wrap.edges()
    quads = np.column_stack([edges[:, 0], edges[:, 1],
                             n + edges[:, 1], n + edges[:, 0]])
    cs = ps.ConstraintSet(2 * n)
    cs.add_rectangularity(quads, weights.w_rect)
    cs.add_distance_bands(np.arange(n), skin_wrap.vertices, d,
                          -normals, weights.w_dist2)
    elements, row_weights = [], []
    w_csr = lap.weights.tocsr()
    for i in range(n):
        cols = w_csr.indices[w_csr.indptr[i]:w_csr.indptr[i + 1]]
        vals = w_csr.data[w_csr.indptr[i]:w_csr.indptr[i + 1]]
        elements.append(cols)
        row_weights.append(vals)
    cs.add_curvature(elements, row_weights, lap.rest_laplacians,
                     lap.voronoi_areas, weights.w_curv)

    state = ps.assemble_and_factorize(
        cs, pins=(np.arange(n, 2 * n), skin_wrap.vertices),
        initial_positions=np.vstack([x0, skin_wrap.vertices]))
    ps.solve(state, n_iterations)
    fitted = state.positions[:n]

    gap = np.einsum("ij,ij->i", skin_wrap.vertices - fitted, normals)
    if (gap < regressor.min_distance * 0.5).any():
        # one re-floored retry, then hard error
        d2 = np.maximum(d, regressor.min_distance * 1.5)
        cs.set_distance_band_data(distances=d2)
        ps.solve(state, n_iterations)
        fitted = state.positions[:n]
        gap = np.einsum("ij,ij->i", skin_wrap.vertices - fitted, normals)
        if (gap < MIN_LAYER_GAP).any():
            raise ValidationError("skull layer intersects the skin wrap "
                                  "after re-floored refit")
    return template.skull_wrap.with_vertices(fitted)


def _minimal_rotations(from_dirs: np.ndarray, to_dirs: np.ndarray) -> np.ndarray:
    """Batch of minimal rotations taking unit vectors onto unit vectors."""
    v = np.cross(from_dirs, to_dirs)
    c = np.einsum("ij,ij->i", from_dirs, to_dirs)
    s2 = np.einsum("ij,ij->i", v, v)
    r = np.tile(np.eye(3), (len(from_dirs), 1, 1))
    ok = s2 > 1e-24
    vx = np.zeros((len(from_dirs), 3, 3))
    vx[:, 0, 1] = -v[:, 2]; vx[:, 0, 2] = v[:, 1]
    vx[:, 1, 0] = v[:, 2]; vx[:, 1, 2] = -v[:, 0]
    vx[:, 2, 0] = -v[:, 1]; vx[:, 2, 1] = v[:, 0]
    factor = np.where(ok, (1 - c) / np.where(ok, s2, 1.0), 0.0)
    return r + vx + (vx @ vx) * factor[:, None, None]


def fit_muscle_layer(skin_wrap: vm.TriangleMesh, skull_wrap: vm.TriangleMesh,
                     template: LayeredHeadModel,
                     w_rel: float = 0.1) -> vm.TriangleMesh:
    """Place the muscle wrap along each skin-to-skull column.

    Each vertex carries the template's skin-side offset (rotated into
    the new column frame) rescaled so the absolute skin-to-muscle
    distance is the template's plus the fraction w_rel of the
    column-length change; clamped to stay strictly between the wraps.
    Columns shorter than the template offset fall back to proportional
    placement (flagged via a warning).
    """
    eps = 0.2
    t_skin = template.skin_wrap.vertices
    t_skull = template.skull_wrap.vertices
    t_muscle = template.muscle_wrap.vertices
    offset_t = t_muscle - t_skin
    a_t = np.linalg.norm(offset_t, axis=1)
    col_t = t_skull - t_skin
    len_t = np.linalg.norm(col_t, axis=1)

    col = skull_wrap.vertices - skin_wrap.vertices
    len_h = np.linalg.norm(col, axis=1)
    a_h = a_t + w_rel * (len_h - len_t)

    short = len_h <= a_t + eps
    if short.any():
        warnings.warn(f"{int(short.sum())} columns shorter than the template "
                      f"muscle offset; proportional fallback used")
        a_h = np.where(short, len_h * (a_t / np.maximum(len_t, 1e-9)), a_h)
    a_h = np.clip(a_h, eps, len_h - eps)

    d_t = col_t / np.maximum(len_t, 1e-12)[:, None]
    d_h = col / np.maximum(len_h, 1e-12)[:, None]
    rot = _minimal_rotations(d_t, d_h)
    carried = np.einsum("nij,nj->ni", rot, offset_t)
    verts = skin_wrap.vertices + carried * (a_h / np.maximum(a_t, 1e-12))[:, None]

    # keep the along-column coordinate strictly between the wraps
    c = np.einsum("ij,ij->i", verts - skin_wrap.vertices, d_h)
    clipped = np.clip(c, eps, len_h - eps)
    verts = verts + (clipped - c)[:, None] * d_h
    return template.muscle_wrap.with_vertices(verts)


def place_skull(template: LayeredHeadModel, fitted_skull_wrap: vm.TriangleMesh,
                max_centers: int = MAX_RBF_CENTERS,
                containment_tolerance: float = 1e-3) -> vm.TriangleMesh:
    """Move the skull mesh with the template-to-fitted skull-wrap warp
    and verify it stays inside the fitted wrap (signed-distance check;
    violations above 0.1% of vertices are an error)."""
    idx = farthest_point_subsample(template.skull_wrap.vertices,
                                   min(max_centers, template.skull_wrap.n_vertices))
    warp = build_rbf_warp(template.skull_wrap.vertices[idx],
                          fitted_skull_wrap.vertices[idx])
    verts = warp(template.skull.vertices)
    prox = MeshProximity(fitted_skull_wrap.vertices, fitted_skull_wrap.faces)
    signed, _, _ = prox.signed_distance(verts)
    outside = signed > 0.05
    if outside.mean() > containment_tolerance:
        bad = np.flatnonzero(outside)
        raise ValidationError(
            f"skull escapes the fitted skull wrap at {len(bad)} vertices "
            f"({outside.mean():.2%}): {bad[:20].tolist()}")
    return vm.TriangleMesh(verts, template.skull.faces,
                           dict(template.skull.region_masks))


@dataclass
class LHMFitResult:
    lhm: LayeredHeadModel
    transforms: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def fit_lhm(target_skin: vm.TriangleMesh, regressor: DistanceRegressor,
            template: LayeredHeadModel,
            weights: ps.SolverWeights | None = None,
            w_rel: float = 0.1) -> LHMFitResult:
    """Full fit pipeline: skin-wrap warp, skull-layer optimization,
    muscle heuristic, skull placement, tissue meshes. Wall times per
    stage land in the diagnostics."""
    weights = weights or ps.SolverWeights()
    times = {}
    t0 = time.perf_counter()
    skin_wrap, skin_warp = warp_skin_wrap(template, target_skin)
    times["warp_skin_wrap"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    skull_wrap = fit_skull_layer(skin_wrap, regressor, template, weights)
    times["fit_skull_layer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    muscle_wrap = fit_muscle_layer(skin_wrap, skull_wrap, template, w_rel)
    times["fit_muscle_layer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    skull = place_skull(template, skull_wrap)
    times["place_skull"] = time.perf_counter() - t0

    # muscle surface rides the muscle-wrap warp (carried, not simulated)
    idx = farthest_point_subsample(template.muscle_wrap.vertices,
                                   min(MAX_RBF_CENTERS, template.muscle_wrap.n_vertices))
    muscle_warp = build_rbf_warp(template.muscle_wrap.vertices[idx],
                                 muscle_wrap.vertices[idx])
    muscles = vm.TriangleMesh(muscle_warp(template.muscles.vertices),
                              template.muscles.faces,
                              dict(template.muscles.region_masks))

    skin = vm.TriangleMesh(target_skin.vertices, template.skin.faces,
                           dict(template.skin.region_masks))
    fitted = LayeredHeadModel(skin=skin, skull=skull, muscles=muscles,
                              skin_wrap=skin_wrap, skull_wrap=skull_wrap,
                              muscle_wrap=muscle_wrap)
    t0 = time.perf_counter()
    fitted = build_tissue_meshes(fitted)
    times["build_tissue_meshes"] = time.perf_counter() - t0
    validate_lhm(fitted)
    times["total"] = sum(times.values())

    return LHMFitResult(
        lhm=fitted,
        transforms={"skin_wrap": skin_warp, "muscles": muscle_warp,
                    "skull_wrap": "projective-dynamics fit",
                    "muscle_wrap": f"column heuristic (w_rel={w_rel})"},
        diagnostics={"stage_seconds": times,
                     "embedding_clamped": fitted.diagnostics.get("embedding_clamped", 0)})


# ----------------------------------------------------------------------------
# Synthetic paired data for the regressor (stand-in for scan/MRI pairs)


def synthetic_paired_dataset(template: LayeredHeadModel, n_instances: int,
                             rng: np.random.Generator, level: int = 0):
    """Paired (skin wrap geometry, per-column distances) instances from
    randomized synthetic identities with known anatomy.

    The skin wrap of each pair is produced exactly the way the fit
    pipeline produces it (template warp onto that identity's skin), so
    the regressor sees its deployment-time inputs.
    """
    from .lhm import generate_synthetic_template, massage_layers, sample_identity_spec
    wraps = np.empty((n_instances, template.skin_wrap.n_vertices, 3))
    dists = np.empty((n_instances, template.skin_wrap.n_vertices))
    for i in range(n_instances):
        spec = sample_identity_spec(rng, level=level)
        truth = massage_layers(generate_synthetic_template(spec))
        wrap, _ = warp_skin_wrap(template, truth.skin)
        wraps[i] = wrap.vertices
        dists[i] = np.linalg.norm(wrap.vertices - truth.skull_wrap.vertices, axis=1)
    return wraps, dists
