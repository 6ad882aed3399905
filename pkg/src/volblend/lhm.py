"""Layered head model: template container, synthetic template generation,
layer massage, prism tetrahedralization, and directory persistence.

A model bundles six registered surfaces (skin, skull, muscles and the
three wraps sharing one triangulation) plus the two tet meshes derived
from the inter-wrap prisms. Wrap vertex index i is the same prism
column on all three wraps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import mesh as vm
from . import solver as ps
from .errors import ValidationError
from .spatial import MeshProximity, hausdorff_proxy

# Cardinalities of the full-resolution production template, kept as
# reference metadata for manifests (vertices, faces-or-tets).
FULL_SCALE_REFERENCE = {
    "skin": (21875, 42738),
    "skull": (14572, 28856),
    "muscles": (16388, 32370),
    "skin_wrap": (7826, 15648),
    "skull_wrap": (7826, 15648),
    "muscle_wrap": (7826, 15648),
    "soft_tets": (49852, 123429),
    "muscle_tets": (49852, 73681),
}

MIN_LAYER_GAP = 0.2  # mm, hard floor between consecutive layers
HAUSDORFF_BUDGET = 2.0  # mm, how far a massage may move a wrap


@dataclass
class TemplateSpec:
    """Parameters of the synthetic head template.

    level sets the resolution (wraps are icospheres subdivided 2+level
    times, the skin 3+level). Offsets are millimeter layer distances;
    feature amplitudes shape the skin and skull radial fields.
    adiposity scales both the cheek/jowl fat on the skin and the soft
    tissue thickness, which is what makes skull depth learnable from
    skin shape downstream.
    """

    level: int = 0
    scale: float = 1.0
    radii: tuple = (75.0, 95.0, 85.0)  # x right, y up, z forward (mm)
    nose_amp: float = 14.0
    brow_amp: float = 6.0
    chin_amp: float = 9.0
    cheek_amp: float = 6.0
    jaw_amp: float = 7.0
    lip_amp: float = 3.5
    socket_depth: float = 3.0
    adiposity: float = 1.0
    soft_offset: float = 7.0     # skin wrap -> muscle wrap (mm)
    muscle_offset: float = 5.0   # muscle wrap -> skull wrap (mm)
    offset_noise: float = 0.0    # extra uncorrelated thickness term (mm)
    noise_seed: int = 0

    def validate(self):
        if self.soft_offset <= 0 or self.muscle_offset <= 0:
            raise ValidationError("layer offsets must be strictly positive")
        if self.level < 0:
            raise ValidationError("level must be >= 0")


def sample_identity_spec(rng: np.random.Generator, level: int = 0) -> TemplateSpec:
    """Randomized plausible identity parameters, centered on the default
    template (the population mean head). Adiposity couples the cheek and
    jowl shape of the skin to the soft tissue thickness."""
    adiposity = float(rng.uniform(0.6, 1.4))
    scale = float(np.clip(1.0 + 0.10 * rng.normal(), 0.8, 1.25))
    return TemplateSpec(
        level=level,
        scale=scale,
        radii=(75.0 * (1 + 0.06 * rng.normal()),
               95.0 * (1 + 0.05 * rng.normal()),
               85.0 * (1 + 0.06 * rng.normal())),
        nose_amp=14.0 * rng.uniform(0.6, 1.5),
        brow_amp=6.0 * rng.uniform(0.5, 1.6),
        chin_amp=9.0 * rng.uniform(0.6, 1.5),
        cheek_amp=6.0 * adiposity * rng.uniform(0.85, 1.15),
        jaw_amp=7.0 * rng.uniform(0.6, 1.5),
        lip_amp=3.5 * rng.uniform(0.7, 1.4),
        socket_depth=3.0 * rng.uniform(0.7, 1.3),
        adiposity=adiposity,
        soft_offset=float(7.0 * (0.75 + 0.25 * adiposity) + rng.normal() * 0.25),
        muscle_offset=float(5.0 * rng.uniform(0.9, 1.1)),
        offset_noise=0.4,
        noise_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


@dataclass
class LayeredHeadModel:
    skin: vm.TriangleMesh
    skull: vm.TriangleMesh
    muscles: vm.TriangleMesh
    skin_wrap: vm.TriangleMesh
    skull_wrap: vm.TriangleMesh
    muscle_wrap: vm.TriangleMesh
    soft_tets: vm.TetMesh | None = None
    muscle_tets: vm.TetMesh | None = None
    # barycentric coupling of skin vertices into soft-tissue tets
    embedding_tets: np.ndarray | None = None      # (N_skin,) tet index
    embedding_weights: np.ndarray | None = None   # (N_skin, 4)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return self.skin_wrap.n_vertices

    def wrap_faces(self) -> np.ndarray:
        return self.skin_wrap.faces

    def embedded_skin_positions(self, soft_positions: np.ndarray) -> np.ndarray:
        """Skin vertex positions implied by soft-tet vertex positions."""
        corners = soft_positions[self.soft_tets.tets[self.embedding_tets]]
        return np.einsum("nk,nkj->nj", self.embedding_weights, corners)

    def validate(self) -> None:
        validate_lhm(self)


def _closed_manifold_errors(mesh: vm.TriangleMesh) -> list[str]:
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    bad = counts != 2
    if bad.any():
        return [f"{int(bad.sum())} edges not shared by exactly 2 faces"]
    return []


def validate_lhm(lhm: LayeredHeadModel) -> None:
    """Raise ValidationError when any structural invariant fails."""
    problems = []
    wraps = {"skin_wrap": lhm.skin_wrap, "skull_wrap": lhm.skull_wrap,
             "muscle_wrap": lhm.muscle_wrap}
    base_faces = lhm.skin_wrap.faces
    for name, wrap in wraps.items():
        if wrap.n_vertices != lhm.skin_wrap.n_vertices or not (wrap.faces == base_faces).all():
            problems.append(f"{name} does not share the wrap triangulation")
        problems += [f"{name}: {m}" for m in _closed_manifold_errors(wrap)]
    for name, mesh in [("skin", lhm.skin), ("skull", lhm.skull),
                       ("muscles", lhm.muscles)] + list(wraps.items()):
        try:
            mesh.validate()
        except ValidationError as exc:
            problems.append(f"{name}: {exc}")

    # prism column ordering: skin wrap, muscle wrap, skull wrap outward-in
    s, m, b = (lhm.skin_wrap.vertices, lhm.muscle_wrap.vertices,
               lhm.skull_wrap.vertices)
    axis = s - b
    norms = np.linalg.norm(axis, axis=1, keepdims=True)
    axis = axis / np.maximum(norms, 1e-30)
    gap_sm = np.einsum("ij,ij->i", s - m, axis)
    gap_mb = np.einsum("ij,ij->i", m - b, axis)
    if (gap_sm < MIN_LAYER_GAP).any() or (gap_mb < MIN_LAYER_GAP).any():
        n_bad = int((gap_sm < MIN_LAYER_GAP).sum() + (gap_mb < MIN_LAYER_GAP).sum())
        problems.append(f"wrap ordering violated on {n_bad} prism columns")

    for name, tets in [("soft_tets", lhm.soft_tets), ("muscle_tets", lhm.muscle_tets)]:
        if tets is not None:
            try:
                tets.validate()
            except ValidationError as exc:
                problems.append(f"{name}: {exc}")

    jaw = set(lhm.skull.region_masks.get("jaw", np.zeros(0, int)).tolist())
    cranium = set(lhm.skull.region_masks.get("cranium", np.zeros(0, int)).tolist())
    if jaw or cranium:
        if jaw & cranium or (jaw | cranium) != set(range(lhm.skull.n_vertices)):
            problems.append("jaw and cranium masks do not partition the skull vertices")

    if problems:
        raise ValidationError("; ".join(problems))


# ----------------------------------------------------------------------------
# Synthetic template generation


def _gaussian_bump(dirs: np.ndarray, center, sigma: float) -> np.ndarray:
    c = np.asarray(center, float)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
    return np.exp(-0.5 * (ang / sigma) ** 2)


def _ellipsoid_radius(dirs, radii):
    rx, ry, rz = radii
    inv = np.sqrt((dirs[:, 0] / rx) ** 2 + (dirs[:, 1] / ry) ** 2
                  + (dirs[:, 2] / rz) ** 2)
    return 1.0 / inv


def _skin_radius(dirs: np.ndarray, spec: TemplateSpec) -> np.ndarray:
    r = _ellipsoid_radius(dirs, spec.radii)
    r = r + spec.nose_amp * _gaussian_bump(dirs, (0, -0.05, 1.0), 0.20)
    r = r + spec.brow_amp * _gaussian_bump(dirs, (0, 0.34, 0.94), 0.32)
    r = r + spec.chin_amp * _gaussian_bump(dirs, (0, -0.62, 0.78), 0.24)
    r = r + spec.lip_amp * _gaussian_bump(dirs, (0, -0.36, 0.93), 0.17)
    for sx in (-1, 1):
        r = r + spec.cheek_amp * _gaussian_bump(dirs, (sx * 0.55, -0.2, 0.81), 0.36)
        r = r + spec.jaw_amp * _gaussian_bump(dirs, (sx * 0.72, -0.45, 0.53), 0.38)
        r = r - spec.socket_depth * _gaussian_bump(dirs, (sx * 0.32, 0.18, 0.92), 0.17)
        r = r + 1.2 * _gaussian_bump(dirs, (sx * 0.30, 0.17, 0.93), 0.085)  # eyeball
    return r * spec.scale


def _skull_radius(dirs: np.ndarray, spec: TemplateSpec, skin_r: np.ndarray) -> np.ndarray:
    """Skull surface radial field: bone features only (no nose/lips/fat),
    clamped to keep a minimum tissue depth under the skin."""
    base = _ellipsoid_radius(dirs, spec.radii) - (spec.soft_offset + spec.muscle_offset)
    r = base
    r = r + 0.8 * spec.brow_amp * _gaussian_bump(dirs, (0, 0.34, 0.94), 0.30)
    r = r + 0.85 * spec.chin_amp * _gaussian_bump(dirs, (0, -0.62, 0.78), 0.22)
    for sx in (-1, 1):
        r = r + 0.8 * spec.jaw_amp * _gaussian_bump(dirs, (sx * 0.72, -0.45, 0.53), 0.36)
        r = r - 1.8 * spec.socket_depth * _gaussian_bump(dirs, (sx * 0.32, 0.18, 0.92), 0.19)
        r = r + 0.3 * spec.cheek_amp * _gaussian_bump(dirs, (sx * 0.60, -0.05, 0.70), 0.30)
    # teeth proxy ridge around the mouth
    r = r + 2.0 * _gaussian_bump(dirs, (0, -0.40, 0.90), 0.16)
    r = r * spec.scale
    if spec.offset_noise > 0:
        noise_rng = np.random.default_rng(spec.noise_seed)
        coeffs = noise_rng.normal(size=6) * spec.offset_noise
        centers = [(0.9, 0.2, 0.2), (-0.9, 0.2, 0.2), (0, 0.9, 0.3),
                   (0, -0.8, 0.5), (0.5, -0.5, 0.7), (-0.5, -0.5, 0.7)]
        for c, a in zip(centers, coeffs):
            r = r + a * _gaussian_bump(dirs, c, 0.5)
    min_depth = (spec.soft_offset + spec.muscle_offset) * 0.55
    return np.minimum(r, skin_r - min_depth * spec.scale)


def _unit_dirs(mesh: vm.TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    return v / np.linalg.norm(v, axis=1, keepdims=True)




def _wrap_margin(level: int, mean_radius: float) -> float:
    # chord sag of the wrap icosphere plus clearance, so the finer skin
    # mesh stays strictly inside the skin wrap
    edge_arc = 1.107 / (2 ** (2 + level))
    return mean_radius * edge_arc ** 2 / 8.0 + 0.7


def _inflate_wrap_over_points(wrap_dirs, wrap_faces, wrap_r, point_dirs,
                              point_r, clearance=0.3, passes=4):
    """Grow wrap radii until every radial point ray crosses the wrap's
    chord surface at least ``clearance`` outside the point.

    The chord planes of a coarse wrap sag below the smooth field on
    curved features, so a uniform margin is not enough; this inflates
    exactly the columns that need it."""
    wrap_r = wrap_r.copy()
    unit_prox = MeshProximity(wrap_dirs, wrap_faces)
    _, fidx, _ = unit_prox.closest(point_dirs)
    tri = wrap_faces[fidx]  # (N, 3) wrap vertex ids per point
    for _ in range(passes):
        p = wrap_dirs[tri] * wrap_r[tri][:, :, None]  # (N, 3, 3)
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        denom = np.einsum("ij,ij->i", n, point_dirs)
        t = np.einsum("ij,ij->i", n, p[:, 0]) / np.where(denom == 0, 1.0, denom)
        scale = (point_r + clearance) / np.maximum(t, 1e-9)
        deficient = scale > 1.0
        if not deficient.any():
            break
        grow = np.ones(len(wrap_r))
        np.maximum.at(grow, tri[deficient].ravel(),
                      np.repeat(scale[deficient], 3))
        wrap_r *= grow
    return wrap_r


_REGION_CENTERS = {
    "nose": (0, -0.05, 1.0), "brow": (0, 0.34, 0.94), "chin": (0, -0.62, 0.78),
    "lips": (0, -0.36, 0.93), "cheek_left": (-0.55, -0.2, 0.81),
    "cheek_right": (0.55, -0.2, 0.81), "jaw_left": (-0.72, -0.45, 0.53),
    "jaw_right": (0.72, -0.45, 0.53), "eye_left": (-0.32, 0.18, 0.92),
    "eye_right": (0.32, 0.18, 0.92), "cranium": (0, 0.8, -0.2),
    "occiput": (0, 0, -1.0),
}


def _region_name(direction) -> str:
    best, best_dot = "cranium", -2.0
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    for name, c in _REGION_CENTERS.items():
        c = np.asarray(c, float)
        dot = float(d @ (c / np.linalg.norm(c)))
        if dot > best_dot:
            best, best_dot = name, dot
    return best


def _latitude(dirs):
    return np.arcsin(np.clip(dirs[:, 1], -1, 1))


def _azimuth(dirs):
    return np.arctan2(dirs[:, 0], dirs[:, 2])


def _skin_masks(dirs: np.ndarray) -> dict[str, np.ndarray]:
    lat = np.degrees(_latitude(dirs))
    az = np.degrees(_azimuth(dirs))
    front = dirs[:, 2] > 0.15
    mouth_lat = -21.0 - 0.002 * az ** 2
    # bands sized so each lip carries whole triangles at the coarsest
    # resolution (vertex spacing is ~8 degrees at level 0)
    in_mouth_zone = front & (np.abs(az) < 34.0) & (np.abs(lat - mouth_lat) < 12.0)
    masks = {
        "lips_upper": np.flatnonzero(in_mouth_zone & (lat >= mouth_lat)),
        "lips_lower": np.flatnonzero(in_mouth_zone & (lat < mouth_lat)),
        "jaw": np.flatnonzero(front & (lat < -12.0) & (np.abs(az) < 65.0)),
    }
    eyes = np.zeros(len(dirs), bool)
    for sx in (-1, 1):
        c = np.array([sx * 0.30, 0.17, 0.93])
        c /= np.linalg.norm(c)
        eyes |= np.arccos(np.clip(dirs @ c, -1, 1)) < 0.14
    masks["eyes"] = np.flatnonzero(eyes)
    return masks


def _tube_mesh(path: np.ndarray, radii: np.ndarray, n_around: int = 8):
    """Closed tube along a polyline (capped ends): vertices and faces."""
    n = len(path)
    tangents = np.gradient(path, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    # stable frame: choose the least-aligned axis for the first normal
    ref = np.eye(3)[np.argmin(np.abs(tangents[0]))]
    normals = np.zeros_like(tangents)
    normals[0] = np.cross(tangents[0], ref)
    normals[0] /= np.linalg.norm(normals[0])
    for i in range(1, n):  # parallel transport
        b = np.cross(tangents[i - 1], tangents[i])
        nb = np.linalg.norm(b)
        if nb < 1e-12:
            normals[i] = normals[i - 1]
        else:
            b = b / nb
            ang = math.atan2(nb, float(tangents[i - 1] @ tangents[i]))
            k = b
            v = normals[i - 1]
            normals[i] = (v * math.cos(ang) + np.cross(k, v) * math.sin(ang)
                          + k * (k @ v) * (1 - math.cos(ang)))
            normals[i] /= np.linalg.norm(normals[i])
    binormals = np.cross(tangents, normals)

    angs = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    verts = (path[:, None, :]
             + radii[:, None, None] * (np.cos(angs)[None, :, None] * normals[:, None, :]
                                       + np.sin(angs)[None, :, None] * binormals[:, None, :]))
    verts = verts.reshape(-1, 3)
    faces = []
    for i in range(n - 1):
        for j in range(n_around):
            a = i * n_around + j
            b_ = i * n_around + (j + 1) % n_around
            c = (i + 1) * n_around + j
            d = (i + 1) * n_around + (j + 1) % n_around
            faces += [[a, b_, d], [a, d, c]]
    # end caps
    start_center = len(verts)
    verts = np.vstack([verts, path[0], path[-1]])
    end_center = start_center + 1
    for j in range(n_around):
        faces.append([start_center, (j + 1) % n_around, j])
        base = (n - 1) * n_around
        faces.append([end_center, base + j, base + (j + 1) % n_around])
    return np.asarray(verts), np.array(faces, int)


def _jaw_mesh(spec: TemplateSpec, skull_prox_radius) -> tuple[np.ndarray, np.ndarray]:
    """Separate mandible shell: a capped tube swept along the jaw line.

    Deliberately coarse elements: the per-vertex Voronoi areas set the
    bending stiffness of the curvature term, and a bone should out-pull
    the near-hard tissue coupling."""
    t = np.linspace(-1.0, 1.0, 11)
    az = t * np.deg2rad(80.0)
    # the ramus rises to condyles at roughly ear height (the jaw-open
    # hinge line), so rotations about that line move the ends barely
    lat = np.deg2rad(-38.0 + 41.0 * t ** 4)
    dirs = np.stack([np.sin(az) * np.cos(lat), np.sin(lat),
                     np.cos(az) * np.cos(lat)], axis=1)
    radii = (4.8 - 2.2 * t ** 2) * spec.scale
    # recess the sweep so the tube stays clear of the skull wrap
    r = skull_prox_radius(dirs) - radii - 1.0
    path = dirs * r[:, None]
    return _tube_mesh(path, radii, n_around=4)


def generate_synthetic_template(spec: TemplateSpec) -> LayeredHeadModel:
    """Procedural head-like layered model with populated region masks.

    All surfaces are radial fields over nested icospheres, so the three
    wraps share one triangulation and index i is the same prism column
    on each. Raises when the requested offsets collapse a region.
    """
    spec.validate()
    wrap_base = vm.icosphere(2 + spec.level)
    skin_base = vm.icosphere(3 + spec.level)
    wrap_dirs = _unit_dirs(wrap_base)
    skin_dirs = _unit_dirs(skin_base)

    skin_r = _skin_radius(skin_dirs, spec)
    if (skin_r <= 5.0).any():
        raise ValidationError("skin field collapsed (offsets/amplitudes too large)")
    skin = vm.TriangleMesh(skin_dirs * skin_r[:, None], skin_base.faces,
                           region_masks=_skin_masks(skin_dirs))

    # Columns collapse when the requested offsets dig past the feature
    # geometry; report the worst region before any clamping hides it.
    unclamped = (_ellipsoid_radius(wrap_dirs, spec.radii) * spec.scale
                 - (spec.soft_offset + spec.muscle_offset) * spec.scale)
    if (unclamped < 15.0).any():
        worst = wrap_dirs[int(np.argmin(unclamped))]
        raise ValidationError(
            f"offsets too large: skull field collapses in region "
            f"{_region_name(worst)!r}")

    margin = _wrap_margin(spec.level, float(skin_r.mean()))
    sw_r = _skin_radius(wrap_dirs, spec) + margin
    sw_r = _inflate_wrap_over_points(wrap_dirs, wrap_base.faces, sw_r,
                                     skin_dirs, skin_r)
    skull_r_w = _skull_radius(wrap_dirs, spec, _skin_radius(wrap_dirs, spec))
    bw_r = skull_r_w + 1.2 * spec.scale
    gap = sw_r - bw_r
    bad = gap < 3.0
    if bad.any():
        worst = wrap_dirs[int(np.argmin(gap))]
        raise ValidationError(f"offsets too large: soft+muscle column "
                              f"collapses in region {_region_name(worst)!r}")

    # Raw inner wraps project the shared sphere parametrization radially
    # onto each layer's own field, the analog of shrink-wrapping one
    # sphere per anatomy. The resulting prism columns are skewed against
    # the layer geometry; straightening them is the massage's job.
    skin_wrap = vm.TriangleMesh(wrap_dirs * sw_r[:, None], wrap_base.faces)
    mw_r = bw_r + np.clip(0.45 * gap, 2.0, np.maximum(gap - 2.0, 2.0))
    muscle_wrap = vm.TriangleMesh(wrap_dirs * mw_r[:, None], wrap_base.faces)
    skull_wrap = vm.TriangleMesh(wrap_dirs * bw_r[:, None], wrap_base.faces)

    # skull: cranium shell (recessed in the jaw zone) + separate mandible
    cr_base = vm.icosphere(2 + spec.level)
    cr_dirs = _unit_dirs(cr_base)
    cr_skin_r = _skin_radius(cr_dirs, spec)
    cr_r = _skull_radius(cr_dirs, spec, cr_skin_r) - 1.2 * spec.scale
    jaw_zone = _gaussian_bump(cr_dirs, (0, -0.55, 0.72), 0.42)
    cr_r = cr_r - 7.0 * spec.scale * jaw_zone
    cranium_verts = cr_dirs * cr_r[:, None]
    n_cr = len(cranium_verts)

    def skull_field(d):
        return (_skull_radius(d, spec, _skin_radius(d, spec)) - 1.2 * spec.scale)

    jaw_verts, jaw_faces = _jaw_mesh(spec, skull_field)
    skull_verts = np.vstack([cranium_verts, jaw_verts])
    skull_faces = np.vstack([cr_base.faces, jaw_faces + n_cr])

    cr_lat = np.degrees(_latitude(cr_dirs))
    cr_az = np.degrees(_azimuth(cr_dirs))
    teeth_upper = np.flatnonzero((cr_dirs[:, 2] > 0.3) & (np.abs(cr_az) < 30)
                                 & (cr_lat > -34) & (cr_lat < -16))
    jaw_top = n_cr + np.flatnonzero(
        (jaw_verts[:, 1] > np.percentile(jaw_verts[:, 1], 60))
        & (jaw_verts[:, 2] > 0.3 * jaw_verts[:, 2].max()))
    skull_masks = {
        "cranium": np.arange(n_cr),
        "jaw": np.arange(n_cr, len(skull_verts)),
        "teeth": np.concatenate([teeth_upper, jaw_top]),
    }
    skull = vm.TriangleMesh(skull_verts, skull_faces, region_masks=skull_masks)

    mu_base = vm.icosphere(2 + spec.level)
    mu_dirs = _unit_dirs(mu_base)
    mu_skin_r = _skin_radius(mu_dirs, spec)
    mu_bw = _skull_radius(mu_dirs, spec, mu_skin_r) + 1.2 * spec.scale
    mu_sw = mu_skin_r + margin
    mu_mw = mu_bw + np.clip(0.45 * (mu_sw - mu_bw), 2.0, None)
    muscles = vm.TriangleMesh(mu_dirs * (0.5 * (mu_bw + mu_mw))[:, None], mu_base.faces)

    lhm = LayeredHeadModel(skin=skin, skull=skull, muscles=muscles,
                           skin_wrap=skin_wrap, skull_wrap=skull_wrap,
                           muscle_wrap=muscle_wrap,
                           diagnostics={"spec": asdict(spec)})
    validate_lhm(lhm)
    return lhm


def generate_synthetic_skin(spec: TemplateSpec) -> vm.TriangleMesh:
    """Just the skin surface of a synthetic identity (fast path for
    dataset generation, which gets its anatomy from the fitting stage)."""
    spec.validate()
    skin_base = vm.icosphere(3 + spec.level)
    dirs = _unit_dirs(skin_base)
    r = _skin_radius(dirs, spec)
    return vm.TriangleMesh(dirs * r[:, None], skin_base.faces,
                           region_masks=_skin_masks(dirs))


# ----------------------------------------------------------------------------
# Layer massage


def rect_angle_residual(layer_verts: np.ndarray, skin_verts: np.ndarray,
                        edges: np.ndarray) -> np.ndarray:
    """Per-quad summed squared deviation (degrees^2) of the four prism
    side-quad angles from 90 degrees. Quads are (x_i, x_j, s_j, s_i)."""
    xi, xj = layer_verts[edges[:, 0]], layer_verts[edges[:, 1]]
    si, sj = skin_verts[edges[:, 0]], skin_verts[edges[:, 1]]

    def angle(at, a, b):
        u = a - at
        v = b - at
        cos = np.einsum("ij,ij->i", u, v) / np.maximum(
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1), 1e-30)
        return np.degrees(np.arccos(np.clip(cos, -1, 1)))

    dev = np.stack([
        angle(xj, xi, sj) - 90.0,   # at x_j between x_i and s_j
        angle(xi, xj, si) - 90.0,   # at x_i
        angle(sj, si, xj) - 90.0,   # at s_j
        angle(si, sj, xi) - 90.0,   # at s_i
    ], axis=1)
    return (dev ** 2).sum(axis=1)


def _massage_one_layer(layer: vm.TriangleMesh, skin_wrap: vm.TriangleMesh,
                       weights: ps.SolverWeights, outer: int, inner: int):
    n = layer.n_vertices
    edges = layer.edges()
    full_init = np.vstack([layer.vertices, skin_wrap.vertices])
    quads = np.column_stack([edges[:, 0], edges[:, 1],
                             n + edges[:, 1], n + edges[:, 0]])
    cs = ps.ConstraintSet(2 * n)
    cs.add_rectangularity(quads, weights.w_rect)
    cs.add_targets(np.arange(n), layer.vertices, weights.w_dist)
    pins = (np.arange(n, 2 * n), skin_wrap.vertices)
    state = ps.assemble_and_factorize(cs, pins=pins, initial_positions=full_init)

    original = MeshProximity(layer.vertices, layer.faces)
    for _ in range(outer):
        cp, _, _ = original.closest(state.positions[:n])
        cs.set_target_positions(cp)
        ps.solve(state, inner)

    moved = state.positions[:n]
    # contract: stay within the Hausdorff budget of the original shape
    h = hausdorff_proxy(moved, layer.faces, layer.vertices, layer.faces)
    if h > HAUSDORFF_BUDGET:
        # blend back is not exactly linear in the proxy; keep a margin
        moved = layer.vertices + (moved - layer.vertices) * (0.995 * HAUSDORFF_BUDGET / h)
    return moved


def massage_layers(lhm: LayeredHeadModel,
                   weights: ps.SolverWeights | None = None,
                   outer_iterations: int = 30,
                   inner_iterations: int = 10) -> LayeredHeadModel:
    """Rectangularize the prism side quads of the skull and muscle wraps
    while staying close to their original shapes.

    Each wrap is optimized independently against the (fixed) skin wrap:
    a rectangularity term on every prism side quad plus re-anchored
    closest-point targets standing in for the two-sided surface distance
    (correspondences refreshed each outer pass). A wrap that would
    violate layer ordering is reverted and reported.
    """
    weights = weights or ps.SolverWeights()
    edges = lhm.skull_wrap.edges()
    diag = dict(lhm.diagnostics)

    new_wraps = {}
    for name, layer in (("skull_wrap", lhm.skull_wrap),
                        ("muscle_wrap", lhm.muscle_wrap)):
        before = rect_angle_residual(layer.vertices, lhm.skin_wrap.vertices, edges)
        moved = _massage_one_layer(layer, lhm.skin_wrap, weights,
                                   outer_iterations, inner_iterations)
        after = rect_angle_residual(moved, lhm.skin_wrap.vertices, edges)
        diag[f"{name}_residual_before"] = float(before.mean())
        diag[f"{name}_residual_after"] = float(after.mean())
        diag[f"{name}_hausdorff"] = hausdorff_proxy(
            moved, layer.faces, layer.vertices, layer.faces)
        new_wraps[name] = layer.with_vertices(moved)

    candidate = LayeredHeadModel(
        skin=lhm.skin, skull=lhm.skull, muscles=lhm.muscles,
        skin_wrap=lhm.skin_wrap, skull_wrap=new_wraps["skull_wrap"],
        muscle_wrap=new_wraps["muscle_wrap"], diagnostics=diag)
    try:
        validate_lhm(candidate)
    except ValidationError as exc:
        warnings.warn(f"massage introduced a layer violation, reverting: {exc}")
        diag["massage_reverted"] = str(exc)
        return LayeredHeadModel(skin=lhm.skin, skull=lhm.skull, muscles=lhm.muscles,
                                skin_wrap=lhm.skin_wrap, skull_wrap=lhm.skull_wrap,
                                muscle_wrap=lhm.muscle_wrap, diagnostics=diag)
    return candidate


# ----------------------------------------------------------------------------
# Prism tetrahedralization

# Prism rotations bringing each position to vertex 0 while preserving
# the bottom-triangle orientation convention.
_PRISM_PERMS = {
    0: (0, 1, 2, 3, 4, 5),
    1: (1, 2, 0, 4, 5, 3),
    2: (2, 0, 1, 5, 3, 4),
    3: (3, 5, 4, 0, 2, 1),
    4: (4, 3, 5, 1, 0, 2),
    5: (5, 4, 3, 2, 1, 0),
}


def _split_prism(g: np.ndarray) -> list[tuple]:
    """Split one prism (bottom g[0:3], top g[3:6], g[i+3] above g[i])
    into 3 tets with quad diagonals through each quad's smallest global
    index, which makes neighboring prisms conform."""
    rot = _PRISM_PERMS[int(np.argmin(g))]
    h = [g[i] for i in rot]
    if min(h[1], h[5]) < min(h[2], h[4]):
        tets = [(h[0], h[1], h[2], h[5]), (h[0], h[1], h[5], h[4]),
                (h[0], h[4], h[5], h[3])]
    else:
        tets = [(h[0], h[1], h[2], h[4]), (h[0], h[4], h[2], h[5]),
                (h[0], h[4], h[5], h[3])]
    return tets


def tetrahedralize_prisms(outer_wrap: vm.TriangleMesh,
                          inner_wrap: vm.TriangleMesh) -> vm.TetMesh:
    """Split the prisms between two registered wraps into 3 tets each.

    Vertex layout of the result: outer wrap vertices first, then inner
    wrap vertices. Raises on inverted prisms (non-positive tet volume),
    naming the prism.
    """
    if (outer_wrap.n_vertices != inner_wrap.n_vertices
            or not (outer_wrap.faces == inner_wrap.faces).all()):
        raise ValidationError("wraps must share their triangulation")
    n = outer_wrap.n_vertices
    verts = np.vstack([outer_wrap.vertices, inner_wrap.vertices])
    tets = []
    for i, j, k in outer_wrap.faces:
        # bottom = inner triangle (indices offset by n), top = outer
        g = np.array([n + i, n + j, n + k, i, j, k])
        tets.extend(_split_prism(g))
    tets = np.array(tets, int)
    tm = vm.TetMesh(verts, tets)
    bad = np.flatnonzero(~(tm.rest_volumes > vm.DEGENERATE_TET_VOLUME))
    if bad.size:
        prisms = sorted(set(int(b) // 3 for b in bad))
        raise ValidationError(f"inverted prisms: {prisms[:20]}")
    return tm


def build_tissue_meshes(lhm: LayeredHeadModel) -> LayeredHeadModel:
    """Construct the soft- and muscle-tissue tet meshes and embed the
    skin surface barycentrically into the soft-tissue prisms."""
    soft = tetrahedralize_prisms(lhm.skin_wrap, lhm.muscle_wrap)
    muscle = tetrahedralize_prisms(lhm.muscle_wrap, lhm.skull_wrap)

    emb_tets, emb_w, clamped = _embed_points(lhm.skin.vertices, soft)
    if clamped:
        warnings.warn(f"{clamped} skin vertices embedded with clamped "
                      f"barycentrics (outside every prism)")
    diag = dict(lhm.diagnostics)
    diag["embedding_clamped"] = clamped
    return LayeredHeadModel(
        skin=lhm.skin, skull=lhm.skull, muscles=lhm.muscles,
        skin_wrap=lhm.skin_wrap, skull_wrap=lhm.skull_wrap,
        muscle_wrap=lhm.muscle_wrap, soft_tets=soft, muscle_tets=muscle,
        embedding_tets=emb_tets, embedding_weights=emb_w, diagnostics=diag)


def _embed_points(points: np.ndarray, tets: vm.TetMesh, k: int = 48):
    from scipy.spatial import cKDTree
    corners = tets.vertices[tets.tets]
    centroids = corners.mean(axis=1)
    tree = cKDTree(centroids)
    k = min(k, tets.n_tets)
    _, cand = tree.query(points, k=k)
    if k == 1:
        cand = cand[:, None]

    cand_corners = tets.vertices[tets.tets[cand]]  # (N, k, 4, 3)
    v0 = cand_corners[:, :, 0]
    e = np.stack([cand_corners[:, :, 1] - v0, cand_corners[:, :, 2] - v0,
                  cand_corners[:, :, 3] - v0], axis=3)  # (N, k, 3, 3)
    rhs = (points[:, None, :] - v0)[..., None]
    try:
        beta = np.linalg.solve(e, rhs)[..., 0]
    except np.linalg.LinAlgError:
        beta = np.linalg.lstsq(e.reshape(-1, 3, 3)[0], rhs.reshape(-1, 3)[0],
                               rcond=None)[0][None, None]
    bary = np.concatenate([1 - beta.sum(axis=2, keepdims=True), beta], axis=2)
    worst = bary.min(axis=2)  # (N, k): most negative coordinate
    best = np.argmax(worst, axis=1)
    rows = np.arange(len(points))
    chosen = cand[rows, best]
    w = bary[rows, best]
    clamped = int((worst[rows, best] < -1e-9).sum())
    w = np.clip(w, 0.0, None)
    w = w / w.sum(axis=1, keepdims=True)
    return chosen, w, clamped


# ----------------------------------------------------------------------------
# Directory persistence

_MESH_FILES = {
    "skin": "skin.obj", "skull": "skull.obj", "muscles": "muscles.obj",
    "skin_wrap": "skin_wrap.obj", "skull_wrap": "skull_wrap.obj",
    "muscle_wrap": "muscle_wrap.obj",
}


def save_lhm(lhm: LayeredHeadModel, directory, manifest_extra: dict | None = None):
    import os
    os.makedirs(directory, exist_ok=True)
    for attr, fname in _MESH_FILES.items():
        vm.write_obj(getattr(lhm, attr), os.path.join(directory, fname))
    masks = {}
    for attr in ("skin", "skull", "muscles"):
        for name, idx in getattr(lhm, attr).region_masks.items():
            masks[f"{attr}.{name}"] = idx
    vm.write_masks(masks, os.path.join(directory, "masks.txt"))
    if lhm.soft_tets is not None:
        vm.write_tet(lhm.soft_tets, os.path.join(directory, "soft_tissue.tet"))
        vm.write_tet(lhm.muscle_tets, os.path.join(directory, "muscle_tissue.tet"))
        with open(os.path.join(directory, "embedding.txt"), "w") as fh:
            fh.write(f"embedding {len(lhm.embedding_tets)}\n")
            for t, w in zip(lhm.embedding_tets, lhm.embedding_weights):
                fh.write(f"e {t} " + " ".join(repr(float(x)) for x in w) + "\n")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("format = lhm 1\n")
        fh.write("correspondence = wrap vertex i is the same prism column "
                 "on skin_wrap, muscle_wrap, skull_wrap\n")
        for key, (nv, nf) in FULL_SCALE_REFERENCE.items():
            fh.write(f"reference_full_scale.{key} = {nv} {nf}\n")
        for key, value in (manifest_extra or {}).items():
            fh.write(f"{key} = {value}\n")


def load_lhm(directory) -> LayeredHeadModel:
    import os
    meshes = {attr: vm.read_obj(os.path.join(directory, fname))
              for attr, fname in _MESH_FILES.items()}
    mask_path = os.path.join(directory, "masks.txt")
    if os.path.exists(mask_path):
        masks = vm.read_masks(mask_path)
        per_mesh: dict[str, dict] = {"skin": {}, "skull": {}, "muscles": {}}
        for name, idx in masks.items():
            comp, _, mask_name = name.partition(".")
            if comp in per_mesh:
                per_mesh[comp][mask_name] = idx
        for comp, m in per_mesh.items():
            if m:
                meshes[comp] = vm.TriangleMesh(meshes[comp].vertices,
                                               meshes[comp].faces, region_masks=m)
    lhm = LayeredHeadModel(**meshes)
    soft_path = os.path.join(directory, "soft_tissue.tet")
    if os.path.exists(soft_path):
        soft = vm.read_tet(soft_path)
        muscle = vm.read_tet(os.path.join(directory, "muscle_tissue.tet"))
        emb_t, emb_w = _read_embedding(os.path.join(directory, "embedding.txt"))
        lhm = LayeredHeadModel(skin=lhm.skin, skull=lhm.skull, muscles=lhm.muscles,
                               skin_wrap=lhm.skin_wrap, skull_wrap=lhm.skull_wrap,
                               muscle_wrap=lhm.muscle_wrap, soft_tets=soft,
                               muscle_tets=muscle, embedding_tets=emb_t,
                               embedding_weights=emb_w)
    return lhm


def _read_embedding(path):
    tets, weights = [], []
    with open(path) as fh:
        fh.readline()  # header line
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "e":
                tets.append(int(parts[1]))
                weights.append([float(x) for x in parts[2:6]])
    return np.array(tets, int), np.array(weights, float)
