"""Quasi-static facial simulation: the anatomically constrained inverse
model (skin target -> interior deformation + skull pose), the forward
model (interior deformation -> skin), connecting tets, and the
lip/teeth collision pass.

Both models run on one global node table over the fitted layered head:
wrap vertices and skull vertices are free unknowns; skin-surface
vertices are barycentrically slaved into the soft-tissue tets, so every
skin-side energy acts on the volumetric unknowns through that coupling.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import mesh as vm
from . import solver as ps
from .errors import FormatError, SolverError, ValidationError
from .lhm import LayeredHeadModel
from .spatial import MeshProximity

STATE_MAGIC = b"VBSV1"
COLLISION_BAND = 3.0       # mm, detection depth behind the opposing surface
CONTACT_TOLERANCE = 0.1    # mm, allowed gap at resolved contacts
MIN_TET_QUALITY = 1e-3     # volume / longest_edge^3 for connecting tets


@dataclass
class VolumetricState:
    """Per-tet deformation gradients for soft and muscle tissue plus the
    rigidly moved skull: the volumetric payload of one expression."""

    soft_gradients: vm.DeformationGradientField
    muscle_gradients: vm.DeformationGradientField
    skull_pose: np.ndarray  # (N_skull, 3)

    @classmethod
    def identity(cls, lhm: LayeredHeadModel) -> "VolumetricState":
        return cls(
            soft_gradients=vm.DeformationGradientField(
                np.tile(np.eye(3), (lhm.soft_tets.n_tets, 1, 1))),
            muscle_gradients=vm.DeformationGradientField(
                np.tile(np.eye(3), (lhm.muscle_tets.n_tets, 1, 1))),
            skull_pose=lhm.skull.vertices.copy())


def save_state(state: VolumetricState, path) -> None:
    """Versioned binary: magic, counts, row-major gradients, skull."""
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<3i", len(state.soft_gradients),
                             len(state.muscle_gradients), len(state.skull_pose)))
        fh.write(np.ascontiguousarray(state.soft_gradients.gradients, "<f8").tobytes())
        fh.write(np.ascontiguousarray(state.muscle_gradients.gradients, "<f8").tobytes())
        fh.write(np.ascontiguousarray(state.skull_pose, "<f8").tobytes())


def load_state(path) -> VolumetricState:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != STATE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {STATE_MAGIC!r}")
        n_s, n_m, n_b = struct.unpack("<3i", fh.read(12))

        def arr(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            if data.size != count:
                raise FormatError(f"{path}: truncated state file")
            return data.reshape(shape).copy()

        return VolumetricState(
            soft_gradients=vm.DeformationGradientField(arr((n_s, 3, 3))),
            muscle_gradients=vm.DeformationGradientField(arr((n_m, 3, 3))),
            skull_pose=arr((n_b, 3)))


@dataclass
class ConnectingTets:
    """Auxiliary tets binding the skull into the muscle tissue and the
    eyes onto the skull, indexed in the simulator's global node table."""

    muscle_to_skull: np.ndarray   # (K1, 4)
    eyes_to_skull: np.ndarray     # (K2, 4)
    rest_inverse: np.ndarray      # (K1+K2, 3, 3)

    @property
    def tets(self) -> np.ndarray:
        return np.vstack([self.muscle_to_skull, self.eyes_to_skull])


def _pick_connecting_tet(anchor, candidates, positions):
    """Closest candidate triple forming a non-degenerate tet with the
    anchor. Triples are tried in nearest-first rank order, so coplanar
    (or collinear) triples get replaced by next-nearest candidates."""
    from itertools import combinations
    for triple in combinations(range(len(candidates)), 3):
        trial = [int(candidates[i]) for i in triple]
        corners = np.vstack([positions[anchor][None], positions[trial]])
        e = np.column_stack([corners[1] - corners[0], corners[2] - corners[0],
                             corners[3] - corners[0]])
        vol = abs(np.linalg.det(e)) / 6.0
        longest = max(np.linalg.norm(corners[i] - corners[j])
                      for i in range(4) for j in range(i + 1, 4))
        if vol / max(longest, 1e-9) ** 3 > MIN_TET_QUALITY:
            return trial
    raise ValidationError(
        f"fewer than 3 usable connecting-tet candidates near node {anchor}")


def _orient_positive(tets: np.ndarray, positions: np.ndarray) -> np.ndarray:
    p = positions[tets]
    vol = np.linalg.det(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0],
                                  p[:, 3] - p[:, 0]], axis=2)) / 6.0
    out = tets.copy()
    flip = vol < 0
    out[flip, 2], out[flip, 3] = tets[flip, 3], tets[flip, 2]
    return out


class NodeLayout:
    """Global node table: skin wrap, muscle wrap, skull wrap, skull mesh,
    then the (slaved) skin mesh."""

    def __init__(self, lhm: LayeredHeadModel):
        n_w = lhm.skin_wrap.n_vertices
        self.n_wrap = n_w
        self.skin_wrap = np.arange(0, n_w)
        self.muscle_wrap = np.arange(n_w, 2 * n_w)
        self.skull_wrap = np.arange(2 * n_w, 3 * n_w)
        self.skull = np.arange(3 * n_w, 3 * n_w + lhm.skull.n_vertices)
        skin_start = 3 * n_w + lhm.skull.n_vertices
        self.skin = np.arange(skin_start, skin_start + lhm.skin.n_vertices)
        self.n_master = skin_start
        self.n_total = skin_start + lhm.skin.n_vertices

    def rest_positions(self, lhm: LayeredHeadModel) -> np.ndarray:
        return np.vstack([lhm.skin_wrap.vertices, lhm.muscle_wrap.vertices,
                          lhm.skull_wrap.vertices, lhm.skull.vertices,
                          lhm.skin.vertices])


def build_connecting_tets(lhm: LayeredHeadModel) -> ConnectingTets:
    """Connect each skull vertex to its 3 closest muscle-tet-mesh
    vertices and each eye vertex to its 3 closest skull vertices.

    Closest-vertex queries run on a spatial index over the rest
    positions; coplanar candidate triples are replaced by next-nearest
    candidates.
    """
    layout = NodeLayout(lhm)
    rest = layout.rest_positions(lhm)

    # muscle tet mesh vertices = muscle wrap + skull wrap nodes
    m_nodes = np.concatenate([layout.muscle_wrap, layout.skull_wrap])
    tree_m = cKDTree(rest[m_nodes])
    k = min(10, len(m_nodes))
    _, cand = tree_m.query(rest[layout.skull], k=k)
    muscle_to_skull = []
    for row, skull_node in enumerate(layout.skull):
        picks = _pick_connecting_tet(skull_node, m_nodes[cand[row]], rest)
        muscle_to_skull.append([skull_node] + picks)
    muscle_to_skull = _orient_positive(np.array(muscle_to_skull, int), rest)

    eye_idx = lhm.skin.region_masks.get("eyes")
    if eye_idx is None or len(eye_idx) == 0:
        raise ValidationError("lhm skin mesh has no 'eyes' region mask")
    tree_b = cKDTree(rest[layout.skull])
    k = min(10, len(layout.skull))
    _, cand = tree_b.query(rest[layout.skin[eye_idx]], k=k)
    eyes_to_skull = []
    for row, eye_node in enumerate(layout.skin[eye_idx]):
        picks = _pick_connecting_tet(eye_node, layout.skull[cand[row]], rest)
        eyes_to_skull.append([eye_node] + picks)
    eyes_to_skull = _orient_positive(np.array(eyes_to_skull, int), rest)

    all_tets = np.vstack([muscle_to_skull, eyes_to_skull])
    edges = vm.tet_edge_matrices(rest, all_tets)
    vols = np.linalg.det(edges) / 6.0
    if (vols <= vm.DEGENERATE_TET_VOLUME).any():
        raise ValidationError("zero-volume connecting tets")
    return ConnectingTets(muscle_to_skull=muscle_to_skull,
                          eyes_to_skull=eyes_to_skull,
                          rest_inverse=np.linalg.inv(edges))


CONTACT_OFFSET = 0.05  # mm outside the surface, cancels the static residual


def _push_update(signed: np.ndarray, push: np.ndarray) -> np.ndarray:
    """Asymmetric feedback on the contact push: drive penetrating
    vertices out aggressively, relax over-separated ones gently."""
    out = np.where(signed < 0, -signed + 0.5 * CONTACT_OFFSET, 0.0)
    over = signed > 0.8 * CONTACT_TOLERANCE
    out = np.where(over, -np.minimum(0.5 * (signed - 0.5 * CONTACT_TOLERANCE), push), out)
    return out


def _contact_targets(pairs, contact_pair: dict, idx: np.ndarray,
                     push: np.ndarray | None = None):
    """Re-anchored contact targets for the persistent contact set: the
    closest opposing-surface point plus the contact offset plus an
    optional per-vertex extra outward push. Returns (targets, signed)."""
    targets = np.empty((len(idx), 3))
    signed_out = np.empty(len(idx))
    order = {int(v): j for j, v in enumerate(idx)}
    by_pair: dict[int, list] = {}
    for v, k in contact_pair.items():
        by_pair.setdefault(k, []).append(int(v))
    for k, verts in by_pair.items():
        pair = pairs[k]
        prox = MeshProximity(pair[3], pair[2])
        signed, cp, fidx = prox.signed_distance(pair[1][np.array(verts)])
        normals = prox.face_normals[fidx]
        for j, v in enumerate(verts):
            extra = push[order[v]] if push is not None else 0.0
            targets[order[v]] = cp[j] + (CONTACT_OFFSET + extra) * normals[j]
            signed_out[order[v]] = signed[j]
    return targets, signed_out


def region_faces(mesh: vm.TriangleMesh, mask_name: str, min_in: int = 3,
                 exclude: str | None = None) -> np.ndarray:
    """Faces with at least ``min_in`` vertices in a region mask, none in
    the excluded region."""
    mask = set(mesh.mask(mask_name).tolist())
    banned = set(mesh.mask(exclude).tolist()) if exclude else set()
    keep = [i for i, f in enumerate(mesh.faces)
            if sum(int(v) in mask for v in f) >= min_in
            and not any(int(v) in banned for v in f)]
    return mesh.faces[keep]


def _pair_signed(verts, vx, faces, fx):
    prox = MeshProximity(fx, faces)
    signed, cp, fidx = prox.signed_distance(vx[verts])
    return signed, cp + CONTACT_OFFSET * prox.face_normals[fidx]


def best_fit_rigid(rest: np.ndarray, deformed: np.ndarray):
    """Rotation R and translation t minimizing ||R rest + t - deformed||."""
    c_r = rest.mean(axis=0)
    c_d = deformed.mean(axis=0)
    h = (deformed - c_d).T @ (rest - c_r)
    r = vm.closest_rotation(h)
    t = c_d - r @ c_r
    return r, t


class HeadSimulator:
    """Prefactorized inverse and forward models over one fitted head.

    The factorizations are built lazily on first use and reused across
    calls (constraint targets only enter the right-hand side).
    """

    def __init__(self, lhm: LayeredHeadModel,
                 weights: ps.SolverWeights | None = None,
                 n_iterations: int = 6,
                 resolve_collisions: bool = True):
        if lhm.soft_tets is None:
            raise ValidationError("simulator needs built tissue meshes")
        self.lhm = lhm
        self.weights = weights or ps.SolverWeights()
        self.weights.validate()
        self.n_iterations = n_iterations
        self.collisions_enabled = resolve_collisions
        self.layout = NodeLayout(lhm)
        self.rest = self.layout.rest_positions(lhm)
        self.connecting = build_connecting_tets(lhm)
        self.diagnostics: dict = {}
        self._inverse_state = None
        self._forward_state = None
        self._forward_cs = None
        self._inverse_cs = None
        self._reduction = self._build_reduction()

    # -- plumbing ---------------------------------------------------------

    def _build_reduction(self) -> ps.Reduction:
        lay = self.layout
        n_m = lay.n_master
        rows, cols, vals = [np.arange(n_m)], [np.arange(n_m)], [np.ones(n_m)]
        emb_corners = self.lhm.soft_tets.tets[self.lhm.embedding_tets]  # (N_S, 4)
        # soft-tet local vertex ids coincide with global ids (wraps first)
        for k in range(4):
            rows.append(lay.skin)
            cols.append(emb_corners[:, k])
            vals.append(self.lhm.embedding_weights[:, k])
        mat = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.n_total, n_m)).tocsr()
        return ps.Reduction(matrix=mat, constant=None, master_of=np.arange(n_m))

    def _soft_tet_ids(self) -> np.ndarray:
        return self.lhm.soft_tets.tets  # already global

    def _muscle_tet_ids(self) -> np.ndarray:
        return self.lhm.muscle_tets.tets + self.layout.n_wrap

    def _skin_tri_rest(self):
        faces = self.lhm.skin.faces
        dm2inv = np.array([ps.triangle_rest_inverse(self.lhm.skin.vertices[f])
                           for f in faces])
        return self.layout.skin[faces], dm2inv

    def _skull_tri_rest(self):
        faces = self.lhm.skull.faces
        dm2inv = np.array([ps.triangle_rest_inverse(self.lhm.skull.vertices[f])
                           for f in faces])
        return self.layout.skull[faces], dm2inv

    def _add_common_anatomy(self, cs: ps.ConstraintSet):
        w = self.weights
        cs.add_tet_volume(self.connecting.tets, self.connecting.rest_inverse, w.w_con)
        cs.add_tet_strain(self.connecting.tets, self.connecting.rest_inverse, w.w_con)

    def _inverse_constraints(self) -> ps.ConstraintSet:
        w = self.weights
        lhm = self.lhm
        cs = ps.ConstraintSet(self.layout.n_total)
        cs.add_tet_volume(self._soft_tet_ids(), lhm.soft_tets.rest_inverse_edges,
                          w.w_soft * w.w_vol)
        cs.add_tet_strain(self._soft_tet_ids(), lhm.soft_tets.rest_inverse_edges,
                          w.w_soft * w.w_str)
        cs.add_tet_volume(self._muscle_tet_ids(), lhm.muscle_tets.rest_inverse_edges,
                          w.w_muscle * w.w_vol)
        tri_idx, dm2inv = self._skin_tri_rest()
        cs.add_tri_strain(tri_idx, dm2inv, w.w_skin)
        # skull non-deformability is near-hard: the block weight composes
        # with the strain weight (10 * 1e2), unlike the soft skin block
        sk_idx, sk_dm2inv = self._skull_tri_rest()
        cs.add_tri_strain(sk_idx, sk_dm2inv, w.w_skull * w.w_str)
        lap = vm.cotangent_laplacian(lhm.skull)
        w_csr = lap.weights.tocsr()
        elements, row_weights = [], []
        for i in range(lhm.skull.n_vertices):
            cols = w_csr.indices[w_csr.indptr[i]:w_csr.indptr[i + 1]]
            elements.append(self.layout.skull[cols])
            row_weights.append(w_csr.data[w_csr.indptr[i]:w_csr.indptr[i + 1]])
        cs.add_curvature(elements, row_weights, lap.rest_laplacians,
                         lap.voronoi_areas, w.w_skull)
        self._add_common_anatomy(cs)
        # soft Dirichlet targets toward the expression; updated per call
        cs.add_targets(self.layout.skin, lhm.skin.vertices, w.w_inv)
        return cs

    def _forward_constraints(self) -> ps.ConstraintSet:
        w = self.weights
        lhm = self.lhm
        cs = ps.ConstraintSet(self.layout.n_total)
        eye = np.tile(np.eye(3), (lhm.soft_tets.n_tets, 1, 1))
        cs.add_dg_target(self._soft_tet_ids(), lhm.soft_tets.rest_inverse_edges,
                         eye, 1.0)
        eye_m = np.tile(np.eye(3), (lhm.muscle_tets.n_tets, 1, 1))
        cs.add_dg_target(self._muscle_tet_ids(), lhm.muscle_tets.rest_inverse_edges,
                         eye_m, 1.0)
        self._add_common_anatomy(cs)
        cs.add_targets(self.layout.skull, lhm.skull.vertices, w.w_tar)
        return cs

    def _get_state(self, which: str) -> ps.SolverState:
        if which == "inverse":
            if self._inverse_state is None:
                self._inverse_cs = self._inverse_constraints()
                self._inverse_state = ps.assemble_and_factorize(
                    self._inverse_cs, reduction=self._reduction,
                    initial_positions=self.rest)
            return self._inverse_state
        if self._forward_state is None:
            self._forward_cs = self._forward_constraints()
            self._forward_state = ps.assemble_and_factorize(
                self._forward_cs, reduction=self._reduction,
                initial_positions=self.rest)
        return self._forward_state

    # -- models -----------------------------------------------------------

    def inverse(self, target_skin: np.ndarray,
                energy_log: list | None = None):
        """Fit interior deformation and skull pose to a (possibly
        implausible) target expression surface.

        Returns (VolumetricState, plausible_skin). The solved skull is
        rigidified per bone group before entering the state.
        """
        target_skin = np.asarray(target_skin, float).reshape(-1, 3)
        if len(target_skin) != self.lhm.skin.n_vertices:
            raise ValidationError("target skin has the wrong vertex count")
        state = self._get_state("inverse")
        self._inverse_cs.set_target_positions(target_skin)
        state.positions = self.rest.copy()
        try:
            x = ps.solve(state, self.n_iterations, energy_log=energy_log)
        except SolverError as exc:
            raise SolverError(f"inverse model diverged: {exc}") from None

        if self.collisions_enabled:
            x = self._collision_pass(state, self._inverse_cs, energy_log)

        lay = self.layout
        soft_f = vm.tet_deformation_gradients(
            self.lhm.soft_tets.rest_inverse_edges, x, self._soft_tet_ids())
        muscle_f = vm.tet_deformation_gradients(
            self.lhm.muscle_tets.rest_inverse_edges, x, self._muscle_tet_ids())

        skull_solved = x[lay.skull]
        skull_pose = np.empty_like(skull_solved)
        rms = {}
        for group in ("jaw", "cranium"):
            idx = self.lhm.skull.mask(group)
            r, t = best_fit_rigid(self.lhm.skull.vertices[idx], skull_solved[idx])
            rigid = self.lhm.skull.vertices[idx] @ r.T + t
            skull_pose[idx] = rigid
            rms[group] = float(np.sqrt(((rigid - skull_solved[idx]) ** 2).sum(axis=1).mean()))
        self.diagnostics["skull_rigid_rms"] = rms

        plausible = x[lay.skin].copy()
        vstate = VolumetricState(
            soft_gradients=vm.DeformationGradientField(soft_f),
            muscle_gradients=vm.DeformationGradientField(muscle_f),
            skull_pose=skull_pose)
        return vstate, plausible

    def forward(self, state: VolumetricState,
                energy_log: list | None = None) -> np.ndarray:
        """Reconstruct the skin surface from a volumetric state."""
        if len(state.soft_gradients) != self.lhm.soft_tets.n_tets:
            raise ValidationError("soft gradient count mismatch")
        if len(state.muscle_gradients) != self.lhm.muscle_tets.n_tets:
            raise ValidationError("muscle gradient count mismatch")
        sstate = self._get_state("forward")
        cs = self._forward_cs
        n_soft = self.lhm.soft_tets.n_tets
        cs.dg_targets[:n_soft] = state.soft_gradients.gradients
        cs.dg_targets[n_soft:] = state.muscle_gradients.gradients
        cs.set_target_positions(state.skull_pose)
        sstate.positions = self.rest.copy()
        try:
            x = ps.solve(sstate, self.n_iterations, energy_log=energy_log)
        except SolverError as exc:
            raise SolverError(f"forward model diverged: {exc}") from None
        if self.collisions_enabled:
            x = self._collision_pass(sstate, cs, energy_log)
        return x[self.layout.skin].copy()

    # -- collision pass -----------------------------------------------------

    def _region_faces(self, mesh: vm.TriangleMesh, mask_name: str,
                      min_in: int = 3, exclude: str | None = None) -> np.ndarray:
        return region_faces(mesh, mask_name, min_in=min_in, exclude=exclude)

    def _collision_pairs(self, x_full: np.ndarray):
        skin_x = x_full[self.layout.skin]
        skull_x = x_full[self.layout.skull]
        upper = self.lhm.skin.mask("lips_upper")
        lower = self.lhm.skin.mask("lips_lower")
        # lip-lip contact is resolved one-sidedly (lower against upper),
        # matching the vertex-onto-surface projection style; symmetric
        # resolution would pull both bands through each other
        pairs = []
        # include the band-boundary half ring so vertices sliding past the
        # band edge still resolve against lip geometry
        up_faces = self._region_faces(self.lhm.skin, "lips_upper",
                                      min_in=2, exclude="lips_lower")
        teeth_faces = self._region_faces(self.lhm.skull, "teeth")
        if len(up_faces):
            pairs.append((lower, skin_x, up_faces, skin_x))
        if len(teeth_faces):
            pairs.append((upper, skin_x, teeth_faces, skull_x))
            pairs.append((lower, skin_x, teeth_faces, skull_x))
        return pairs

    def detect_penetrations(self, x_full: np.ndarray):
        """Vertex-triangle penetrations between opposing mask regions:
        lips against lips, and lips against teeth.

        A vertex counts as penetrating when it sits behind the opposing
        surface within the collision band; the band keeps laterally
        distant vertices (whose nearest band face is a boundary sliver)
        out. The pass runs after every solve, so real penetrations enter
        shallow. Returns (vertex, depth, closest point, pair index) rows.
        """
        hits = {}
        for k, pair in enumerate(self._collision_pairs(x_full)):
            verts = pair[0]
            signed, cp = _pair_signed(*pair)
            pen = (signed < -1e-9) & (signed > -COLLISION_BAND)
            for i in np.flatnonzero(pen):
                v = int(verts[i])
                depth = -float(signed[i])
                if v not in hits or hits[v][0] < depth:
                    hits[v] = (depth, cp[i], k)
        return [(v, d, p, k) for v, (d, p, k) in sorted(hits.items())]

    def _collision_pass(self, base_state: ps.SolverState,
                        base_cs: ps.ConstraintSet,
                        energy_log: list | None = None,
                        max_passes: int = 2) -> np.ndarray:
        """Re-solve with projection constraints pushing penetrating lip
        vertices to the opposing surface. All other energies stay in the
        system with their targets."""
        x = base_state.positions
        contact_pair: dict[int, int] = {}
        for _ in range(max_passes):
            hits = self.detect_penetrations(x)
            if not hits and not contact_pair:
                return x
            # contacts persist across passes (so resolved vertices are not
            # released back into their penetrating pull) and re-anchor onto
            # the opposing surface as it moves
            for v, _, _, k in hits:
                contact_pair[v] = k
            idx = np.array(sorted(contact_pair), int)
            targets, _ = _contact_targets(self._collision_pairs(x), contact_pair, idx)
            cs = base_cs.copy()
            n_base_targets = len(cs.tgt_idx)
            cs.add_targets(self.layout.skin[idx], targets, self.weights.w_con)
            state = ps.assemble_and_factorize(cs, reduction=self._reduction,
                                              initial_positions=x)
            x = ps.solve(state, self.n_iterations, energy_log=energy_log)
            # tighten: re-anchor the same contact set onto the moving
            # surface (right-hand-side only, factorization reused), with
            # error feedback on any residual penetration
            push = np.zeros(len(idx))
            for _ in range(8):
                targets, signed = _contact_targets(
                    self._collision_pairs(x), contact_pair, idx, push)
                if (signed > -1e-6).all() and (signed <= 0.8 * CONTACT_TOLERANCE).all():
                    break
                push += _push_update(signed, push)
                targets, _ = _contact_targets(self._collision_pairs(x),
                                              contact_pair, idx, push)
                cs.set_target_positions(targets, start=n_base_targets)
                x = ps.solve(state, self.n_iterations, energy_log=energy_log)
            base_state.positions = x
        remaining = self.detect_penetrations(x)
        if remaining:
            warnings.warn(f"{len(remaining)} penetrations remain after "
                          f"{max_passes} collision passes")
        return x


# ----------------------------------------------------------------------------
# Module-level operation wrappers


def inverse_model(target_skin, lhm: LayeredHeadModel,
                  weights: ps.SolverWeights | None = None,
                  n_iterations: int = 6, energy_log: list | None = None):
    sim = HeadSimulator(lhm, weights, n_iterations)
    return sim.inverse(np.asarray(target_skin, float), energy_log=energy_log)


def forward_model(state: VolumetricState, lhm: LayeredHeadModel,
                  weights: ps.SolverWeights | None = None,
                  n_iterations: int = 6, energy_log: list | None = None):
    sim = HeadSimulator(lhm, weights, n_iterations)
    return sim.forward(state, energy_log=energy_log)


def resolve_collisions(skin: vm.TriangleMesh,
                       rest_skin: vm.TriangleMesh | None = None,
                       teeth_mesh: vm.TriangleMesh | None = None,
                       weights: ps.SolverWeights | None = None,
                       n_iterations: int = 10,
                       max_passes: int = 2) -> vm.TriangleMesh:
    """Standalone lip/teeth collision resolution on a simulated skin.

    Builds a shape-preserving pass over the skin alone: triangle strain
    (anchored at the neutral ``rest_skin`` when given, else at the input)
    plus soft targets at the input positions keep all other energies on
    their targets, while near-hard projection constraints push
    penetrating vertices to the opposing surface. Strain anchored at the
    true rest avoids fighting the resolution across triangles that span
    the contact.
    """
    w = weights or ps.SolverWeights()
    for name in ("lips_upper", "lips_lower"):
        if name not in skin.region_masks:
            raise ValidationError(f"skin mesh needs a {name!r} mask")

    n = skin.n_vertices
    upper = skin.mask("lips_upper")
    lower = skin.mask("lips_lower")

    up_faces = region_faces(skin, "lips_upper", min_in=2, exclude="lips_lower")
    t_faces = (region_faces(teeth_mesh, "teeth")
               if teeth_mesh is not None else None)

    def pairs_at(x):
        # one-sided lip-lip resolution; see HeadSimulator._collision_pairs
        pairs = []
        if len(up_faces):
            pairs.append((lower, x, up_faces, x))
        if t_faces is not None and len(t_faces):
            pairs.append((upper, x, t_faces, teeth_mesh.vertices))
            pairs.append((lower, x, t_faces, teeth_mesh.vertices))
        return pairs

    def detect(x):
        hits = {}
        for k, pair in enumerate(pairs_at(x)):
            verts = pair[0]
            signed, cp = _pair_signed(*pair)
            pen = (signed < -1e-9) & (signed > -COLLISION_BAND)
            for i in np.flatnonzero(pen):
                v = int(verts[i])
                depth = -float(signed[i])
                if v not in hits or hits[v][0] < depth:
                    hits[v] = (depth, cp[i], k)
        return [(v, d, p, k) for v, (d, p, k) in sorted(hits.items())]

    x = skin.vertices.copy()
    dm2inv = None
    contact_pair: dict[int, int] = {}
    for _ in range(max_passes):
        hits = detect(x)
        for v, _, _, k in hits:
            contact_pair[v] = k
        if not contact_pair:
            break
        if dm2inv is None:
            rest_v = rest_skin.vertices if rest_skin is not None else skin.vertices
            dm2inv = np.array([ps.triangle_rest_inverse(rest_v[f])
                               for f in skin.faces])
        idx = np.array(sorted(contact_pair), int)
        targets, _ = _contact_targets(pairs_at(x), contact_pair, idx)
        cs = ps.ConstraintSet(n)
        cs.add_tri_strain(skin.faces, dm2inv, w.w_skin)
        cs.add_targets(np.arange(n), skin.vertices, w.w_inv)
        cs.add_targets(idx, targets, w.w_con)
        state = ps.assemble_and_factorize(cs, initial_positions=x)
        x = ps.solve(state, n_iterations)
        push = np.zeros(len(idx))
        for _ in range(8):
            targets, signed = _contact_targets(pairs_at(x), contact_pair, idx, push)
            if (signed > -1e-6).all() and (signed <= 0.8 * CONTACT_TOLERANCE).all():
                break
            push += _push_update(signed, push)
            targets, _ = _contact_targets(pairs_at(x), contact_pair, idx, push)
            cs.set_target_positions(targets, start=n)
            x = ps.solve(state, n_iterations)
    remaining = detect(x)
    if remaining:
        warnings.warn(f"{len(remaining)} penetrations remain after "
                      f"{max_passes} collision passes")
    return skin.with_vertices(x)
