"""Projective-dynamics solver: constraint projections, global assembly,
and the local/global iteration.

The solver minimizes sums of terms  w * ||A x - p(A x)||^2  where A is a
per-constraint linear operator and p projects onto the constraint's
feasible set. Each iteration runs the local step (all projections, an
embarrassingly parallel map) followed by one global linear solve against
a prefactorized matrix. The true constraint energy is non-increasing
across iterations by construction.

Vertex reductions are supported: full positions are an affine function
x = R u + c of the master unknowns u, which covers pinned vertices
(zero rows of R, positions in c) and barycentrically slaved vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import SolverError, ValidationError
from .mesh import closest_rotation

KINDS = ("volume", "strain", "dg_target", "curvature", "rectangularity",
         "target", "distance_band")

# Instrumentation: bumped once per global-matrix factorization.
FACTORIZATION_COUNT = 0

_VOLUME_NEWTON_ITERS = 20
_VOLUME_NEWTON_TOL = 1e-10


@dataclass
class SolverWeights:
    """Energy weights for the simulation and fitting objectives.

    Defaults are the production values used throughout the pipeline:
    near-hard terms (volume, connecting tets) at 1e3, tissue strain at
    1e2, block weights w_soft/w_muscle at 1, skin at 10, skull at 10,
    inverse targets at 10, curvature 0.1, rectangularity 1.0, massage
    distance 10.0, regressor distance 10.0. The forward skull target
    weight w_tar is not part of that table; it defaults to 1e3 to match
    the other near-hard terms.
    """

    w_soft: float = 1.0        # soft-tissue tet block
    w_muscle: float = 1.0      # muscle tet block
    w_skull: float = 10.0      # skull surface block
    w_skin: float = 10.0       # skin-surface strain block
    w_vol: float = 1e3
    w_str: float = 1e2
    w_con: float = 1e3
    w_inv: float = 10.0
    w_curv: float = 0.1
    w_rect: float = 1.0
    w_dist: float = 10.0
    w_dist2: float = 10.0
    w_tar: float = 1e3

    def validate(self) -> None:
        for name, value in vars(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"solver weight {name} must be finite and >= 0")


# ----------------------------------------------------------------------------
# Projections


def _signed_svd(m: np.ndarray):
    """Batched SVD with the sign of a reflection folded into the last
    singular value so that det(U V^T) = +1."""
    u, s, vt = np.linalg.svd(m)
    neg = np.linalg.det(u @ vt) < 0
    u = u.copy()
    s = s.copy()
    u[neg, :, 2] *= -1.0
    s[neg, 2] *= -1.0
    return u, s, vt


def _project_volume_batch(f: np.ndarray):
    """Nearest det-1 matrices to a batch of 3x3 matrices.

    Newton iteration on the signed singular values with the product-one
    constraint (unknowns: three values plus one multiplier). Returns
    (projections, fallback_mask); fallback entries were rescaled
    uniformly after non-convergence.
    """
    u, s, vt = _signed_svd(f)
    n = len(f)

    def residual(sig, mu):
        r = np.empty((n, 4))
        r[:, 0] = sig[:, 0] - s[:, 0] - mu * sig[:, 1] * sig[:, 2]
        r[:, 1] = sig[:, 1] - s[:, 1] - mu * sig[:, 0] * sig[:, 2]
        r[:, 2] = sig[:, 2] - s[:, 2] - mu * sig[:, 0] * sig[:, 1]
        r[:, 3] = sig[:, 0] * sig[:, 1] * sig[:, 2] - 1.0
        return r

    def newton(sig0):
        sig = sig0.copy()
        mu = np.zeros(n)
        for _ in range(_VOLUME_NEWTON_ITERS):
            r = residual(sig, mu)
            if np.abs(r).max() < _VOLUME_NEWTON_TOL:
                break
            jac = np.zeros((n, 4, 4))
            jac[:, 0, 0] = 1.0
            jac[:, 1, 1] = 1.0
            jac[:, 2, 2] = 1.0
            jac[:, 0, 1] = -mu * sig[:, 2]; jac[:, 0, 2] = -mu * sig[:, 1]
            jac[:, 1, 0] = -mu * sig[:, 2]; jac[:, 1, 2] = -mu * sig[:, 0]
            jac[:, 2, 0] = -mu * sig[:, 1]; jac[:, 2, 1] = -mu * sig[:, 0]
            jac[:, 0, 3] = -sig[:, 1] * sig[:, 2]
            jac[:, 1, 3] = -sig[:, 0] * sig[:, 2]
            jac[:, 2, 3] = -sig[:, 0] * sig[:, 1]
            jac[:, 3, 0] = sig[:, 1] * sig[:, 2]
            jac[:, 3, 1] = sig[:, 0] * sig[:, 2]
            jac[:, 3, 2] = sig[:, 0] * sig[:, 1]
            try:
                step = np.linalg.solve(jac, r[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                jac = jac + 1e-9 * np.eye(4)
                step = np.linalg.solve(jac, r[:, :, None])[:, :, 0]
            sig = np.maximum(sig - step[:, :3], 1e-6)
            mu = mu - step[:, 3]
        ok = np.abs(residual(sig, mu)).max(axis=1) < 1e-8
        return sig, ok

    # Start from the current values: beyond a compression threshold the
    # det-1 manifold has several critical points, and the branch that is
    # continuous in F (isotropic output for isotropic input) is the one
    # a solver needs, not the occasionally-nearer symmetry-breaking one.
    s_pos = np.where(s > 0.1, s, 0.1)
    best_sig, ok = newton(s_pos)

    fallback = ~ok
    if fallback.any():
        s_fb = np.abs(s[fallback])
        p_fb = np.maximum(np.prod(s_fb, axis=1), 1e-300)
        best_sig[fallback] = s_fb / np.cbrt(p_fb)[:, None]
    proj = (u * best_sig[:, None, :]) @ vt
    return proj, fallback


def project_volume(f: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) matrix with determinant one."""
    f = np.asarray(f, dtype=np.float64)
    proj, _ = _project_volume_batch(f[None])
    return proj[0]


def project_strain(f: np.ndarray, target: np.ndarray | None = None) -> np.ndarray:
    """Rotation fit R (or R @ target when a target gradient is given)."""
    f = np.asarray(f, dtype=np.float64)
    if target is None:
        return closest_rotation(f)
    target = np.asarray(target, dtype=np.float64)
    r = closest_rotation(f @ target.T)
    return r @ target


def _project_tri_strain_batch(f: np.ndarray) -> np.ndarray:
    """Nearest 3x2 matrices with orthonormal columns (both singular
    values clamped to one)."""
    u, _, vt = np.linalg.svd(f, full_matrices=False)
    return u @ vt


def project_curvature(delta_x: np.ndarray, rest_delta_b: np.ndarray) -> np.ndarray:
    """Rotate the rest Laplacian onto the direction of the current one.

    Returns the current Laplacian unchanged when the rest Laplacian is
    (numerically) zero, making the constraint inert.
    """
    delta_x = np.asarray(delta_x, dtype=np.float64)
    rest_delta_b = np.asarray(rest_delta_b, dtype=np.float64)
    nb = np.linalg.norm(rest_delta_b)
    if nb < 1e-12:
        return delta_x.copy()
    nx = np.linalg.norm(delta_x)
    if nx < 1e-12:
        return rest_delta_b.copy()
    return delta_x * (nb / nx)


def project_rectangularity(quad: np.ndarray) -> np.ndarray:
    """Closest planar rectangle configuration to four quad corners.

    The quad is (x0, x1, s1, s0) in cyclic order. The fit has two free
    edge-length scales plus a rigid motion, so all four right angles
    hold exactly on the output.
    """
    quad = np.asarray(quad, dtype=np.float64)
    out, degenerate = _project_rect_batch(quad[None])
    if degenerate[0]:
        raise ValidationError("collapsed quad (area below 1e-9 mm^2)")
    return out[0]


_RECT_UX = np.array([-0.5, 0.5, 0.5, -0.5])
_RECT_UY = np.array([-0.5, -0.5, 0.5, 0.5])


def _polar_3x2(n: np.ndarray) -> np.ndarray:
    """Orthonormal polar factor of 3x2 matrices, N (N^T N)^(-1/2), via the
    closed-form 2x2 symmetric square root."""
    m = n.transpose(0, 2, 1) @ n  # (Q, 2, 2) SPD
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    root_det = np.sqrt(np.maximum(det, 0.0))
    tr = m[:, 0, 0] + m[:, 1, 1]
    s = np.sqrt(np.maximum(tr + 2.0 * root_det, 1e-300))
    # sqrt(M) = (M + sqrt(det) I) / s ; invert the 2x2 directly
    sq = m.copy()
    sq[:, 0, 0] += root_det
    sq[:, 1, 1] += root_det
    sq /= s[:, None, None]
    det_sq = sq[:, 0, 0] * sq[:, 1, 1] - sq[:, 0, 1] * sq[:, 1, 0]
    det_sq = np.where(np.abs(det_sq) < 1e-300, 1e-300, det_sq)
    inv = np.empty_like(sq)
    inv[:, 0, 0] = sq[:, 1, 1]
    inv[:, 1, 1] = sq[:, 0, 0]
    inv[:, 0, 1] = -sq[:, 0, 1]
    inv[:, 1, 0] = -sq[:, 1, 0]
    inv /= det_sq[:, None, None]
    return n @ inv


def _project_rect_batch(quads: np.ndarray, iters: int = 60, tol: float = 1e-12):
    """Two-scale Procrustes rectangle fit for a batch of quads (Q, 4, 3).

    Block ascent: optimal axes for fixed scales (a polar factor), then
    optimal scales for fixed axes. Returns (projections,
    degenerate_mask); degenerate quads project onto themselves.
    """
    t = quads.mean(axis=1, keepdims=True)
    p = quads - t
    m1 = np.einsum("i,qij->qj", _RECT_UX, p)
    m2 = np.einsum("i,qij->qj", _RECT_UY, p)

    cross = np.cross(m1, m2)
    degenerate = np.linalg.norm(cross, axis=1) < 1e-9

    n1 = np.linalg.norm(m1, axis=1, keepdims=True)
    r1 = m1 / np.maximum(n1, 1e-30)
    m2p = m2 - np.einsum("qj,qj->q", m2, r1)[:, None] * r1
    n2 = np.linalg.norm(m2p, axis=1, keepdims=True)
    r2 = m2p / np.maximum(n2, 1e-30)

    a = np.einsum("qj,qj->q", r1, m1)
    b = np.einsum("qj,qj->q", r2, m2)
    for _ in range(iters):
        n = np.stack([a[:, None] * m1, b[:, None] * m2], axis=2)  # (Q, 3, 2)
        rr = _polar_3x2(n)
        r1, r2 = rr[:, :, 0], rr[:, :, 1]
        a_new = np.maximum(np.einsum("qj,qj->q", r1, m1), 1e-12)
        b_new = np.maximum(np.einsum("qj,qj->q", r2, m2), 1e-12)
        if max(np.max(np.abs(a_new - a)), np.max(np.abs(b_new - b))) < tol:
            a, b = a_new, b_new
            break
        a, b = a_new, b_new

    corners = (t + _RECT_UX[None, :, None] * (a[:, None, None] * r1[:, None, :])
               + _RECT_UY[None, :, None] * (b[:, None, None] * r2[:, None, :]))
    out = np.where(degenerate[:, None, None], quads, corners)
    return out, degenerate


def project_distance_band(x: np.ndarray, anchor: np.ndarray, distance: float,
                          rest_direction: np.ndarray | None = None) -> np.ndarray:
    """Point at the prescribed distance from the anchor, along the
    current direction from the anchor to x (rest direction when x
    coincides with the anchor)."""
    x = np.asarray(x, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    d = x - anchor
    n = np.linalg.norm(d)
    if n < 1e-12:
        if rest_direction is None:
            raise ValidationError("distance-band projection at the anchor "
                                  "needs a stored rest direction")
        d = np.asarray(rest_direction, dtype=np.float64)
        n = np.linalg.norm(d)
    return anchor + d * (distance / n)


# ----------------------------------------------------------------------------
# Constraints


@dataclass
class Constraint:
    """A single typed constraint.

    kind is one of: volume, strain, dg_target, curvature, rectangularity,
    target, distance_band. ``element`` lists the vertex indices the
    constraint touches (4 for tets, 3 for triangles, 4 for quads, the
    full one-ring for curvature, 1 for point constraints). ``rest_data``
    holds the kind-specific payload.
    """

    kind: str
    element: tuple
    weight: float
    rest_data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown constraint kind {self.kind!r}")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValidationError("constraint weight must be finite and >= 0")
        self.element = tuple(int(i) for i in np.asarray(self.element).ravel())
        n = len(self.element)
        expected = {"volume": (4,), "strain": (3, 4), "dg_target": (4,),
                    "rectangularity": (4,), "target": (1,), "distance_band": (1,)}
        if self.kind in expected and n not in expected[self.kind]:
            raise ValidationError(
                f"{self.kind} constraint takes {expected[self.kind]} indices, got {n}")


def tet_rest_inverse(rest_corners: np.ndarray) -> np.ndarray:
    rest = np.asarray(rest_corners, dtype=np.float64)
    dm = np.column_stack([rest[1] - rest[0], rest[2] - rest[0], rest[3] - rest[0]])
    return np.linalg.inv(dm)


def triangle_rest_inverse(rest_corners: np.ndarray) -> np.ndarray:
    """2x2 inverse rest edge matrix of a triangle in its local frame."""
    rest = np.asarray(rest_corners, dtype=np.float64)
    e1 = rest[1] - rest[0]
    e2 = rest[2] - rest[0]
    u = e1 / np.linalg.norm(e1)
    nrm = np.cross(e1, e2)
    nn = np.linalg.norm(nrm)
    if nn < 1e-14:
        raise ValidationError("degenerate rest triangle")
    w = np.cross(nrm / nn, u)
    dm = np.array([[e1 @ u, e2 @ u], [0.0, e2 @ w]])
    return np.linalg.inv(dm)


def _tet_gradient_operator(dminv: np.ndarray) -> np.ndarray:
    """Per-coordinate operator G (..., 4, 3) with F[r, :] = x[r] @ G."""
    g = np.zeros(dminv.shape[:-2] + (4, 3))
    g[..., 1:, :] = dminv
    g[..., 0, :] = -dminv.sum(axis=-2)
    return g


def _tri_gradient_operator(dm2inv: np.ndarray) -> np.ndarray:
    """Per-coordinate operator G (..., 3, 2) for triangle gradients."""
    g = np.zeros(dm2inv.shape[:-2] + (3, 2))
    g[..., 1:, :] = dm2inv
    g[..., 0, :] = -dm2inv.sum(axis=-2)
    return g


class ConstraintSet:
    """Vectorized storage of constraints, grouped by kind.

    Use the ``add_*`` batch methods for large systems; ``add`` accepts a
    single Constraint (used by tests and the text serializer).
    Target positions and distance-band payloads may be replaced later
    without refactorizing, since they only enter the right-hand side.
    """

    def __init__(self, n_vertices: int):
        self.n_vertices = int(n_vertices)
        self.vol_idx = np.zeros((0, 4), int); self.vol_w = np.zeros(0); self.vol_dminv = np.zeros((0, 3, 3))
        self.str_idx = np.zeros((0, 4), int); self.str_w = np.zeros(0); self.str_dminv = np.zeros((0, 3, 3))
        self.dg_idx = np.zeros((0, 4), int); self.dg_w = np.zeros(0); self.dg_dminv = np.zeros((0, 3, 3))
        self.dg_targets = np.zeros((0, 3, 3))
        self.tri_idx = np.zeros((0, 3), int); self.tri_w = np.zeros(0); self.tri_dminv = np.zeros((0, 2, 2))
        # curvature constraints, bucketed by one-ring size
        self.curv_buckets: dict[int, dict] = {}
        self.rect_idx = np.zeros((0, 4), int); self.rect_w = np.zeros(0)
        self.tgt_idx = np.zeros(0, int); self.tgt_w = np.zeros(0); self.tgt_pos = np.zeros((0, 3))
        self.db_idx = np.zeros(0, int); self.db_w = np.zeros(0)
        self.db_anchor = np.zeros((0, 3)); self.db_dist = np.zeros(0); self.db_dir = np.zeros((0, 3))

    # -- batch constructors ---------------------------------------------------

    def add_tet_volume(self, idx, dminv, weight):
        self.vol_idx, self.vol_w, self.vol_dminv = self._cat_tet(
            self.vol_idx, self.vol_w, self.vol_dminv, idx, dminv, weight)

    def add_tet_strain(self, idx, dminv, weight):
        self.str_idx, self.str_w, self.str_dminv = self._cat_tet(
            self.str_idx, self.str_w, self.str_dminv, idx, dminv, weight)

    def add_dg_target(self, idx, dminv, targets, weight):
        idx = np.asarray(idx, int).reshape(-1, 4)
        self.dg_idx, self.dg_w, self.dg_dminv = self._cat_tet(
            self.dg_idx, self.dg_w, self.dg_dminv, idx, dminv, weight)
        self.dg_targets = np.concatenate(
            [self.dg_targets, np.asarray(targets, float).reshape(-1, 3, 3)])

    def add_tri_strain(self, idx, dm2inv, weight):
        idx = np.asarray(idx, int).reshape(-1, 3)
        w = np.broadcast_to(np.asarray(weight, float), (len(idx),)).copy()
        self.tri_idx = np.concatenate([self.tri_idx, idx])
        self.tri_w = np.concatenate([self.tri_w, w])
        self.tri_dminv = np.concatenate(
            [self.tri_dminv, np.asarray(dm2inv, float).reshape(-1, 2, 2)])

    def add_curvature(self, elements, row_weights, rest_laplacians, areas, weight):
        """elements: list of index arrays (vertex first, then its ring);
        row_weights: matching Laplacian row coefficients."""
        areas = np.asarray(areas, float).ravel()
        w = np.broadcast_to(np.asarray(weight, float), (len(elements),))
        rest = np.asarray(rest_laplacians, float).reshape(-1, 3)
        for el, lw, rl, a, wi in zip(elements, row_weights, rest, areas, w):
            el = np.asarray(el, int).ravel()
            k = len(el)
            b = self.curv_buckets.setdefault(
                k, {"idx": [], "l": [], "rest": [], "w": []})
            if not isinstance(b["idx"], list):  # was frozen by a compile pass
                b["idx"] = list(b["idx"]); b["l"] = list(b["l"])
                b["rest"] = list(b["rest"]); b["w"] = list(b["w"])
            b["idx"].append(el)
            b["l"].append(np.asarray(lw, float).ravel())
            b["rest"].append(rl)
            b["w"].append(wi * a)

    def add_rectangularity(self, quads, weight):
        quads = np.asarray(quads, int).reshape(-1, 4)
        w = np.broadcast_to(np.asarray(weight, float), (len(quads),)).copy()
        self.rect_idx = np.concatenate([self.rect_idx, quads])
        self.rect_w = np.concatenate([self.rect_w, w])

    def add_targets(self, idx, positions, weight):
        idx = np.asarray(idx, int).ravel()
        w = np.broadcast_to(np.asarray(weight, float), (len(idx),)).copy()
        self.tgt_idx = np.concatenate([self.tgt_idx, idx])
        self.tgt_w = np.concatenate([self.tgt_w, w])
        self.tgt_pos = np.concatenate([self.tgt_pos, np.asarray(positions, float).reshape(-1, 3)])

    def add_distance_bands(self, idx, anchors, distances, rest_directions, weight):
        idx = np.asarray(idx, int).ravel()
        w = np.broadcast_to(np.asarray(weight, float), (len(idx),)).copy()
        self.db_idx = np.concatenate([self.db_idx, idx])
        self.db_w = np.concatenate([self.db_w, w])
        self.db_anchor = np.concatenate([self.db_anchor, np.asarray(anchors, float).reshape(-1, 3)])
        self.db_dist = np.concatenate([self.db_dist, np.asarray(distances, float).ravel()])
        self.db_dir = np.concatenate([self.db_dir, np.asarray(rest_directions, float).reshape(-1, 3)])

    @staticmethod
    def _cat_tet(idx0, w0, dm0, idx, dminv, weight):
        idx = np.asarray(idx, int).reshape(-1, 4)
        w = np.broadcast_to(np.asarray(weight, float), (len(idx),)).copy()
        dminv = np.asarray(dminv, float).reshape(-1, 3, 3)
        return (np.concatenate([idx0, idx]), np.concatenate([w0, w]),
                np.concatenate([dm0, dminv]))

    # -- single-constraint interface -------------------------------------------

    def add(self, c: Constraint):
        el = np.asarray(c.element, int)
        rd = c.rest_data
        if c.kind == "volume":
            self.add_tet_volume(el[None], rd["rest_inverse"][None], c.weight)
        elif c.kind == "strain":
            if len(el) == 4:
                self.add_tet_strain(el[None], rd["rest_inverse"][None], c.weight)
            else:
                self.add_tri_strain(el[None], rd["rest_inverse"][None], c.weight)
        elif c.kind == "dg_target":
            self.add_dg_target(el[None], rd["rest_inverse"][None],
                               rd["target_gradient"][None], c.weight)
        elif c.kind == "curvature":
            self.add_curvature([el], [rd["row_weights"]], rd["rest_laplacian"][None],
                               [rd["area"]], c.weight)
        elif c.kind == "rectangularity":
            self.add_rectangularity(el[None], c.weight)
        elif c.kind == "target":
            self.add_targets(el, rd["position"][None], c.weight)
        elif c.kind == "distance_band":
            self.add_distance_bands(el, rd["anchor"][None], [rd["distance"]],
                                    rd.get("rest_direction", rd["anchor"] * 0 + (1, 0, 0))[None],
                                    c.weight)

    @classmethod
    def from_constraints(cls, constraints, n_vertices: int) -> "ConstraintSet":
        cs = cls(n_vertices)
        for c in constraints:
            cs.add(c)
        return cs

    def copy(self) -> "ConstraintSet":
        """Deep-enough copy: arrays duplicated, safe to extend."""
        import copy as _copy
        out = ConstraintSet(self.n_vertices)
        for name, value in vars(self).items():
            if name == "curv_buckets":
                out.curv_buckets = {
                    k: {kk: _copy.deepcopy(vv) for kk, vv in b.items()}
                    for k, b in self.curv_buckets.items()}
            elif isinstance(value, np.ndarray):
                setattr(out, name, value.copy())
        return out

    # -- mutation that does not change the system matrix -----------------------

    def set_target_positions(self, positions: np.ndarray, start: int = 0):
        positions = np.asarray(positions, float).reshape(-1, 3)
        self.tgt_pos[start:start + len(positions)] = positions

    def set_distance_band_data(self, anchors=None, distances=None):
        if anchors is not None:
            self.db_anchor[:] = np.asarray(anchors, float).reshape(-1, 3)
        if distances is not None:
            self.db_dist[:] = np.asarray(distances, float).ravel()

    # -- bookkeeping ------------------------------------------------------------

    def touched_vertices(self) -> np.ndarray:
        parts = [self.vol_idx.ravel(), self.str_idx.ravel(), self.dg_idx.ravel(),
                 self.tri_idx.ravel(), self.rect_idx.ravel(), self.tgt_idx,
                 self.db_idx]
        for b in self.curv_buckets.values():
            for el in b["idx"]:
                parts.append(np.asarray(el))
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, int)

    def counts(self) -> dict[str, int]:
        return {
            "volume": len(self.vol_idx), "strain": len(self.str_idx) + len(self.tri_idx),
            "dg_target": len(self.dg_idx),
            "curvature": sum(len(b["idx"]) for b in self.curv_buckets.values()),
            "rectangularity": len(self.rect_idx), "target": len(self.tgt_idx),
            "distance_band": len(self.db_idx),
        }

    def _curv_compiled(self):
        """Freeze curvature buckets into arrays (idempotent)."""
        compiled = []
        for k, b in sorted(self.curv_buckets.items()):
            if isinstance(b["idx"], list):
                b["idx"] = np.array(b["idx"], int)
                b["l"] = np.array(b["l"], float)
                b["rest"] = np.array(b["rest"], float)
                b["w"] = np.array(b["w"], float)
            compiled.append(b)
        return compiled


# ----------------------------------------------------------------------------
# Local step: projections and right-hand-side accumulation


def _local_step(cs: ConstraintSet, x: np.ndarray, diagnostics: dict):
    """Project every constraint at positions x.

    Returns (rhs, energies): rhs is the accumulated w * A^T p vector
    (n_vertices, 3); energies maps kind -> summed w * ||A x - p||^2.
    """
    n = cs.n_vertices
    rhs = np.zeros((n, 3))
    energies = dict.fromkeys(KINDS, 0.0)

    def tet_block(idx, w, dminv, project, kind):
        if not len(idx):
            return
        p = x[idx]  # (T, 4, 3)
        ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
        f = ds @ dminv
        proj = project(f)
        if not np.isfinite(proj).all():
            raise SolverError(f"non-finite projection in {kind} constraints")
        g = _tet_gradient_operator(dminv)  # (T, 4, 3)
        energies[kind] += float((w * ((f - proj) ** 2).sum(axis=(1, 2))).sum())
        contrib = np.einsum("tvc,trc->tvr", g, proj) * w[:, None, None]
        np.add.at(rhs, idx, contrib)

    tet_block(cs.vol_idx, cs.vol_w, cs.vol_dminv,
              lambda f: _project_volume_and_count(f, diagnostics), "volume")
    tet_block(cs.str_idx, cs.str_w, cs.str_dminv, closest_rotation, "strain")
    if len(cs.dg_idx):
        t = cs.dg_targets

        def project_dg(f):
            r = closest_rotation(f @ t.transpose(0, 2, 1))
            return r @ t

        tet_block(cs.dg_idx, cs.dg_w, cs.dg_dminv, project_dg, "dg_target")

    if len(cs.tri_idx):
        p = x[cs.tri_idx]
        ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (T, 3, 2)
        f = ds @ cs.tri_dminv
        proj = _project_tri_strain_batch(f)
        g = _tri_gradient_operator(cs.tri_dminv)  # (T, 3, 2)
        energies["strain"] += float((cs.tri_w * ((f - proj) ** 2).sum(axis=(1, 2))).sum())
        contrib = np.einsum("tvc,trc->tvr", g, proj) * cs.tri_w[:, None, None]
        np.add.at(rhs, cs.tri_idx, contrib)

    for b in cs._curv_compiled():
        idx, l, rest, w = b["idx"], b["l"], b["rest"], b["w"]
        delta = np.einsum("ck,ckj->cj", l, x[idx])
        nb = np.linalg.norm(rest, axis=1)
        nx = np.linalg.norm(delta, axis=1)
        proj = np.where(
            (nb < 1e-12)[:, None], delta,
            np.where((nx < 1e-12)[:, None], rest,
                     delta * (nb / np.maximum(nx, 1e-30))[:, None]))
        energies["curvature"] += float((w * ((delta - proj) ** 2).sum(axis=1)).sum())
        contrib = (w[:, None] * l)[:, :, None] * proj[:, None, :]
        np.add.at(rhs, idx, contrib)

    if len(cs.rect_idx):
        quads = x[cs.rect_idx]
        proj, degenerate = _project_rect_batch(quads)
        if degenerate.any():
            # Degenerate quads project onto themselves (inert this pass).
            diagnostics["rect_skipped"] = diagnostics.get("rect_skipped", 0) + int(degenerate.sum())
        energies["rectangularity"] += float(
            (cs.rect_w * ((quads - proj) ** 2).sum(axis=(1, 2))).sum())
        np.add.at(rhs, cs.rect_idx, cs.rect_w[:, None, None] * proj)

    if len(cs.tgt_idx):
        d = x[cs.tgt_idx] - cs.tgt_pos
        energies["target"] += float((cs.tgt_w * (d ** 2).sum(axis=1)).sum())
        np.add.at(rhs, cs.tgt_idx, cs.tgt_w[:, None] * cs.tgt_pos)

    if len(cs.db_idx):
        d = x[cs.db_idx] - cs.db_anchor
        n_d = np.linalg.norm(d, axis=1)
        use_rest = n_d < 1e-12
        d = np.where(use_rest[:, None], cs.db_dir, d)
        n_d = np.where(use_rest, np.linalg.norm(cs.db_dir, axis=1), n_d)
        proj = cs.db_anchor + d * (cs.db_dist / np.maximum(n_d, 1e-30))[:, None]
        resid = x[cs.db_idx] - proj
        energies["distance_band"] += float((cs.db_w * (resid ** 2).sum(axis=1)).sum())
        np.add.at(rhs, cs.db_idx, cs.db_w[:, None] * proj)

    return rhs, energies


def _project_volume_and_count(f, diagnostics):
    proj, fallback = _project_volume_batch(f)
    if fallback.any():
        diagnostics["volume_newton_fallbacks"] = (
            diagnostics.get("volume_newton_fallbacks", 0) + int(fallback.sum()))
    return proj


def constraint_energies(cs: ConstraintSet, positions: np.ndarray) -> dict[str, float]:
    """Per-kind weighted constraint energies at the given positions."""
    _, energies = _local_step(cs, np.asarray(positions, float), {})
    energies["total"] = sum(energies[k] for k in KINDS)
    return energies


# ----------------------------------------------------------------------------
# Global step: assembly, factorization, solve


@dataclass
class Reduction:
    """Affine map x_full = matrix @ u + constant from master unknowns to
    full vertex positions. ``master_of`` maps a master column back to a
    full vertex index (for error messages)."""

    matrix: sparse.csr_matrix
    constant: np.ndarray | None
    master_of: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Reduction":
        return cls(sparse.identity(n, format="csr"), None, np.arange(n))

    @classmethod
    def with_pins(cls, n: int, pin_idx, pin_pos) -> "Reduction":
        pin_idx = np.asarray(pin_idx, int).ravel()
        pin_pos = np.asarray(pin_pos, float).reshape(-1, 3)
        free = np.setdiff1d(np.arange(n), pin_idx)
        mat = sparse.coo_matrix(
            (np.ones(len(free)), (free, np.arange(len(free)))), shape=(n, len(free))).tocsr()
        const = np.zeros((n, 3))
        const[pin_idx] = pin_pos
        return cls(mat, const, free)


class SolverState:
    """A factorized projective-dynamics problem plus its current iterate.

    The factorization stays valid while the constraint topology and
    weights are unchanged; replacing target positions or distance-band
    payloads is allowed, anything else requires reassembly.
    """

    def __init__(self, constraints: ConstraintSet, reduction: Reduction,
                 system_matrix: sparse.csc_matrix, factorization,
                 positions: np.ndarray, tikhonov: float):
        self.constraints = constraints
        self.reduction = reduction
        self.system_matrix = system_matrix
        self._factorization = factorization
        self.positions = np.array(positions, dtype=np.float64)
        self.tikhonov = tikhonov
        self.iteration_count = 0
        self.diagnostics: dict = {}
        # constant part of the full-space rhs induced by pinned vertices
        self._k_const = None

    def masters(self) -> np.ndarray:
        """Current master unknowns (n_master, 3)."""
        return self.positions[self.reduction.master_of]


def assemble_and_factorize(constraints: ConstraintSet | list,
                           n_vertices: int | None = None,
                           initial_positions: np.ndarray | None = None,
                           *,
                           pins: tuple | None = None,
                           reduction: Reduction | None = None,
                           tikhonov: float = 1e-9) -> SolverState:
    """Build and factorize the global matrix for a constraint set.

    Exactly one of ``pins`` ((indices, positions)) or ``reduction`` may
    be given; with neither, all vertices are free and a tiny Tikhonov
    term removes the rigid-motion rank deficiency. Raises SolverError
    when a free vertex is touched by no constraint.
    """
    global FACTORIZATION_COUNT
    if isinstance(constraints, list):
        if n_vertices is None:
            raise ValidationError("n_vertices required with a constraint list")
        constraints = ConstraintSet.from_constraints(constraints, n_vertices)
    cs = constraints
    n = cs.n_vertices
    if pins is not None and reduction is not None:
        raise ValidationError("pass either pins or a reduction, not both")
    if reduction is None:
        reduction = (Reduction.with_pins(n, *pins) if pins is not None
                     else Reduction.identity(n))
    has_const = reduction.constant is not None

    k_full = _assemble_full_matrix(cs)
    r = reduction.matrix.tocsr()
    m = (r.T @ k_full @ r).tocsc()

    diag = m.diagonal()
    floating = np.flatnonzero(diag <= 0)
    if floating.size:
        verts = reduction.master_of[floating]
        raise SolverError(
            f"free vertices with no constraint: {verts[:20].tolist()}")

    eps = 0.0 if has_const else tikhonov
    if eps:
        m = (m + eps * sparse.identity(m.shape[0], format="csc")).tocsc()

    factorization = splu(m)
    FACTORIZATION_COUNT += 1

    if initial_positions is None:
        initial_positions = np.zeros((n, 3))
    state = SolverState(cs, reduction, m, factorization,
                        initial_positions, eps)
    if has_const:
        state._k_const = k_full @ reduction.constant
    state._k_full = k_full
    return state


def _assemble_full_matrix(cs: ConstraintSet) -> sparse.csr_matrix:
    n = cs.n_vertices
    rows, cols, vals = [], [], []

    def tet_like(idx, w, g):
        if not len(idx):
            return
        gg = (g @ g.transpose(0, 2, 1)) * w[:, None, None]
        k = idx.shape[1]
        rows.append(np.repeat(idx, k, axis=1).ravel())
        cols.append(np.tile(idx, (1, k)).ravel())
        vals.append(gg.ravel())

    tet_like(cs.vol_idx, cs.vol_w, _tet_gradient_operator(cs.vol_dminv))
    tet_like(cs.str_idx, cs.str_w, _tet_gradient_operator(cs.str_dminv))
    tet_like(cs.dg_idx, cs.dg_w, _tet_gradient_operator(cs.dg_dminv))
    tet_like(cs.tri_idx, cs.tri_w, _tri_gradient_operator(cs.tri_dminv))

    for b in cs._curv_compiled():
        idx, l, w = b["idx"], b["l"], b["w"]
        ll = (l[:, :, None] * l[:, None, :]) * w[:, None, None]
        k = idx.shape[1]
        rows.append(np.repeat(idx, k, axis=1).ravel())
        cols.append(np.tile(idx, (1, k)).ravel())
        vals.append(ll.ravel())

    if len(cs.rect_idx):
        rows.append(cs.rect_idx.ravel())
        cols.append(cs.rect_idx.ravel())
        vals.append(np.repeat(cs.rect_w, 4))
    if len(cs.tgt_idx):
        rows.append(cs.tgt_idx); cols.append(cs.tgt_idx); vals.append(cs.tgt_w)
    if len(cs.db_idx):
        rows.append(cs.db_idx); cols.append(cs.db_idx); vals.append(cs.db_w)

    if not rows:
        raise SolverError("constraint set is empty")
    k = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    return k.tocsr()


def solve(state: SolverState, n_iterations: int,
          energy_log: list | None = None) -> np.ndarray:
    """Run local/global iterations; returns the full positions (V, 3).

    The summed weighted constraint energy is non-increasing across
    iterations. Appends one dict per iteration to ``energy_log`` when
    given. Raises SolverError (naming the iteration and the offending
    constraint kind when identifiable) if positions go non-finite.
    """
    cs = state.constraints
    red = state.reduction
    r = red.matrix
    x = state.positions

    for _ in range(n_iterations):
        try:
            rhs_full, energies = _local_step(cs, x, state.diagnostics)
        except SolverError as exc:
            raise SolverError(f"iteration {state.iteration_count}: {exc}") from None
        if energy_log is not None:
            entry = {"iter": state.iteration_count,
                     "total_energy": sum(energies[k] for k in KINDS)}
            entry.update({f"{k}_energy": energies[k] for k in KINDS})
            energy_log.append(entry)

        if red.constant is not None:
            rhs_full = rhs_full - state._k_const
        rhs = r.T @ rhs_full
        if state.tikhonov:
            rhs = rhs + state.tikhonov * x[red.master_of]
        u = state._factorization.solve(rhs)
        if not np.isfinite(u).all():
            raise SolverError(
                f"non-finite positions after global step at iteration "
                f"{state.iteration_count}")
        x = r @ u
        if red.constant is not None:
            x = x + red.constant
        state.iteration_count += 1

    state.positions = x
    return x


def write_energy_log_csv(path, energy_log: list, header_comment: str = "") -> None:
    cols = ["iter", "total_energy"] + [f"{k}_energy" for k in KINDS]
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(",".join(cols) + "\n")
        for row in energy_log:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in cols) + "\n")


# ----------------------------------------------------------------------------
# Text serialization of constraint sets (re-runnable experiment configs)


def write_constraint_set(cs: ConstraintSet, path) -> None:
    def arr(a):
        return " ".join(repr(float(v)) for v in np.asarray(a, float).ravel())

    with open(path, "w") as fh:
        fh.write(f"[meta]\nn_vertices = {cs.n_vertices}\n")
        for name, idx, w, extra in [
            ("volume", cs.vol_idx, cs.vol_w, cs.vol_dminv),
            ("strain_tet", cs.str_idx, cs.str_w, cs.str_dminv),
            ("strain_tri", cs.tri_idx, cs.tri_w, cs.tri_dminv),
        ]:
            fh.write(f"[{name}]\n")
            for i in range(len(idx)):
                fh.write(f"c = {' '.join(map(str, idx[i]))} | {float(w[i])!r} | {arr(extra[i])}\n")
        fh.write("[dg_target]\n")
        for i in range(len(cs.dg_idx)):
            fh.write(f"c = {' '.join(map(str, cs.dg_idx[i]))} | {float(cs.dg_w[i])!r} | "
                     f"{arr(cs.dg_dminv[i])} | {arr(cs.dg_targets[i])}\n")
        fh.write("[curvature]\n")
        for b in cs._curv_compiled():
            for i in range(len(b["idx"])):
                fh.write(f"c = {' '.join(map(str, b['idx'][i]))} | {float(b['w'][i])!r} | "
                         f"{arr(b['l'][i])} | {arr(b['rest'][i])}\n")
        fh.write("[rectangularity]\n")
        for i in range(len(cs.rect_idx)):
            fh.write(f"c = {' '.join(map(str, cs.rect_idx[i]))} | {float(cs.rect_w[i])!r}\n")
        fh.write("[target]\n")
        for i in range(len(cs.tgt_idx)):
            fh.write(f"c = {cs.tgt_idx[i]} | {float(cs.tgt_w[i])!r} | {arr(cs.tgt_pos[i])}\n")
        fh.write("[distance_band]\n")
        for i in range(len(cs.db_idx)):
            fh.write(f"c = {cs.db_idx[i]} | {float(cs.db_w[i])!r} | {arr(cs.db_anchor[i])} | "
                     f"{float(cs.db_dist[i])!r} | {arr(cs.db_dir[i])}\n")


def read_constraint_set(path) -> ConstraintSet:
    from .errors import FormatError
    section = None
    cs = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if section == "meta" and key == "n_vertices":
                cs = ConstraintSet(int(value))
                continue
            if cs is None:
                raise FormatError(f"{path}:{lineno}: [meta] n_vertices must come first")
            parts = [p.strip() for p in value.split("|")]
            idx = np.array(parts[0].split(), int)
            w = float(parts[1])
            if section == "volume":
                cs.add_tet_volume(idx[None], np.array(parts[2].split(), float).reshape(3, 3)[None], w)
            elif section == "strain_tet":
                cs.add_tet_strain(idx[None], np.array(parts[2].split(), float).reshape(3, 3)[None], w)
            elif section == "strain_tri":
                cs.add_tri_strain(idx[None], np.array(parts[2].split(), float).reshape(2, 2)[None], w)
            elif section == "dg_target":
                cs.add_dg_target(idx[None], np.array(parts[2].split(), float).reshape(3, 3)[None],
                                 np.array(parts[3].split(), float).reshape(3, 3)[None], w)
            elif section == "curvature":
                lw = np.array(parts[2].split(), float)
                rest = np.array(parts[3].split(), float)
                cs.add_curvature([idx], [lw], rest[None], [1.0], w)
            elif section == "rectangularity":
                cs.add_rectangularity(idx[None], w)
            elif section == "target":
                cs.add_targets(idx, np.array(parts[2].split(), float)[None], w)
            elif section == "distance_band":
                cs.add_distance_bands(idx, np.array(parts[2].split(), float)[None],
                                      [float(parts[3])],
                                      np.array(parts[4].split(), float)[None], w)
            else:
                raise FormatError(f"{path}:{lineno}: unknown section {section!r}")
    if cs is None:
        raise FormatError(f"{path}: missing [meta] section")
    return cs
