"""Linear blendshape rigs, deformation transfer onto new identities,
weight streams, and the physics-grounded expression evaluation that
supplies training targets."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import mesh as vm
from .errors import FormatError, ValidationError
from .lhm import LayeredHeadModel
from .mesh import TriangleMesh

# The production rig uses 52 tracked shapes; the desk rig ships 12
# procedural ones. Count is configurable everywhere.
DESK_SHAPE_NAMES = (
    "jaw_open", "jaw_left", "jaw_right", "smile_left", "smile_right",
    "pucker", "brow_up", "brow_down", "blink_left", "blink_right",
    "cheek_puff", "sneer",
)


@dataclass
class BlendshapeRig:
    """Neutral surface plus per-shape displacement fields (mm)."""

    neutral: TriangleMesh
    deltas: np.ndarray       # (n_shapes, V, 3)
    names: tuple

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, float)
        if self.deltas.ndim != 3 or self.deltas.shape[1] != self.neutral.n_vertices:
            raise ValidationError("delta fields must be (n, V, 3) over the neutral")
        if len(self.names) != len(self.deltas):
            raise ValidationError("one name per shape required")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("shape names must be unique")

    @property
    def n_shapes(self) -> int:
        return len(self.deltas)


@dataclass
class WeightStream:
    """Time-stamped blending weight vectors."""

    timestamps: np.ndarray   # (T,) seconds, strictly increasing
    weights: np.ndarray      # (T, n_shapes)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        self.weights = np.asarray(self.weights, float)
        if not np.isfinite(self.weights).all():
            raise ValidationError("weights must be finite")
        if len(self.timestamps) != len(self.weights):
            raise ValidationError("one timestamp per frame")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.weights)


def evaluate_linear(rig: BlendshapeRig, weights: np.ndarray) -> np.ndarray:
    """neutral + sum_i w_i * delta_i, (V, 3)."""
    weights = np.asarray(weights, float).ravel()
    if len(weights) != rig.n_shapes:
        raise ValidationError(
            f"weight vector length {len(weights)} != {rig.n_shapes} shapes")
    return rig.neutral.vertices + np.einsum("i,ivj->vj", weights, rig.deltas)


# ----------------------------------------------------------------------------
# Deformation transfer


def _triangle_frames(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-triangle 3x3 frames [e1, e2, n_hat * sqrt(area-ish)] used for
    source gradient extraction (normal-extended edge matrices)."""
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1)
    if (nn < 1e-12).any():
        bad = np.flatnonzero(nn < 1e-12)
        raise ValidationError(f"degenerate triangles: {bad[:20].tolist()}")
    n = n / np.sqrt(nn)[:, None]
    return np.stack([e1, e2, n], axis=2)


def deformation_transfer(template_neutral: TriangleMesh,
                         template_shape: np.ndarray,
                         target_neutral: TriangleMesh) -> np.ndarray:
    """Copy per-triangle deformation gradients of a template expression
    onto a target identity and solve for consistent vertex positions.

    The target is rigidly pre-aligned to the template so the transfer
    commutes with global rigid motions; the least-squares gradient-match
    is anchored at one vertex and the result re-gauged so the mean
    displacement matches the source's. Transferring onto the template
    itself reproduces the shape exactly.
    """
    faces = template_neutral.faces
    if (target_neutral.faces != faces).any():
        raise ValidationError("target must share the template topology")
    template_shape = np.asarray(template_shape, float)


    # rigid pre-alignment of the target to the template frame
    from .physics import best_fit_rigid
    r_align, t_align = best_fit_rigid(target_neutral.vertices,
                                      template_neutral.vertices)
    tgt = target_neutral.vertices @ r_align.T + t_align

    src_rest = _triangle_frames(template_neutral.vertices, faces)
    src_def = _triangle_frames(template_shape, faces)
    grads = src_def @ np.linalg.inv(src_rest)  # (F, 3, 3)

    # least squares on the target: match the two edge columns of each
    # transferred gradient
    n_v = target_neutral.n_vertices
    e1_t = tgt[faces[:, 1]] - tgt[faces[:, 0]]
    e2_t = tgt[faces[:, 2]] - tgt[faces[:, 0]]
    b1 = np.einsum("fij,fj->fi", grads, e1_t)
    b2 = np.einsum("fij,fj->fi", grads, e2_t)

    n_f = len(faces)
    rows = np.repeat(np.arange(2 * n_f), 2)
    cols = np.empty(4 * n_f, int)
    vals = np.empty(4 * n_f)
    cols[0::4] = faces[:, 1]; vals[0::4] = 1.0
    cols[1::4] = faces[:, 0]; vals[1::4] = -1.0
    cols[2::4] = faces[:, 2]; vals[2::4] = 1.0
    cols[3::4] = faces[:, 0]; vals[3::4] = -1.0
    g = sparse.coo_matrix((vals, (rows, cols)), shape=(2 * n_f, n_v)).tocsr()
    rhs = np.empty((2 * n_f, 3))
    rhs[0::2] = b1
    rhs[1::2] = b2

    gtg = (g.T @ g).tolil()
    gtb = g.T @ rhs
    # anchor vertex 0 to make the system nonsingular
    anchor_pos = tgt[0] + (template_shape[0] - template_neutral.vertices[0])
    gtg[0, :] = 0.0
    gtg[0, 0] = 1.0
    gtb[0] = anchor_pos
    x = spsolve(gtg.tocsc(), gtb)
    if x.ndim == 1:
        x = x.reshape(-1, 3)

    # translation gauge: copy the source's mean displacement
    d_src = (template_shape - template_neutral.vertices).mean(axis=0)
    x = x + (tgt.mean(axis=0) + d_src - x.mean(axis=0))

    # undo the rigid pre-alignment
    return (x - t_align) @ r_align


def transfer_rig(template_rig: BlendshapeRig,
                 target_neutral: TriangleMesh) -> BlendshapeRig:
    """Deformation-transfer every shape of a rig onto a new identity."""
    deltas = np.empty((template_rig.n_shapes, target_neutral.n_vertices, 3))
    for i in range(template_rig.n_shapes):
        shape = template_rig.neutral.vertices + template_rig.deltas[i]
        moved = deformation_transfer(template_rig.neutral, shape, target_neutral)
        deltas[i] = moved - target_neutral.vertices
    return BlendshapeRig(neutral=target_neutral, deltas=deltas,
                         names=template_rig.names)


# ----------------------------------------------------------------------------
# Procedural desk rig


def _region_weight(skin: TriangleMesh, center, sigma: float) -> np.ndarray:
    v = skin.vertices
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    c = np.asarray(center, float)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1, 1))
    return np.exp(-0.5 * (ang / sigma) ** 2)


def build_desk_rig(lhm: LayeredHeadModel) -> BlendshapeRig:
    """Twelve procedural expression shapes on a synthetic head.

    Jaw shapes rotate the lower face about a hinge axis through the ear
    line with smooth falloff; the rest are directional region
    displacements. Amplitudes are desk-plausible millimeters.
    """
    skin = lhm.skin
    v = skin.vertices
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    normals = vm.area_weighted_normals(skin)
    scale = float(np.linalg.norm(v, axis=1).mean()) / 85.0

    hinge_y = 0.05 * np.linalg.norm(v, axis=1).mean()
    hinge_z = -0.25 * np.linalg.norm(v, axis=1).mean()

    # mandible-born motion stops at the mouth line: skin over the maxilla
    # stays put when the jaw moves
    lat = np.degrees(np.arcsin(np.clip(dirs[:, 1], -1, 1)))
    az = np.degrees(np.arctan2(dirs[:, 0], dirs[:, 2]))
    mouth_lat = -21.0 - 0.002 * az ** 2
    below_mouth = np.clip((mouth_lat - lat) / 6.0, 0.0, 1.0)
    jaw_zone = _region_weight(skin, (0, -0.55, 0.75), 0.55)
    jaw_zone = jaw_zone * below_mouth

    def jaw_rotation(angle_deg, axis):
        ang = np.deg2rad(angle_deg)
        k = np.asarray(axis, float)
        k = k / np.linalg.norm(k)
        pivot = np.array([0.0, hinge_y, hinge_z])
        p = v - pivot
        rot = (p * np.cos(ang) + np.cross(k, p) * np.sin(ang)
               + k[None, :] * (p @ k)[:, None] * (1 - np.cos(ang)))
        return (rot + pivot - v) * jaw_zone[:, None]

    deltas = []
    deltas.append(jaw_rotation(-9.0, (1, 0, 0)))                     # jaw_open
    # lateral jaw shapes are translational at the chin (laterotrusion);
    # a mid-head yaw would twist the mandible against the zone falloff
    deltas.append(jaw_zone[:, None] * np.array([-5.0, 0, 0]) * scale)  # jaw_left
    deltas.append(jaw_zone[:, None] * np.array([5.0, 0, 0]) * scale)   # jaw_right
    for sx in (-1, 1):  # smile_left / smile_right
        w = _region_weight(skin, (sx * 0.45, -0.32, 0.82), 0.22)
        pull = np.array([sx * 3.5, 3.0, 1.0]) * scale
        deltas.append(w[:, None] * pull)
    mouth = _region_weight(skin, (0, -0.36, 0.93), 0.24)
    deltas.append(mouth[:, None] * (np.array([0, 0, 4.5]) * scale)
                  - (mouth * np.abs(dirs[:, 0]) * 6.0 * scale)[:, None]
                  * np.array([1.0, 0, 0]) * np.sign(dirs[:, 0])[:, None])  # pucker
    brow = _region_weight(skin, (0, 0.36, 0.92), 0.30)
    deltas.append(brow[:, None] * np.array([0, 4.0, 0.5]) * scale)   # brow_up
    deltas.append(brow[:, None] * np.array([0, -3.0, 0.3]) * scale)  # brow_down
    for sx in (-1, 1):  # blink_left / blink_right
        w = _region_weight(skin, (sx * 0.30, 0.20, 0.92), 0.12)
        deltas.append(w[:, None] * np.array([0, -2.5, -0.5]) * scale)
    for shape, (c, s, d) in {"cheek_puff": ((0, -0.25, 0.80), 0.38, (0, 0, 0)),
                             "sneer": ((0, -0.28, 0.93), 0.16, (0, 2.5, 0.5))}.items():
        w = _region_weight(skin, c, s)
        if shape == "cheek_puff":
            both = (_region_weight(skin, (0.55, -0.2, 0.81), 0.30)
                    + _region_weight(skin, (-0.55, -0.2, 0.81), 0.30))
            deltas.append(both[:, None] * normals * 3.0 * scale)
        else:
            deltas.append(w[:, None] * np.array(d) * scale)

    return BlendshapeRig(neutral=skin, deltas=np.array(deltas),
                         names=DESK_SHAPE_NAMES)


# ----------------------------------------------------------------------------
# Weight streams


def sample_weights(n_shapes: int, count: int, rng: np.random.Generator,
                   max_active: int = 6, max_weight: float = 1.2,
                   max_delta: float = 0.2, segment_length: int = 12,
                   fps: float = 30.0) -> WeightStream:
    """Synthetic temporally smooth sparse weight stream.

    Each segment activates at most ``max_active`` shapes whose weights
    follow Beta-distributed targets with ramped transitions; frame to
    frame deltas stay within ``max_delta``. Real recordings plug in
    through the CSV format instead.
    """
    weights = np.zeros((count, n_shapes))
    current = np.zeros(n_shapes)
    frame = 0
    while frame < count:
        k = int(rng.integers(1, min(max_active, n_shapes) + 1))
        active = rng.choice(n_shapes, size=k, replace=False)
        target = np.zeros(n_shapes)
        target[active] = rng.beta(2.0, 4.0, size=k) * max_weight
        for _ in range(segment_length):
            if frame >= count:
                break
            step = np.clip(target - current, -max_delta, max_delta)
            current = np.clip(current + step, 0.0, max_weight)
            weights[frame] = current
            frame += 1
        target[:] = 0.0  # ramp out before switching actives
        for _ in range(segment_length // 2):
            if frame >= count or np.abs(current).max() < 1e-9:
                break
            step = np.clip(target - current, -max_delta, max_delta)
            current = np.clip(current + step, 0.0, max_weight)
            weights[frame] = current
            frame += 1
    timestamps = np.arange(count) / fps
    return WeightStream(timestamps=timestamps, weights=weights)


def write_weights_csv(stream: WeightStream, path, header_comment: str = "") -> None:
    n = stream.weights.shape[1]
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("t," + ",".join(f"w_{i}" for i in range(n)) + "\n")
        for t, w in zip(stream.timestamps, stream.weights):
            fh.write(repr(float(t)) + "," + ",".join(repr(float(x)) for x in w) + "\n")


def read_weights_csv(path, n_shapes: int | None = None) -> WeightStream:
    timestamps, weights = [], []
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    header = lines[0].strip().split(",")
    if header[0] != "t":
        raise FormatError(f"{path}: first column must be 't'")
    n = len(header) - 1
    if n_shapes is not None and n != n_shapes:
        raise FormatError(f"{path}: expected {n_shapes + 1} columns, got {n + 1}")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.strip().split(",")
        if len(parts) != n + 1:
            raise FormatError(f"{path}:{lineno}: expected {n + 1} columns, "
                              f"got {len(parts)}")
        timestamps.append(float(parts[0]))
        weights.append([float(p) for p in parts[1:]])
    return WeightStream(timestamps=np.array(timestamps),
                        weights=np.array(weights))


# ----------------------------------------------------------------------------
# Ground-truth volumetric evaluation


def evaluate_volumetric_groundtruth(rig: BlendshapeRig, weights: np.ndarray,
                                    simulator, energy_log: list | None = None):
    """The training-target generator: linear blend, inverse model,
    forward model, collision pass (inside the simulator).

    Returns (plausible_surface, linear_surface, state). The blend basis
    is the caller's choice: pass the raw rig (the network's input
    convention, the default everywhere) or the physics-corrected one
    from ``make_plausible_rig``.
    """
    linear = evaluate_linear(rig, weights)
    state, _ = simulator.inverse(linear, energy_log=energy_log)
    plausible = simulator.forward(state, energy_log=energy_log)
    return plausible, linear, state


def make_plausible_rig(rig: BlendshapeRig, simulator) -> BlendshapeRig:
    """Replace every shape by its physics-corrected counterpart (the
    alternative blend basis some pipelines prefer)."""
    deltas = np.empty_like(rig.deltas)
    for i in range(rig.n_shapes):
        state, _ = simulator.inverse(rig.neutral.vertices + rig.deltas[i])
        deltas[i] = simulator.forward(state) - rig.neutral.vertices
    return BlendshapeRig(neutral=rig.neutral, deltas=deltas, names=rig.names)


# ----------------------------------------------------------------------------
# Rig persistence: neutral OBJ + per-shape delta OBJs + manifest


def save_rig(rig: BlendshapeRig, directory, manifest_extra: dict | None = None):
    os.makedirs(directory, exist_ok=True)
    vm.write_obj(rig.neutral, os.path.join(directory, "neutral.obj"))
    for name, delta in zip(rig.names, rig.deltas):
        mesh = TriangleMesh(delta, rig.neutral.faces)
        vm.write_obj(mesh, os.path.join(directory, f"delta_{name}.obj"))
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("format = blendshape rig 1\n")
        fh.write("convention = neutral plus weighted deltas\n")
        fh.write(f"shapes = {','.join(rig.names)}\n")
        for key, value in (manifest_extra or {}).items():
            fh.write(f"{key} = {value}\n")


def load_rig(directory) -> BlendshapeRig:
    manifest = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    names = tuple(manifest["shapes"].split(","))
    neutral = vm.read_obj(os.path.join(directory, "neutral.obj"))
    deltas = np.stack([
        vm.read_obj(os.path.join(directory, f"delta_{name}.obj")).vertices
        for name in names])
    return BlendshapeRig(neutral=neutral, deltas=deltas, names=names)
