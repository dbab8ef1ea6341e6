"""Ten-cylinder articulated body driven by a 31-value pose vector.

Pose layout (indices into the vector)::

    0-2    root translation (mm)
    3-5    root orientation, XYZ Euler (rad)
    6-7    spine bend: forward (about x), sideways (about y)
    8-10   head nod (x), tilt (y), turn (z); the turn is applied last
    11-13  left shoulder, XYZ Euler     14-15  left elbow flex, twist
    16-18  right shoulder, XYZ Euler    19-20  right elbow flex, twist
    21-23  left hip, XYZ Euler          24-25  left knee flex, twist
    26-28  right hip, XYZ Euler         29-30  right knee flex, twist

Every part owns a joint frame. At the zero pose all joint frames are
aligned with the world (x to the subject's right, y forward, z up), and a
part's cylinder runs from its joint origin along a fixed rest direction
(torso and head up, arms sideways, legs down), giving a T-pose. Moving a
joint rotates its frame relative to the parent's frame; child joint
origins are fixed offsets in the parent's frame.

The cylinders of the torso and the thighs hang off a ``root`` (pelvis)
frame carrying the root translation and orientation; the spine bend only
tilts the torso and everything attached to it.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import MalformedTree, ParseError
from .geometry import CameraModel, project_points

N_DOF = 31

PART_NAMES = (
    "TORSO",
    "left_thigh",
    "left_calf",
    "right_thigh",
    "right_calf",
    "left_upper_arm",
    "left_lower_arm",
    "right_upper_arm",
    "right_lower_arm",
    "head",
)

DOF_NAMES = (
    "root_tx", "root_ty", "root_tz",
    "root_rx", "root_ry", "root_rz",
    "spine_forward", "spine_side",
    "head_rx", "head_ry", "head_rz",
    "l_shoulder_rx", "l_shoulder_ry", "l_shoulder_rz", "l_elbow_flex", "l_elbow_twist",
    "r_shoulder_rx", "r_shoulder_ry", "r_shoulder_rz", "r_elbow_flex", "r_elbow_twist",
    "l_hip_rx", "l_hip_ry", "l_hip_rz", "l_knee_flex", "l_knee_twist",
    "r_hip_rx", "r_hip_ry", "r_hip_rz", "r_knee_flex", "r_knee_twist",
)
DOF_INDEX = {name: i for i, name in enumerate(DOF_NAMES)}

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])

#: Cylinder direction in the part's joint frame.
REST_AXIS = {
    "TORSO": _Z,
    "head": _Z,
    "left_upper_arm": -_X,
    "left_lower_arm": -_X,
    "right_upper_arm": _X,
    "right_lower_arm": _X,
    "left_thigh": -_Z,
    "left_calf": -_Z,
    "right_thigh": -_Z,
    "right_calf": -_Z,
}

# (kind, first dof index, extra): "euler" uses 3 dofs, "neck" 3 (turn about z,
# then nod and tilt, so the turn is not a spin of the head about its own
# axis), "spine" 2, "hinge" 2 with (flex axis, twist axis) in the joint frame.
_JOINTS = {
    "TORSO": ("spine", 6, None),
    "head": ("neck", 8, None),
    "left_upper_arm": ("euler", 11, None),
    "left_lower_arm": ("hinge", 14, (-_Z, -_X)),
    "right_upper_arm": ("euler", 16, None),
    "right_lower_arm": ("hinge", 19, (_Z, _X)),
    "left_thigh": ("euler", 21, None),
    "left_calf": ("hinge", 24, (-_X, -_Z)),
    "right_thigh": ("euler", 26, None),
    "right_calf": ("hinge", 29, (-_X, -_Z)),
}


@dataclass(frozen=True)
class CylinderSpec:
    name: str
    base_radius: float
    top_radius: float
    length: float
    parent: str = "root"
    attach_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.name not in PART_NAMES:
            raise MalformedTree(f"unknown part name {self.name!r}")
        if not (self.base_radius > 0 and self.top_radius > 0 and self.length > 0):
            raise ValueError(f"{self.name}: radii and length must be positive")
        object.__setattr__(self, "attach_offset", tuple(float(x) for x in self.attach_offset))


class BodyModel:
    """The ten cylinders plus their tree, in evaluation (parent-first) order."""

    def __init__(self, parts):
        parts = list(parts)
        names = [p.name for p in parts]
        if sorted(names) != sorted(PART_NAMES):
            missing = set(PART_NAMES) - set(names)
            dup = {n for n in names if names.count(n) > 1}
            raise MalformedTree(f"body needs each of the 10 parts once (missing {sorted(missing)}, duplicated {sorted(dup)})")
        by_name = {p.name: p for p in parts}
        if by_name["TORSO"].parent != "root":
            raise MalformedTree("TORSO must hang from the root frame")
        for p in parts:
            if p.parent != "root" and p.parent not in by_name:
                raise MalformedTree(f"{p.name}: unknown parent {p.parent!r}")
        order = []
        placed = {"root"}
        pending = list(PART_NAMES)
        while pending:
            ready = [n for n in pending if by_name[n].parent in placed]
            if not ready:
                raise MalformedTree(f"cycle among parts {pending}")
            for n in ready:
                order.append(n)
                placed.add(n)
                pending.remove(n)
        self.parts = {n: by_name[n] for n in PART_NAMES}
        self.order = tuple(order)
        self.index = {n: i for i, n in enumerate(PART_NAMES)}
        self.base_radii = np.array([self.parts[n].base_radius for n in PART_NAMES])
        self.top_radii = np.array([self.parts[n].top_radius for n in PART_NAMES])
        self.lengths = np.array([self.parts[n].length for n in PART_NAMES])

    def __repr__(self):
        return f"BodyModel({len(self.parts)} parts)"

    def __eq__(self, other):
        return isinstance(other, BodyModel) and self.parts == other.parts

    def __hash__(self):
        return hash(tuple(self.parts.values()))


@dataclass(frozen=True)
class PlacedCylinder:
    name: str
    base_center: np.ndarray
    top_center: np.ndarray
    base_radius: float
    top_radius: float


@dataclass
class ProjectedCylinder:
    """2-D outline of one cylinder in one camera.

    ``empty`` marks cylinders that are (partly) behind the camera; their
    sample arrays are empty.
    """

    name: str
    camera_id: int
    contour: np.ndarray
    contour_samples: np.ndarray
    interior_samples: np.ndarray
    empty: bool = False


def load_body(path) -> BodyModel:
    parts = []
    text = Path(path).read_text(encoding="utf-8")
    for no, line in enumerate(text.splitlines(), start=1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] != "part" or len(toks) != 9:
            raise ParseError("expected 'part <name> <parent|root> <base_r> <top_r> <length> <ox> <oy> <oz>'", no)
        try:
            nums = [float(t) for t in toks[3:]]
        except ValueError:
            raise ParseError("non-numeric body dimension", no) from None
        try:
            parts.append(CylinderSpec(toks[1], nums[0], nums[1], nums[2], toks[2], tuple(nums[3:])))
        except ValueError as exc:
            raise ParseError(str(exc), no) from None
    return BodyModel(parts)


def save_body(body: BodyModel, path) -> None:
    lines = ["# part <name> <parent|root> <base_r> <top_r> <length> <ox> <oy> <oz>"]
    for n in PART_NAMES:
        p = body.parts[n]
        ox, oy, oz = p.attach_offset
        lines.append(
            f"part {n} {p.parent} {p.base_radius!r} {p.top_radius!r} {p.length!r} {ox!r} {oy!r} {oz!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_body() -> BodyModel:
    ref = resources.files("voxelcap") / "data" / "default_body.txt"
    with resources.as_file(ref) as path:
        return load_body(path)


def rest_pose(root_translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    pose = np.zeros(N_DOF)
    pose[:3] = root_translation
    return pose


# ---------------------------------------------------------------------------
# Rotations, batched over leading axes
# ---------------------------------------------------------------------------


def axis_rotation(axis, angle) -> np.ndarray:
    """Rodrigues rotation about a fixed unit ``axis``; ``angle`` may be an array."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = np.asarray(angle, dtype=np.float64)
    c = np.cos(th)[..., None, None]
    s = np.sin(th)[..., None, None]
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def euler_xyz(angles) -> np.ndarray:
    """``Rx(a) @ Ry(b) @ Rz(c)`` for ``angles[..., :3] = (a, b, c)``."""
    ang = np.asarray(angles, dtype=np.float64)
    return axis_rotation(_X, ang[..., 0]) @ axis_rotation(_Y, ang[..., 1]) @ axis_rotation(_Z, ang[..., 2])


def _joint_rotation(name, pose):
    kind, i, extra = _JOINTS[name]
    if kind == "euler":
        return euler_xyz(pose[..., i:i + 3])
    if kind == "neck":
        return axis_rotation(_Z, pose[..., i + 2]) @ axis_rotation(_X, pose[..., i]) @ axis_rotation(_Y, pose[..., i + 1])
    if kind == "spine":
        return axis_rotation(_X, pose[..., i]) @ axis_rotation(_Y, pose[..., i + 1])
    flex_axis, twist_axis = extra
    return axis_rotation(twist_axis, pose[..., i + 1]) @ axis_rotation(flex_axis, pose[..., i])


def forward_kinematics_batch(poses, body: BodyModel):
    """Cylinder end points for a batch of poses.

    Args:
        poses: ``(..., 31)`` array.
        body: the body model.

    Returns:
        ``(base, top)``, each ``(..., 10, 3)``, parts in table order.
    """
    pose = np.asarray(poses, dtype=np.float64)
    if pose.shape[-1] != N_DOF:
        raise ValueError(f"pose vectors must have {N_DOF} entries, got {pose.shape[-1]}")
    lead = pose.shape[:-1]
    frames = {"root": (euler_xyz(pose[..., 3:6]), pose[..., 0:3])}
    base = np.empty(lead + (10, 3))
    top = np.empty(lead + (10, 3))
    for name in body.order:
        spec = body.parts[name]
        G_parent, o_parent = frames[spec.parent]
        origin = o_parent + G_parent @ np.asarray(spec.attach_offset)
        G = G_parent @ _joint_rotation(name, pose)
        frames[name] = (G, origin)
        k = body.index[name]
        base[..., k, :] = origin
        top[..., k, :] = origin + spec.length * (G @ REST_AXIS[name])
    return base, top


def forward_kinematics(pose, body: BodyModel | None = None) -> list:
    body = default_body() if body is None else body
    base, top = forward_kinematics_batch(np.asarray(pose, dtype=np.float64).reshape(N_DOF), body)
    return [
        PlacedCylinder(n, base[k], top[k], body.parts[n].base_radius, body.parts[n].top_radius)
        for k, n in enumerate(PART_NAMES)
    ]


def joint_centers(pose, body: BodyModel) -> np.ndarray:
    """Distinct joint locations ``(..., 15, 3)``: every cylinder base, then
    the free ends of the leaf parts (head top, hands, feet)."""
    base, top = forward_kinematics_batch(pose, body)
    parents = {p.parent for p in body.parts.values()}
    leaves = [body.index[n] for n in PART_NAMES if n not in parents]
    return np.concatenate([base, top[..., leaves, :]], axis=-2)


# ---------------------------------------------------------------------------
# Projection into a camera
# ---------------------------------------------------------------------------

N_CIRCLE = 32
DEFAULT_N_CONTOUR = 16
DEFAULT_N_INTERIOR = 25
_MIN_DEPTH = 1e-6


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _grid_params(n):
    rows = max(1, int(round(np.sqrt(n))))
    cols = -(-n // rows)
    a = (np.arange(rows) + 0.5) / rows
    b = (np.arange(cols) + 0.5) / cols
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.ravel()[:n], B.ravel()[:n]


def _polygon_samples(poly, n):
    """``n`` points evenly spaced by arc length along a closed polygon ``(..., V, 2)``."""
    nxt = np.roll(poly, -1, axis=-2)
    seg = np.linalg.norm(nxt - poly, axis=-1)
    cum = np.concatenate([np.zeros(seg.shape[:-1] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)
    total = cum[..., -1:]
    s = total * ((np.arange(n) + 0.5) / n)
    # edge index for every target arc length
    idx = (s[..., :, None] >= cum[..., None, 1:-1]).sum(axis=-1)
    start = np.take_along_axis(cum[..., :-1], idx, axis=-1)
    length = np.take_along_axis(seg, idx, axis=-1)
    frac = np.where(length > 0, (s - start) / np.where(length > 0, length, 1.0), 0.0)
    p0 = np.take_along_axis(poly, idx[..., None], axis=-2)
    p1 = np.take_along_axis(nxt, idx[..., None], axis=-2)
    return p0 + frac[..., None] * (p1 - p0)


def project_cylinders_batch(
    base,
    top,
    base_radii,
    top_radii,
    camera: CameraModel,
    n_contour: int = DEFAULT_N_CONTOUR,
    n_interior: int = DEFAULT_N_INTERIOR,
):
    """Vectorised tangent-quadrilateral projection.

    Args:
        base, top: ``(..., P, 3)`` cylinder end centres.
        base_radii, top_radii: ``(P,)`` radii.

    Returns:
        dict with ``contour`` ``(..., P, 4, 2)``, ``contour_samples``
        ``(..., P, n_contour, 2)``, ``interior_samples`` ``(..., P, n_interior, 2)``,
        ``valid`` ``(..., P)`` and ``degenerate`` ``(..., P)``.
    """
    base = np.asarray(base, dtype=np.float64)
    top = np.asarray(top, dtype=np.float64)
    r = np.stack([np.broadcast_to(base_radii, base.shape[:-1]),
                  np.broadcast_to(top_radii, base.shape[:-1])], axis=-1)  # (..., P, 2)
    axis = _unit(top - base)
    mid = 0.5 * (base + top)
    view = mid - camera.center
    # e1 is perpendicular to the axis and to the line of sight, so the
    # silhouette tangent points sit near theta = 0 and pi
    e1 = np.cross(axis, view)
    weak = np.linalg.norm(e1, axis=-1) < 1e-9 * np.maximum(np.linalg.norm(view, axis=-1), 1.0)
    helper = np.where(np.abs(axis[..., :1]) < 0.9, _X, _Y)
    e1 = np.where(weak[..., None], np.cross(axis, helper), e1)
    e1 = _unit(e1)
    e2 = np.cross(axis, e1)

    theta = 2.0 * np.pi * np.arange(N_CIRCLE) / N_CIRCLE
    ring = np.cos(theta)[:, None] * e1[..., None, :] + np.sin(theta)[:, None] * e2[..., None, :]
    centers = np.stack([base, top], axis=-2)  # (..., P, 2, 3)
    circles = centers[..., None, :] + r[..., None, None] * ring[..., None, :, :]  # (..., P, 2, K, 3)
    uv, depth = project_points(camera, circles)
    cuv, cdepth = project_points(camera, centers)
    valid = np.all(depth > _MIN_DEPTH, axis=(-1, -2)) & np.all(cdepth > _MIN_DEPTH, axis=-1)
    uv = np.where(valid[..., None, None, None], uv, 0.0)
    cuv = np.where(valid[..., None, None], cuv, 0.0)

    d = cuv[..., 1, :] - cuv[..., 0, :]
    dlen = np.linalg.norm(d, axis=-1)
    radius_px = np.linalg.norm(uv - cuv[..., None, :], axis=-1).max(axis=(-1, -2))
    degenerate = dlen <= 1e-6 * (1.0 + radius_px)
    dirn = np.where(degenerate[..., None], np.array([1.0, 0.0]), d / np.where(dlen > 0, dlen, 1.0)[..., None])
    normal = np.stack([-dirn[..., 1], dirn[..., 0]], axis=-1)

    off = np.einsum("...ekc,...c->...ek", uv - cuv[..., 0:1, None, :], normal)
    imin = off.argmin(axis=-1)
    imax = off.argmax(axis=-1)
    pmin = np.take_along_axis(uv, imin[..., None, None], axis=-2)[..., 0, :]  # (..., P, 2, 2)
    pmax = np.take_along_axis(uv, imax[..., None, None], axis=-2)[..., 0, :]
    quad = np.stack([pmin[..., 0, :], pmin[..., 1, :], pmax[..., 1, :], pmax[..., 0, :]], axis=-2)

    contour_samples = _polygon_samples(quad, n_contour)
    a, b = _grid_params(n_interior)
    q0, q1, q2, q3 = (quad[..., i, None, :] for i in range(4))
    aa = a[:, None]
    bb = b[:, None]
    interior = (1 - aa) * ((1 - bb) * q0 + bb * q3) + aa * ((1 - bb) * q1 + bb * q2)

    if np.any(degenerate & valid):
        # end-on view: use the larger projected end circle instead
        big = np.where(r[..., 0] >= r[..., 1], 0, 1)
        circ = np.take_along_axis(uv, big[..., None, None, None], axis=-3)[..., 0, :, :]
        cc = np.take_along_axis(cuv, big[..., None, None], axis=-2)[..., 0, :]
        rad = np.linalg.norm(circ - cc[..., None, :], axis=-1).mean(axis=-1)
        circ_samples = _polygon_samples(circ, n_contour)
        half = rad[..., None, None] / np.sqrt(2.0)
        circ_interior = cc[..., None, :] + half * np.stack([2 * a - 1, 2 * b - 1], axis=-1)
        sel = degenerate[..., None, None]
        contour_samples = np.where(sel, circ_samples, contour_samples)
        interior = np.where(sel, circ_interior, interior)
        extreme = np.stack([
            cc + np.array([-1.0, 0.0]) * rad[..., None],
            cc + np.array([0.0, -1.0]) * rad[..., None],
            cc + np.array([1.0, 0.0]) * rad[..., None],
            cc + np.array([0.0, 1.0]) * rad[..., None],
        ], axis=-2)
        quad = np.where(sel, extreme, quad)

    return {
        "contour": quad,
        "contour_samples": contour_samples,
        "interior_samples": interior,
        "valid": valid,
        "degenerate": degenerate,
    }


def project_cylinders(
    placed,
    camera: CameraModel,
    n_contour: int = DEFAULT_N_CONTOUR,
    n_interior: int = DEFAULT_N_INTERIOR,
) -> list:
    placed = list(placed)
    if not placed:
        return []
    base = np.array([p.base_center for p in placed])
    top = np.array([p.top_center for p in placed])
    r0 = np.array([p.base_radius for p in placed])
    r1 = np.array([p.top_radius for p in placed])
    out = project_cylinders_batch(base, top, r0, r1, camera, n_contour, n_interior)
    result = []
    for k, p in enumerate(placed):
        if not out["valid"][k]:
            empty = np.zeros((0, 2))
            result.append(ProjectedCylinder(p.name, camera.id, empty, empty, empty, True))
        else:
            result.append(ProjectedCylinder(
                p.name,
                camera.id,
                out["contour"][k],
                out["contour_samples"][k],
                out["interior_samples"][k],
            ))
    return result


# ---------------------------------------------------------------------------
# Pose CSV
# ---------------------------------------------------------------------------


def format_pose_row(frame: int, pose) -> str:
    vals = np.asarray(pose, dtype=np.float64).reshape(N_DOF)
    return ",".join([str(int(frame))] + [f"{v:.9f}" for v in vals.tolist()])


def write_poses_csv(path, frames, poses) -> None:
    lines = ["frame," + ",".join(DOF_NAMES)]
    lines += [format_pose_row(f, p) for f, p in zip(frames, poses)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses_csv(path):
    """Returns ``(frames, poses)`` with poses shaped ``(n, 31)``."""
    frames, poses = [], []
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("frame"):
            continue
        toks = line.split(",")
        if len(toks) != N_DOF + 1:
            raise ParseError(f"pose row needs {N_DOF + 1} fields, got {len(toks)}", no)
        try:
            frames.append(int(toks[0]))
            poses.append([float(t) for t in toks[1:]])
        except ValueError:
            raise ParseError("non-numeric pose field", no) from None
    return frames, np.array(poses, dtype=np.float64).reshape(-1, N_DOF)
