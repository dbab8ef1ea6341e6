"""Pinhole cameras, point projection and calibration-file I/O.

World coordinates are millimetres in a right-handed frame. Pixel
coordinates are continuous; integer values sit on pixel centres, so pixel
``(i, j)`` covers ``[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DegenerateCamera, ParseError, PointAtInfinity

#: Homogeneous scales with magnitude below this are treated as at infinity.
INFINITY_EPS = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """A calibrated pinhole view.

    Attributes:
        projection: 3x4 matrix mapping homogeneous world mm to homogeneous pixels.
        width: Image width in pixels.
        height: Image height in pixels.
        id: Index of the camera inside its rig.
    """

    projection: np.ndarray
    width: int
    height: int
    id: int = 0

    def __post_init__(self):
        P = np.array(self.projection, dtype=np.float64)
        if P.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("projection contains non-finite entries")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("camera width and height must be positive")
        if abs(np.linalg.det(P[:, :3])) < 1e-12 * max(1.0, np.abs(P[:, :3]).max() ** 3):
            raise DegenerateCamera(f"camera {self.id}: left 3x3 block is singular")
        P.setflags(write=False)
        object.__setattr__(self, "projection", P)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "id", int(self.id))

    @property
    def center(self) -> np.ndarray:
        """Optical centre in world coordinates (null vector of the projection)."""
        M = self.projection[:, :3]
        return -np.linalg.solve(M, self.projection[:, 3])

    def project(self, points):
        """Vectorised projection; see :func:`project_points`."""
        return project_points(self, points)

    def in_image(self, uv) -> np.ndarray:
        """True where continuous pixel coordinates fall on a pixel of the image."""
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        with np.errstate(invalid="ignore"):
            return (
                (u >= -0.5) & (u < self.width - 0.5)
                & (v >= -0.5) & (v < self.height - 0.5)
            )


@dataclass(frozen=True)
class CameraRig:
    """Ordered list of cameras whose ids run 0..n-1."""

    cameras: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cams = tuple(self.cameras)
        ids = [c.id for c in cams]
        if ids != list(range(len(cams))):
            raise ValueError(f"camera ids must be contiguous from 0 in order, got {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]


def project_point(camera: CameraModel, point):
    """Project a single world point.

    Returns:
        ``((u, v), depth)`` where depth is the homogeneous scale ``w``. Points
        with ``w <= 0`` are behind the camera; bounds checking is left to the
        caller.

    Raises:
        PointAtInfinity: if ``|w| < 1e-9``.
    """
    X = np.asarray(point, dtype=np.float64).reshape(3)
    x, y, w = camera.projection @ np.append(X, 1.0)
    if abs(w) < INFINITY_EPS:
        raise PointAtInfinity(f"point {X.tolist()} projects to infinity in camera {camera.id}")
    return (x / w, y / w), w


def project_points(camera: CameraModel, points):
    """Project an ``(..., 3)`` array of points.

    Returns ``(uv, depth)`` with ``uv`` of shape ``(..., 2)``. Entries at
    infinity get NaN pixel coordinates instead of raising.
    """
    pts = np.asarray(points, dtype=np.float64)
    P = camera.projection
    x = pts @ P[:, :3].T + P[:, 3]
    w = x[..., 2]
    ok = np.abs(w) >= INFINITY_EPS
    safe_w = np.where(ok, w, 1.0)
    uv = x[..., :2] / safe_w[..., None]
    uv[~ok] = np.nan
    return uv, w


def in_view(camera: CameraModel, uv, depth) -> np.ndarray:
    """Projection lands on the image and in front of the camera."""
    with np.errstate(invalid="ignore"):
        return (np.asarray(depth) > 0) & camera.in_image(uv)


def look_at_projection(center, target, focal, width, height, up=(0.0, 0.0, 1.0)):
    """Build ``K [R | t]`` for a camera at ``center`` looking at ``target``.

    Image x runs right and image y runs down; the principal point is the
    image centre ``((width - 1) / 2, (height - 1) / 2)`` in pixel-centre
    coordinates.
    """
    C = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - C
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        raise DegenerateCamera("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    K = np.array([
        [focal, 0.0, (width - 1) / 2.0],
        [0.0, focal, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return K @ np.hstack([R, (-R @ C)[:, None]])


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"expected decimal numbers: {exc}", lineno) from None


def load_rig(path) -> CameraRig:
    """Read a calibration file.

    Format::

        ncams <K>
        cam <id> <width> <height>
        <4 reals>
        <4 reals>
        <4 reals>
        ...

    Blank lines and ``#`` comments are ignored.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = [
        (no, ln.split("#", 1)[0].split())
        for no, ln in enumerate(text.splitlines(), start=1)
    ]
    lines = [(no, toks) for no, toks in lines if toks]
    if not lines:
        raise ParseError("empty calibration file", 1)

    no, toks = lines[0]
    if len(toks) != 2 or toks[0] != "ncams":
        raise ParseError("first line must be 'ncams <K>'", no)
    try:
        ncams = int(toks[1])
    except ValueError:
        raise ParseError(f"bad camera count {toks[1]!r}", no) from None
    if ncams < 0:
        raise ParseError("camera count must be non-negative", no)

    cams = []
    pos = 1
    for _ in range(ncams):
        if pos >= len(lines):
            raise ParseError(f"expected {ncams} cameras, found {len(cams)}", lines[-1][0])
        no, toks = lines[pos]
        if len(toks) != 4 or toks[0] != "cam":
            raise ParseError("expected 'cam <id> <width> <height>'", no)
        try:
            cid, w, h = (int(t) for t in toks[1:])
        except ValueError:
            raise ParseError("camera id, width and height must be integers", no) from None
        rows = []
        for r in range(3):
            if pos + 1 + r >= len(lines):
                raise ParseError("truncated projection matrix", lines[-1][0])
            rno, rtoks = lines[pos + 1 + r]
            if len(rtoks) != 4:
                raise ParseError(f"matrix row needs 4 numbers, got {len(rtoks)}", rno)
            rows.append(_floats(rtoks, rno))
        pos += 4
        try:
            cams.append(CameraModel(np.array(rows), w, h, cid))
        except DegenerateCamera:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), no) from None
    if pos != len(lines):
        raise ParseError("trailing content after last camera", lines[pos][0])
    try:
        return CameraRig(tuple(cams))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def save_rig(rig: CameraRig, path) -> None:
    out = [f"ncams {len(rig)}"]
    for cam in rig:
        out.append(f"cam {cam.id} {cam.width} {cam.height}")
        for row in cam.projection:
            out.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def sample_bilinear(image, uv, outside=None):
    """Bilinearly sample ``image`` at continuous pixel coordinates.

    ``image`` is ``(H, W)`` or ``(H, W, C)``; ``uv`` is ``(..., 2)`` with u
    along columns. Coordinates are clamped to the border before
    interpolation. When ``outside`` is given, samples that do not land on
    the image (or are NaN) take that value instead.
    """
    img = np.asarray(image)
    uv = np.asarray(uv, dtype=np.float64)
    h, w = img.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    finite = np.isfinite(u) & np.isfinite(v)
    uc = np.clip(np.where(finite, u, 0.0), 0.0, w - 1.0)
    vc = np.clip(np.where(finite, v, 0.0), 0.0, h - 1.0)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 1)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    img = img.astype(np.float64, copy=False)
    top = img[v0, u0] * (1.0 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1.0 - fu) + img[v1, u1] * fu
    out = top * (1.0 - fv) + bot * fv
    if outside is not None:
        with np.errstate(invalid="ignore"):
            inside = finite & (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)
        if img.ndim == 3:
            inside = inside[..., None]
        out = np.where(inside, out, outside)
    return out
