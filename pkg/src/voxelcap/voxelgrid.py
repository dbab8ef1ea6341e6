"""Occupancy fusion over a voxel volume and surface extraction.

Each voxel centre is projected into every view and the silhouette
likelihood there is read bilinearly. A per-view likelihood is formed for
the occupied and the empty hypothesis by marginalising a binary occluder
latent, the per-view terms are multiplied (in log space) and Bayes' rule
gives the occupancy posterior.

Volumes are stored as ``(zlen, ylen, xlen)`` C-order arrays, so the flat
index of voxel ``(i, j, k)`` is ``i + xlen * j + xlen * ylen * k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CountMismatch, ParseError
from .geometry import CameraRig, project_points, sample_bilinear
from .parallel import SERIAL, ParallelConfig, par_map_array

logger = logging.getLogger(__name__)

SOFT_MAX_SHAPE = (150, 150, 100)
#: Likelihood sampled for views in which a voxel is not visible.
UNINFORMATIVE_SLM = 0.5


@dataclass(frozen=True)
class VolumeOfInterest:
    origin: tuple
    spacing: float
    xlen: int
    ylen: int
    zlen: int

    def __post_init__(self):
        origin = tuple(float(x) for x in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three coordinates")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        for name in ("xlen", "ylen", "zlen"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
            object.__setattr__(self, name, int(getattr(self, name)))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        if any(n > m for n, m in zip((self.xlen, self.ylen, self.zlen), SOFT_MAX_SHAPE)):
            logger.warning(
                "volume %dx%dx%d exceeds the nominal %dx%dx%d maximum",
                self.xlen, self.ylen, self.zlen, *SOFT_MAX_SHAPE,
            )

    @classmethod
    def centered(cls, center, spacing, shape):
        shape = tuple(int(n) for n in shape)
        origin = np.asarray(center, dtype=np.float64) - 0.5 * spacing * np.array(shape)
        return cls(tuple(origin), spacing, *shape)

    @property
    def shape(self):
        """Array shape ``(zlen, ylen, xlen)``."""
        return (self.zlen, self.ylen, self.xlen)

    @property
    def size(self) -> int:
        return self.xlen * self.ylen * self.zlen

    @property
    def bounds(self):
        lo = np.array(self.origin)
        return lo, lo + self.spacing * np.array([self.xlen, self.ylen, self.zlen])

    def centers_range(self, start: int, stop: int) -> np.ndarray:
        """Centres of the voxels with flat indices ``start..stop-1``."""
        idx = np.arange(start, stop, dtype=np.int64)
        i = idx % self.xlen
        j = (idx // self.xlen) % self.ylen
        k = idx // (self.xlen * self.ylen)
        ijk = np.stack([i, j, k], axis=1).astype(np.float64)
        return np.asarray(self.origin) + self.spacing * (ijk + 0.5)


@dataclass(frozen=True)
class FusionParams:
    occlusion_prior: float = 0.5
    voxel_prior: float = 0.5
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("occlusion_prior", "voxel_prior", "threshold"):
            val = float(getattr(self, name))
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
            object.__setattr__(self, name, val)


@dataclass
class OccupancyGrid:
    voi: VolumeOfInterest
    prob: np.ndarray

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=np.float64).reshape(self.voi.shape)


@dataclass
class BinaryVolume:
    voi: VolumeOfInterest
    occupied: np.ndarray

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, dtype=bool).reshape(self.voi.shape)


@dataclass
class VoxelCloud:
    """Voxel centres with optional colours.

    ``colors`` holds float RGB; ``colored`` flags which rows carry a colour.
    """

    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray | None = None
    colored: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        if self.colors is None:
            self.colors = np.zeros((n, 3))
        if self.colored is None:
            self.colored = np.zeros(n, dtype=bool)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.colored = np.asarray(self.colored, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.centers)


def voxel_centers(voi: VolumeOfInterest) -> np.ndarray:
    """All voxel centres, ``(size, 3)``, x fastest."""
    return voi.centers_range(0, voi.size)


def per_view_likelihood(slm_value, occupied, params: FusionParams = FusionParams()):
    """Likelihood of one view's silhouette sample given the voxel state.

    The occluder latent is summed out. Only the empty voxel with no occluder
    explains the sample as background (``1 - slm``); the other three cases
    all explain it as foreground (``slm``).
    """
    s = np.asarray(slm_value, dtype=np.float64)
    po = params.occlusion_prior
    occupied = np.asarray(occupied, dtype=bool)
    empty_branch = (1.0 - po) * (1.0 - s) + po * s
    occupied_branch = (1.0 - po) * s + po * s
    out = np.where(occupied, occupied_branch, empty_branch)
    return out.item() if out.ndim == 0 else out


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def posterior_from_samples(samples, params: FusionParams = FusionParams()) -> np.ndarray:
    """Occupancy posterior from an ``(n_voxels, n_views)`` array of SLM samples."""
    s = np.asarray(samples, dtype=np.float64)
    log_occ = np.full(s.shape[:-1], np.log(params.voxel_prior))
    log_emp = np.full(s.shape[:-1], np.log(1.0 - params.voxel_prior))
    # accumulate view by view so the summation order is fixed
    for k in range(s.shape[-1]):
        log_occ += _log(per_view_likelihood(s[..., k], True, params))
        log_emp += _log(per_view_likelihood(s[..., k], False, params))
    return _log_posterior(log_occ, log_emp)


def _log_posterior(log_occ, log_emp):
    # p = 1 / (1 + exp(log_emp - log_occ)); a -inf branch short-circuits
    out = np.empty(np.broadcast(log_occ, log_emp).shape)
    occ_dead = np.isneginf(log_occ)
    emp_dead = np.isneginf(log_emp)
    both = occ_dead & emp_dead
    live = ~(occ_dead | emp_dead)
    out[occ_dead] = 0.0
    out[emp_dead & ~occ_dead] = 1.0
    out[both] = 0.5
    d = (log_emp - log_occ)[live]
    # numerically stable logistic of -d
    pos = d >= 0
    e = np.exp(-np.abs(d))
    out[live] = np.where(pos, e / (1.0 + e), 1.0 / (1.0 + e))
    return out


def sample_slms(points, rig: CameraRig, slms) -> np.ndarray:
    """SLM samples ``(n_points, n_views)``; invisible views read 0.5."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty((len(pts), len(rig)))
    for c, (cam, slm) in enumerate(zip(rig, slms)):
        values = slm.values if hasattr(slm, "values") else np.asarray(slm)
        uv, depth = project_points(cam, pts)
        with np.errstate(invalid="ignore"):
            visible = (depth > 0) & cam.in_image(uv)
        out[:, c] = np.where(visible, sample_bilinear(values, uv), UNINFORMATIVE_SLM)
    return out


def fuse_occupancy(
    voi: VolumeOfInterest,
    rig: CameraRig,
    slms,
    params: FusionParams = FusionParams(),
    cfg: ParallelConfig = SERIAL,
) -> OccupancyGrid:
    """Occupancy posterior for every voxel of ``voi``."""
    slms = list(slms)
    if len(slms) != len(rig):
        raise CountMismatch(f"{len(slms)} silhouette maps for {len(rig)} cameras")
    for cam, slm in zip(rig, slms):
        values = slm.values if hasattr(slm, "values") else np.asarray(slm)
        if values.shape != (cam.height, cam.width):
            raise CountMismatch(
                f"camera {cam.id} is {cam.width}x{cam.height} but its map is {values.shape[::-1]}"
            )

    def kernel(start, stop):
        return posterior_from_samples(sample_slms(voi.centers_range(start, stop), rig, slms), params)

    prob = par_map_array(voi.size, kernel, cfg)
    return OccupancyGrid(voi, prob)


def _box_sum3(a: np.ndarray) -> np.ndarray:
    """3x3x3 window sums with zero padding, accumulated in a fixed order."""
    p = np.pad(a, 1)
    out = np.zeros_like(a)
    nz, ny, nx = a.shape
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                out += p[dz:dz + nz, dy:dy + ny, dx:dx + nx]
    return out


def smooth_and_threshold(
    grid: OccupancyGrid,
    params: FusionParams = FusionParams(),
    cfg: ParallelConfig = SERIAL,
) -> BinaryVolume:
    """3x3x3 box average (zero outside the volume) then ``> threshold``.

    Smoothing and thresholding happen in one pass per z-slab; slabs are
    independent and may run in parallel.
    """
    prob = grid.prob
    nz = prob.shape[0]
    padded = np.pad(prob, ((1, 1), (0, 0), (0, 0)))

    def kernel(start, stop):
        block = padded[start:stop + 2]
        sums = _box_sum3(block)[1:-1]
        return (sums / 27.0) > params.threshold

    slab = max(1, cfg.chunk // max(1, prob.shape[1] * prob.shape[2]))
    occupied = par_map_array(nz, kernel, cfg, chunk=slab)
    return BinaryVolume(grid.voi, occupied)


def surface_mask(occupied: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbour (outside counts as empty)."""
    occ = np.asarray(occupied, dtype=bool)
    p = np.pad(occ, 1, constant_values=False)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return occ & ~interior


def extract_surface(vol: BinaryVolume, voi: VolumeOfInterest | None = None) -> VoxelCloud:
    voi = vol.voi if voi is None else voi
    flat = np.flatnonzero(surface_mask(vol.occupied).ravel())
    return VoxelCloud(_centers_at(voi, flat))


def _centers_at(voi, flat_idx):
    i = flat_idx % voi.xlen
    j = (flat_idx // voi.xlen) % voi.ylen
    k = flat_idx // (voi.xlen * voi.ylen)
    ijk = np.stack([i, j, k], axis=1).astype(np.float64)
    return np.asarray(voi.origin) + voi.spacing * (ijk + 0.5)


def color_voxels(
    cloud: VoxelCloud,
    rig: CameraRig,
    images,
    slms,
    slm_gate: float = 0.5,
    cfg: ParallelConfig = SERIAL,
) -> VoxelCloud:
    """Average the RGB seen by every view that sees the voxel as foreground.

    A view qualifies when the projection is in front of the camera, lands
    on the image and the sampled SLM exceeds ``slm_gate``. Occlusion between
    surfaces is not tested.
    """
    images = list(images)
    slms = list(slms)
    if len(images) != len(rig) or len(slms) != len(rig):
        raise CountMismatch(
            f"{len(images)} images and {len(slms)} maps for {len(rig)} cameras"
        )

    def kernel(start, stop):
        pts = cloud.centers[start:stop]
        total = np.zeros((len(pts), 3))
        count = np.zeros(len(pts))
        for cam, img, slm in zip(rig, images, slms):
            values = slm.values if hasattr(slm, "values") else np.asarray(slm)
            uv, depth = project_points(cam, pts)
            with np.errstate(invalid="ignore"):
                ok = (depth > 0) & cam.in_image(uv)
            ok &= sample_bilinear(values, uv) > slm_gate
            rgb = sample_bilinear(img, uv)
            total += np.where(ok[:, None], rgb, 0.0)
            count += ok
        colored = count > 0
        colors = np.where(colored[:, None], total / np.maximum(count, 1)[:, None], 0.0)
        return np.column_stack([colors, colored])

    packed = par_map_array(len(cloud), kernel, cfg)
    packed = packed.reshape(-1, 4)
    return VoxelCloud(cloud.centers.copy(), packed[:, :3], packed[:, 3] > 0)


def write_ply(path, cloud: VoxelCloud) -> None:
    """ASCII PLY with xyz floats and uchar RGB (0 for uncoloured vertices)."""
    rgb = np.clip(np.floor(cloud.colors + 0.5), 0, 255).astype(np.int64)
    rgb[~cloud.colored] = 0
    lines = ["ply", "format ascii 1.0"]
    if (~cloud.colored).any():
        lines.append("comment uncolored")
    lines += [
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [
        f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b}"
        for (x, y, z), (r, g, b) in zip(cloud.centers.tolist(), rgb.tolist())
    ]
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="ascii")


def read_ply(path) -> VoxelCloud:
    """Read a PLY written by :func:`write_ply`; rows with RGB 0,0,0 are uncoloured
    when the header carries the ``comment uncolored`` marker."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError("not a PLY file", 1)
    n = None
    marked = False
    try:
        end = lines.index("end_header")
    except ValueError:
        raise ParseError("missing end_header") from None
    for no, ln in enumerate(lines[:end], start=1):
        if ln.startswith("element vertex"):
            try:
                n = int(ln.split()[2])
            except (IndexError, ValueError):
                raise ParseError("bad vertex count", no) from None
        elif ln == "comment uncolored":
            marked = True
    if n is None:
        raise ParseError("missing vertex element")
    rows = lines[end + 1:end + 1 + n]
    if len(rows) != n:
        raise ParseError("truncated vertex list")
    if n == 0:
        return VoxelCloud()
    data = np.array([r.split() for r in rows], dtype=np.float64)
    colors = data[:, 3:6]
    colored = np.ones(n, dtype=bool)
    if marked:
        colored = colors.any(axis=1)
    return VoxelCloud(data[:, :3], colors, colored)


_VOXF_MAGIC = "VOXF32"


def write_occupancy(path, grid: OccupancyGrid) -> None:
    voi = grid.voi
    header = (
        f"{_VOXF_MAGIC} {voi.xlen} {voi.ylen} {voi.zlen} {voi.spacing!r} "
        f"{voi.origin[0]!r} {voi.origin[1]!r} {voi.origin[2]!r}\n"
    )
    payload = np.ascontiguousarray(grid.prob, dtype="<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_occupancy(path) -> OccupancyGrid:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing occupancy header", 1)
    toks = data[:nl].decode("ascii", errors="replace").split()
    if len(toks) != 8 or toks[0] != _VOXF_MAGIC:
        raise ParseError("bad occupancy header", 1)
    try:
        xlen, ylen, zlen = (int(t) for t in toks[1:4])
        spacing, ox, oy, oz = (float(t) for t in toks[4:])
    except ValueError:
        raise ParseError("bad occupancy header field", 1) from None
    voi = VolumeOfInterest((ox, oy, oz), spacing, xlen, ylen, zlen)
    body = data[nl + 1:]
    if len(body) != 4 * voi.size:
        raise ParseError("occupancy payload size does not match header")
    prob = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return OccupancyGrid(voi, prob)

