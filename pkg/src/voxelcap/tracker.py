"""Annealed particle filter over body poses.

A frame is processed by a run of weighting layers ``m = M, ..., 0``. At
each layer the particles are weighted with the matching score raised to
``beta_m`` and normalised; above layer 0 they are then resampled and
diffused with a noise level that shrinks with every layer. The layer-0
weighted mean is the pose estimate, and a resampled, lightly diffused
copy of the layer-0 set seeds the next frame.

The matching score of a pose compares the projected body cylinders with
per-camera silhouette and edge images rendered from the reconstructed
voxel cloud::

    omega = exp(-sum_cameras(edge_miss + silhouette_miss))

where ``edge_miss`` (``silhouette_miss``) is the mean of ``1 - value``
over contour (interior) sample points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bodymodel import (
    DEFAULT_N_CONTOUR,
    DEFAULT_N_INTERIOR,
    DOF_INDEX,
    N_DOF,
    BodyModel,
    forward_kinematics_batch,
    project_cylinders_batch,
)
from .exceptions import TrackingLost, ZeroTotalWeight
from .geometry import CameraRig, project_points, sample_bilinear
from .parallel import SERIAL, ParallelConfig, pairwise_sum, par_map_array
from .silhouette import EdgeMap, compute_edge_map
from .voxelgrid import VoxelCloud

# stream tags for the keyed generators
_RESAMPLE = 0
_DIFFUSE = 1

#: Rotations about a cylinder's own axis; a round cylinder barely shows them.
AXIAL_TWIST_DOFS = (
    "head_rz", "l_shoulder_rx", "l_elbow_twist", "r_shoulder_rx", "r_elbow_twist",
    "l_hip_rz", "l_knee_twist", "r_hip_rz", "r_knee_twist",
)


def _default_sigma_base() -> np.ndarray:
    sigma = np.empty(N_DOF)
    sigma[0:3] = 20.0     # root translation, mm
    sigma[3:11] = 0.05    # root orientation, spine, head
    sigma[11:] = 0.1      # limbs
    # weakly observable DOFs would otherwise random-walk and drag the
    # limb direction with them once the limb leaves its rest axis
    sigma[[DOF_INDEX[n] for n in AXIAL_TWIST_DOFS]] = 0.02
    return sigma


#: Per-DOF base diffusion (mm for translation, rad for angles).
DEFAULT_SIGMA_BASE = _default_sigma_base()
#: Fraction of effective particles each layer keeps under the adaptive schedule.
DEFAULT_SURVIVAL_RATE = 0.3
#: Between-frame diffusion as a multiple of the last layer's sigma. Six puts
#: it near the middle of the layer schedule; at 1 the first layer of every
#: frame sees an almost collapsed set and cannot leave a wrong mode.
DEFAULT_TEMPORAL_SCALE = 6.0


@dataclass
class ParticleSet:
    poses: np.ndarray
    weights: np.ndarray | None = None
    layer: int = 0

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 2:
            raise ValueError("poses must be (N, D)")
        n = len(self.poses)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.poses)

    @classmethod
    def replicate(cls, pose, n: int):
        pose = np.asarray(pose, dtype=np.float64).reshape(1, -1)
        return cls(np.repeat(pose, n, axis=0))


@dataclass
class AnnealSchedule:
    """Layer count, sharpening exponents and per-layer diffusion.

    ``sigma(m) = sigma_base * diffusion_decay ** (n_layers - m)``; the next
    frame starts from the final set diffused with ``sigma(0) * temporal_scale``.

    With ``survival_rate=None`` the exponents are fixed, ``beta(m) =
    anneal_base ** m``. Otherwise each layer's exponent is solved for so
    the weighted set keeps ``survival_rate * N`` effective particles, which
    adapts the sharpening to the scale of the weight function.
    """

    n_layers: int = 10
    sigma_base: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_BASE.copy())
    anneal_base: float = 0.7
    diffusion_decay: float = 0.7
    seed: int = 0
    temporal_scale: float = DEFAULT_TEMPORAL_SCALE
    survival_rate: float | None = DEFAULT_SURVIVAL_RATE

    def __post_init__(self):
        if int(self.n_layers) < 1:
            raise ValueError("n_layers must be >= 1")
        self.n_layers = int(self.n_layers)
        self.sigma_base = np.asarray(self.sigma_base, dtype=np.float64).ravel()
        if np.any(self.sigma_base <= 0):
            raise ValueError("every sigma_base entry must be positive")
        if not 0 < self.anneal_base <= 1:
            raise ValueError("anneal_base must lie in (0, 1]")
        if not 0 < self.diffusion_decay <= 1:
            raise ValueError("diffusion_decay must lie in (0, 1]")
        if self.temporal_scale <= 0:
            raise ValueError("temporal_scale must be positive")
        if self.survival_rate is not None and not 0 < self.survival_rate < 1:
            raise ValueError("survival_rate must lie in (0, 1)")

    def beta(self, m: int) -> float:
        return float(self.anneal_base ** m)

    def sigma(self, m: int) -> np.ndarray:
        return self.sigma_base * self.diffusion_decay ** (self.n_layers - m)


@dataclass
class Measurement:
    silhouettes: list
    edges: list


def keyed_rng(seed: int, frame: int, layer: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one (seed, frame, layer, stream) slot.

    Draws within the slot are laid out particle-major, DOF-minor, so every
    (particle, dof) pair has a fixed position in the Philox stream.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame), int(layer), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def reproject_voxels(cloud: VoxelCloud, rig: CameraRig) -> list:
    """Binary silhouette per camera from the voxel centres, closed with a 3x3 box."""
    images = []
    for cam in rig:
        img = np.zeros((cam.height, cam.width), dtype=bool)
        if len(cloud):
            uv, depth = project_points(cam, cloud.centers)
            with np.errstate(invalid="ignore"):
                ok = (depth > 0) & cam.in_image(uv)
            px = np.floor(uv[ok] + 0.5).astype(np.intp)
            img[px[:, 1], px[:, 0]] = True
            img = ndimage.binary_closing(img, structure=np.ones((3, 3), dtype=bool))
        images.append(img.astype(np.uint8))
    return images


def build_measurement(silhouettes) -> Measurement:
    sils = [np.asarray(s, dtype=np.float64) for s in silhouettes]
    edges = [compute_edge_map(s, camera_id=k) for k, s in enumerate(sils)]
    return Measurement(sils, edges)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def _miss_terms(poses, meas: Measurement, body: BodyModel, rig: CameraRig, n_contour, n_interior):
    """``(N,)`` sum over cameras of edge-miss plus silhouette-miss."""
    base, top = forward_kinematics_batch(poses, body)
    total = np.zeros(len(poses))
    for cam, sil, edge in zip(rig, meas.silhouettes, meas.edges):
        edge_vals = edge.values if isinstance(edge, EdgeMap) else np.asarray(edge)
        proj = project_cylinders_batch(base, top, body.base_radii, body.top_radii, cam, n_contour, n_interior)
        valid = proj["valid"][..., None]
        pe = np.where(valid, sample_bilinear(edge_vals, proj["contour_samples"], outside=0.0), 0.0)
        pr = np.where(valid, sample_bilinear(sil, proj["interior_samples"], outside=0.0), 0.0)
        n_parts = pe.shape[1]
        edge_miss = pairwise_sum((1.0 - pe).reshape(len(poses), -1)) / (n_parts * n_contour)
        sil_miss = pairwise_sum((1.0 - pr).reshape(len(poses), -1)) / (n_parts * n_interior)
        total = total + (edge_miss + sil_miss)
    return total


def log_ssd_weights(
    poses,
    meas: Measurement,
    body: BodyModel,
    rig: CameraRig,
    cfg: ParallelConfig = SERIAL,
    n_contour: int = DEFAULT_N_CONTOUR,
    n_interior: int = DEFAULT_N_INTERIOR,
    particle_chunk: int = 16,
) -> np.ndarray:
    """``log omega`` for every row of ``poses``; parallel over particle chunks."""
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))

    def kernel(start, stop):
        return -_miss_terms(poses[start:stop], meas, body, rig, n_contour, n_interior)

    return par_map_array(len(poses), kernel, cfg, chunk=particle_chunk)


def ssd_weight(pose, meas: Measurement, body: BodyModel, rig: CameraRig, beta: float = 1.0, **kw) -> float:
    """``omega(pose) ** beta``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return 1.0
    lw = log_ssd_weights(np.asarray(pose).reshape(1, -1), meas, body, rig, **kw)[0]
    return float(np.exp(beta * lw))


def normalize_log_weights(log_w) -> np.ndarray:
    lw = np.asarray(log_w, dtype=np.float64)
    finite = np.isfinite(lw)
    if not finite.any():
        raise ZeroTotalWeight("every particle has zero weight")
    w = np.where(finite, np.exp(lw - lw[finite].max()), 0.0)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Particle-set primitives
# ---------------------------------------------------------------------------


def systematic_indices(weights, n: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ZeroTotalWeight("cannot resample: total weight is zero")
    cum = np.cumsum(w / total)
    cum[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(w) - 1)


def resample(pset: ParticleSet, rng: np.random.Generator, n: int | None = None) -> ParticleSet:
    """Systematic resampling; output weights are uniform."""
    n = len(pset) if n is None else int(n)
    idx = systematic_indices(pset.weights, n, rng)
    return ParticleSet(pset.poses[idx].copy(), np.full(n, 1.0 / n), pset.layer)


def diffuse(pset: ParticleSet, layer_sigma, rng: np.random.Generator) -> ParticleSet:
    sigma = np.broadcast_to(np.asarray(layer_sigma, dtype=np.float64), pset.poses.shape[1:])
    noise = rng.standard_normal(pset.poses.shape) * sigma
    return ParticleSet(pset.poses + noise, pset.weights.copy(), pset.layer)


def estimate(pset: ParticleSet) -> np.ndarray:
    w = pset.weights
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ZeroTotalWeight("cannot estimate: total weight is zero")
    return (w / total) @ pset.poses


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def survival_beta(log_w, rate: float, beta_max: float = 1e6, iters: int = 60) -> float:
    """Exponent at which ``exp(beta * log_w)`` keeps ``rate * N`` effective particles.

    The effective sample size falls monotonically as ``beta`` grows, so the
    root is bracketed and found by bisection on ``log(beta)``. A constant
    ``log_w`` gives uniform weights at any exponent and returns 1; one too
    flat to reach the target returns ``beta_max``.
    """
    lw = np.asarray(log_w, dtype=np.float64)
    finite = np.isfinite(lw)
    if not finite.any():
        raise ZeroTotalWeight("every particle has zero weight")
    if finite.all() and lw.max() == lw.min():
        return 1.0
    target = rate * len(lw)

    def ess(beta):
        return effective_sample_size(normalize_log_weights(beta * lw))

    if ess(beta_max) >= target:
        return float(beta_max)
    lo, hi = np.log(1e-6), np.log(beta_max)
    if ess(np.exp(lo)) <= target:
        return float(np.exp(lo))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ess(np.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(hi))


# ---------------------------------------------------------------------------
# Annealing run
# ---------------------------------------------------------------------------


@dataclass
class AnnealResult:
    estimate: np.ndarray
    final: ParticleSet
    next_set: ParticleSet
    ess: list
    max_weight: list
    seconds: dict
    betas: list = field(default_factory=list)


def anneal(prev: ParticleSet, log_weight_fn, sched: AnnealSchedule, frame: int = 0) -> AnnealResult:
    """One annealing run for any objective.

    ``log_weight_fn(poses) -> (N,)`` returns ``log omega``; layer ``m`` uses
    ``beta_m * log omega``.
    """
    if sched.sigma_base.shape[0] not in (1, prev.poses.shape[1]):
        raise ValueError("sigma_base length does not match the state dimension")
    M = sched.n_layers
    particles = ParticleSet(prev.poses, None, M)
    ess, max_w, betas = [], [], []
    seconds = {"weighting": 0.0, "resample_diffuse": 0.0}
    for m in range(M, -1, -1):
        t0 = time.perf_counter()
        log_w = np.asarray(log_weight_fn(particles.poses), dtype=np.float64)
        if sched.survival_rate is None:
            beta = sched.beta(m)
        else:
            beta = survival_beta(log_w, sched.survival_rate)
        betas.append(beta)
        w = normalize_log_weights(beta * log_w)
        particles = ParticleSet(particles.poses, w, m)
        ess.append(effective_sample_size(w))
        max_w.append(float(w.max()))
        t1 = time.perf_counter()
        seconds["weighting"] += t1 - t0
        if m > 0:
            particles = resample(particles, keyed_rng(sched.seed, frame, m, _RESAMPLE))
            particles = diffuse(particles, sched.sigma(m - 1), keyed_rng(sched.seed, frame, m, _DIFFUSE))
            particles.layer = m - 1
            seconds["resample_diffuse"] += time.perf_counter() - t1
    final = particles
    est = estimate(final)
    t1 = time.perf_counter()
    nxt = resample(final, keyed_rng(sched.seed, frame, 0, _RESAMPLE))
    nxt = diffuse(nxt, sched.sigma(0) * sched.temporal_scale, keyed_rng(sched.seed, frame, 0, _DIFFUSE))
    nxt.layer = M
    seconds["resample_diffuse"] += time.perf_counter() - t1
    return AnnealResult(est, final, nxt, ess, max_w, seconds, betas)


def apf_frame(
    prev: ParticleSet,
    meas: Measurement,
    sched: AnnealSchedule,
    body: BodyModel,
    rig: CameraRig,
    frame: int = 0,
    cfg: ParallelConfig = SERIAL,
    return_result: bool = False,
):
    """Track one frame. Returns ``(pose, next_particle_set)``.

    Raises:
        TrackingLost: when all weights vanish in some layer.
    """
    if prev.poses.shape[1] != N_DOF:
        raise ValueError(f"particles must have {N_DOF} DOFs")

    def log_w(poses):
        return log_ssd_weights(poses, meas, body, rig, cfg)

    try:
        res = anneal(prev, log_w, sched, frame)
    except ZeroTotalWeight as exc:
        raise TrackingLost(str(exc), frame) from exc
    if return_result:
        return res
    return res.estimate, res.next_set
