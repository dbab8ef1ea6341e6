"""Dataset access, pipeline configuration and the staged drivers.

A dataset directory holds ``rig.txt``, an optional ``body.txt``,
``frames/cam<k>_f<t>.ppm`` and ``background/cam<k>_b<j>.ppm`` (the layout
written by :func:`voxelcap.synth.generate_sequence`). Reconstruction writes
one PLY cloud and one occupancy dump per frame; tracking reads those clouds
back (or takes them in memory) and writes ``poses.csv`` and
``diagnostics.json``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .bodymodel import (
    DOF_INDEX,
    N_DOF,
    BodyModel,
    default_body,
    load_body,
    read_poses_csv,
    write_poses_csv,
)
from .exceptions import ConfigError, FrameError, TrackingLost, VoxelcapError
from .geometry import CameraRig, load_rig
from .imageio import read_pnm
from .parallel import ParallelConfig
from .silhouette import compute_slm, train_background
from .tracker import (
    DEFAULT_SIGMA_BASE,
    DEFAULT_SURVIVAL_RATE,
    AnnealSchedule,
    ParticleSet,
    apf_frame,
    build_measurement,
    reproject_voxels,
)
from .voxelgrid import (
    FusionParams,
    OccupancyGrid,
    VolumeOfInterest,
    VoxelCloud,
    color_voxels,
    extract_surface,
    fuse_occupancy,
    read_ply,
    smooth_and_threshold,
    write_occupancy,
    write_ply,
)

logger = logging.getLogger(__name__)

RECONSTRUCT_STAGES = ("slm", "fusion", "smooth", "surface", "color")
TRACK_STAGES = ("reproject", "weighting", "resample_diffuse")

_FRAME_RE = re.compile(r"^cam(\d+)_f(\d+)\.ppm$")
_BACKGROUND_RE = re.compile(r"^cam(\d+)_b(\d+)\.ppm$")


class StageTimer:
    """Accumulates monotonic wall-clock seconds per named stage."""

    def __init__(self):
        self.seconds: dict = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0

    def add(self, name: str, seconds: float) -> None:
        self.seconds[name] = self.seconds.get(name, 0.0) + float(seconds)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def _complete_indices(directory: Path, pattern, n_cameras: int) -> int:
    """Length of the run 0, 1, ... of indices present for every camera."""
    if not directory.is_dir():
        return 0
    seen: dict = {}
    for entry in directory.iterdir():
        m = pattern.match(entry.name)
        if m:
            seen.setdefault(int(m.group(2)), set()).add(int(m.group(1)))
    n = 0
    while len(seen.get(n, ())) >= n_cameras:
        n += 1
    return n


@dataclass
class Dataset:
    root: Path
    rig: CameraRig
    body: BodyModel
    n_frames: int
    n_background: int

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"dataset directory {root} does not exist")
        rig_path = root / "rig.txt"
        if not rig_path.is_file():
            raise ConfigError(f"missing calibration file {rig_path}")
        rig = load_rig(rig_path)
        body_path = root / "body.txt"
        body = load_body(body_path) if body_path.is_file() else default_body()
        return cls(
            root,
            rig,
            body,
            _complete_indices(root / "frames", _FRAME_RE, len(rig)),
            _complete_indices(root / "background", _BACKGROUND_RE, len(rig)),
        )

    def frame(self, t: int) -> list:
        return [read_pnm(self.root / "frames" / f"cam{cam.id}_f{t}.ppm") for cam in self.rig]

    def backgrounds(self) -> list:
        """Background frames grouped per camera."""
        return [
            [read_pnm(self.root / "background" / f"cam{cam.id}_b{j}.ppm") for j in range(self.n_background)]
            for cam in self.rig
        ]

    def truth_poses(self) -> np.ndarray:
        path = self.root / "truth" / "poses.csv"
        if not path.is_file():
            raise ConfigError(f"no ground-truth poses at {path}")
        return read_poses_csv(path)[1]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _need(data: dict, key: str, where: str = ""):
    if key not in data:
        raise ConfigError(f"missing field '{where}{key}'")
    return data[key]


def _resolve(path, base_dir) -> Path:
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return p


def parse_voi(data) -> VolumeOfInterest:
    """``{"origin" | "center": [x, y, z], "spacing": s, "shape": [nx, ny, nz]}``."""
    if not isinstance(data, dict):
        raise ConfigError("field 'voi' must be an object")
    try:
        spacing = float(_need(data, "spacing", "voi."))
        shape = [int(n) for n in _need(data, "shape", "voi.")]
        if len(shape) != 3:
            raise ConfigError("field 'voi.shape' needs three entries")
        if "origin" in data:
            return VolumeOfInterest(tuple(data["origin"]), spacing, *shape)
        if "center" in data:
            return VolumeOfInterest.centered(data["center"], spacing, shape)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'voi': {exc}") from None
    raise ConfigError("missing field 'voi.origin' (or 'voi.center')")


def parse_schedule(data, seed: int = 0) -> AnnealSchedule:
    """Anneal settings; ``sigma_base`` may be a full list or a name->value map."""
    data = dict(data or {})
    sigma = DEFAULT_SIGMA_BASE.copy()
    raw = data.pop("sigma_base", None)
    if isinstance(raw, dict):
        for name, val in raw.items():
            if name not in DOF_INDEX:
                raise ConfigError(f"field 'anneal.sigma_base': unknown DOF {name!r}")
            sigma[DOF_INDEX[name]] = float(val)
    elif raw is not None:
        sigma = np.asarray(raw, dtype=np.float64).ravel()
        if sigma.shape != (N_DOF,):
            raise ConfigError(f"field 'anneal.sigma_base' needs {N_DOF} entries")
    sigma = sigma * float(data.pop("sigma_scale", 1.0))
    known = {"n_layers", "anneal_base", "diffusion_decay", "temporal_scale", "survival_rate"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown field 'anneal.{sorted(unknown)[0]}'")
    data.setdefault("survival_rate", DEFAULT_SURVIVAL_RATE)
    try:
        return AnnealSchedule(sigma_base=sigma, seed=int(seed), **data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'anneal': {exc}") from None


@dataclass
class PipelineConfig:
    """Everything a reconstruct / track run needs.

    ``initial_pose`` is ``"truth"`` (frame 0 of the dataset's ground truth),
    a 31-vector, or a path to a poses CSV (its first row is used).
    """

    dataset: Path
    voi: VolumeOfInterest
    output: Path
    fusion: FusionParams = field(default_factory=FusionParams)
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    n_particles: int = 200
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    initial_pose: object = "truth"
    color: bool = True
    max_frames: int | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        dataset = _resolve(_need(data, "dataset"), base_dir)
        voi = parse_voi(_need(data, "voi"))
        output = _resolve(data.get("output", "out"), base_dir)
        try:
            fusion = FusionParams(**data.get("fusion", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'fusion': {exc}") from None
        schedule = parse_schedule(data.get("anneal"), seed=data.get("seed", 0))
        try:
            parallel = ParallelConfig(int(data.get("workers", 0)), int(data.get("chunk", 4096)))
            n_particles = int(data.get("particles", 200))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad worker or particle setting: {exc}") from None
        if n_particles < 1:
            raise ConfigError("field 'particles' must be >= 1")
        init = data.get("initial_pose", "truth")
        if isinstance(init, str) and init != "truth":
            init = _resolve(init, base_dir)
        max_frames = data.get("frames")
        return cls(
            dataset=dataset,
            voi=voi,
            output=output,
            fusion=fusion,
            schedule=schedule,
            n_particles=n_particles,
            parallel=parallel,
            initial_pose=init,
            color=bool(data.get("color", True)),
            max_frames=None if max_frames is None else int(max_frames),
        )

    def with_overrides(self, seed=None, output=None, workers=None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, seed=int(seed)))
        if output is not None:
            cfg = replace(cfg, output=Path(output))
        if workers is not None:
            cfg = replace(cfg, parallel=replace(cfg.parallel, workers=int(workers)))
        return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return PipelineConfig.from_dict(data, base_dir=path.parent)


def _frame_count(cfg: PipelineConfig, ds: Dataset) -> int:
    n = ds.n_frames
    if cfg.max_frames is not None:
        n = min(n, cfg.max_frames)
    return n


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


@dataclass
class FrameReconstruction:
    cloud: VoxelCloud
    grid: OccupancyGrid
    seconds: dict


def train_models(ds: Dataset) -> list:
    if ds.n_background < 1:
        raise ConfigError(f"dataset {ds.root} has no background frames")
    return [train_background(frames) for frames in ds.backgrounds()]


def reconstruct_frame(images, models, rig, voi, fusion, par, color=True) -> FrameReconstruction:
    timer = StageTimer()
    with timer("slm"):
        slms = [compute_slm(m, img, cam.id) for m, img, cam in zip(models, images, rig)]
    with timer("fusion"):
        grid = fuse_occupancy(voi, rig, slms, fusion, par)
    with timer("smooth"):
        vol = smooth_and_threshold(grid, fusion, par)
    with timer("surface"):
        cloud = extract_surface(vol)
    with timer("color"):
        if color:
            cloud = color_voxels(cloud, rig, images, slms, cfg=par)
    return FrameReconstruction(cloud, grid, timer.seconds)


def cloud_path(out: Path, t: int) -> Path:
    return Path(out) / "clouds" / f"frame_{t:04d}.ply"


def occupancy_path(out: Path, t: int) -> Path:
    return Path(out) / "occupancy" / f"frame_{t:04d}.vox"


def run_reconstruct(cfg: PipelineConfig, write: bool = True, dataset: Dataset | None = None) -> list:
    """Reconstruct every frame; optionally write PLY, occupancy and timing files."""
    ds = Dataset.open(cfg.dataset) if dataset is None else dataset
    n = _frame_count(cfg, ds)
    if n == 0:
        logger.warning("dataset %s has no complete frames", ds.root)
    models = train_models(ds)
    results = []
    for t in range(n):
        try:
            res = reconstruct_frame(ds.frame(t), models, ds.rig, cfg.voi, cfg.fusion, cfg.parallel, cfg.color)
        except VoxelcapError as exc:
            raise FrameError(t, exc) from exc
        results.append(res)
        logger.info("frame %d: %d surface voxels", t, len(res.cloud))
    if write:
        out = Path(cfg.output)
        (out / "clouds").mkdir(parents=True, exist_ok=True)
        (out / "occupancy").mkdir(parents=True, exist_ok=True)
        for t, res in enumerate(results):
            write_ply(cloud_path(out, t), res.cloud)
            write_occupancy(occupancy_path(out, t), res.grid)
        timing = {
            "workers": cfg.parallel.effective_workers,
            "frames": [{"frame": t, "seconds": r.seconds} for t, r in enumerate(results)],
        }
        _write_json(out / "timing_reconstruct.json", timing)
    return results


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackResult:
    poses: np.ndarray
    diagnostics: list


def initial_pose(cfg: PipelineConfig, ds: Dataset) -> np.ndarray:
    src = cfg.initial_pose
    if isinstance(src, str) and src == "truth":
        truth = ds.truth_poses()
        if len(truth) == 0:
            raise ConfigError("ground-truth pose file is empty; give 'initial_pose' explicitly")
        return truth[0]
    if isinstance(src, Path):
        if not src.is_file():
            raise ConfigError(f"initial pose file {src} does not exist")
        poses = read_poses_csv(src)[1]
        if len(poses) == 0:
            raise ConfigError(f"initial pose file {src} has no rows")
        return poses[0]
    pose = np.asarray(src, dtype=np.float64).ravel()
    if pose.shape != (N_DOF,):
        raise ConfigError(f"field 'initial_pose' needs {N_DOF} values")
    return pose


def load_clouds(out: Path, n: int) -> list:
    clouds = []
    for t in range(n):
        path = cloud_path(out, t)
        if not path.is_file():
            raise ConfigError(f"missing reconstruction output {path}; run 'reconstruct' first or use --pipe")
        clouds.append(read_ply(path))
    return clouds


def track_sequence(clouds, pose0, schedule, n_particles, body, rig, par) -> TrackResult:
    """Run the annealed filter over a list of clouds.

    A frame whose weights all vanish is retried once from the previous
    estimate with doubled diffusion and flagged; a second loss is terminal.
    """
    pset = ParticleSet.replicate(pose0, n_particles)
    last = np.asarray(pose0, dtype=np.float64)
    poses, diags = [], []
    for t, cloud in enumerate(clouds):
        timer = StageTimer()
        with timer("reproject"):
            meas = build_measurement(reproject_voxels(cloud, rig))
        lost = False
        try:
            res = apf_frame(pset, meas, schedule, body, rig, frame=t, cfg=par, return_result=True)
        except TrackingLost:
            lost = True
            logger.warning("frame %d: tracking lost, re-seeding from the last estimate", t)
            retry = replace(schedule, sigma_base=2.0 * schedule.sigma_base)
            res = apf_frame(
                ParticleSet.replicate(last, n_particles), meas, retry, body, rig,
                frame=t, cfg=par, return_result=True,
            )
        for name, sec in res.seconds.items():
            timer.add(name, sec)
        last = res.estimate
        pset = res.next_set
        poses.append(res.estimate)
        diags.append({
            "frame": t,
            "lost": lost,
            "ess": [float(x) for x in res.ess],
            "max_weight": [float(x) for x in res.max_weight],
            "beta": [float(x) for x in res.betas],
            "seconds": timer.seconds,
        })
    return TrackResult(np.array(poses).reshape(-1, N_DOF), diags)


def run_track(cfg: PipelineConfig, clouds=None, write: bool = True, dataset: Dataset | None = None) -> TrackResult:
    """Track the sequence. ``clouds=None`` reads the PLY files of a prior reconstruction."""
    ds = Dataset.open(cfg.dataset) if dataset is None else dataset
    n = _frame_count(cfg, ds)
    if clouds is None:
        clouds = load_clouds(cfg.output, n)
    pose0 = initial_pose(cfg, ds)
    result = track_sequence(clouds, pose0, cfg.schedule, cfg.n_particles, ds.body, ds.rig, cfg.parallel)
    if write:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        write_poses_csv(out / "poses.csv", range(len(result.poses)), result.poses)
        _write_json(out / "diagnostics.json", {
            "n_particles": cfg.n_particles,
            "n_layers": cfg.schedule.n_layers,
            "seed": cfg.schedule.seed,
            "lost_frames": [d["frame"] for d in result.diagnostics if d["lost"]],
            "frames": result.diagnostics,
        })
    return result


def run_pipe(cfg: PipelineConfig, write: bool = True) -> TrackResult:
    """Reconstruct and track in memory; only the tracking outputs are written."""
    ds = Dataset.open(cfg.dataset)
    recon = run_reconstruct(cfg, write=False, dataset=ds)
    return run_track(cfg, clouds=[r.cloud for r in recon], write=write, dataset=ds)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

BENCH_STAGES = RECONSTRUCT_STAGES + TRACK_STAGES


def bench_schema() -> dict:
    text = resources.files("voxelcap").joinpath("data/bench_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def run_bench(cfg: PipelineConfig, workers, repeats: int = 3) -> dict:
    """Time the in-memory pipeline ``repeats`` times per worker count.

    Stage times are per-frame means in milliseconds. Speedups are
    ``mean_1w / mean_kw`` of the recorded samples; a 1-worker row is always
    included as the reference.
    """
    counts = [1] + [int(w) for w in workers if int(w) != 1]
    if any(w < 1 for w in counts):
        raise ConfigError("worker counts must be >= 1")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    ds = Dataset.open(cfg.dataset)
    n = _frame_count(cfg, ds)
    samples = {}
    for w in counts:
        run_cfg = replace(cfg, parallel=ParallelConfig(workers=w, chunk=cfg.parallel.chunk, use_env=False))
        runs = []
        for _ in range(repeats):
            totals = dict.fromkeys(BENCH_STAGES, 0.0)
            t0 = time.perf_counter()
            recon = run_reconstruct(run_cfg, write=False, dataset=ds)
            track = run_track(run_cfg, clouds=[r.cloud for r in recon], write=False, dataset=ds)
            wall = time.perf_counter() - t0
            for r in recon:
                for k, v in r.seconds.items():
                    totals[k] += v
            for d in track.diagnostics:
                for k, v in d["seconds"].items():
                    totals[k] += v
            totals["total"] = wall
            runs.append({k: 1000.0 * v / max(n, 1) for k, v in totals.items()})
        samples[w] = runs

    stages = BENCH_STAGES + ("total",)
    base = {s: float(np.mean([r[s] for r in samples[1]])) for s in stages}
    results = []
    for w in counts:
        row = {}
        for s in stages:
            runs_ms = [r[s] for r in samples[w]]
            mean = float(np.mean(runs_ms))
            row[s] = {
                "runs_ms": runs_ms,
                "mean_ms": mean,
                "speedup": base[s] / mean if mean > 0 else None,
            }
        results.append({"workers": w, "stages": row})
    return {
        "format": "voxelcap-bench/1",
        "dataset": str(ds.root),
        "frames": n,
        "repeats": repeats,
        "cpu_count": os.cpu_count(),
        "workers": counts,
        "results": results,
    }


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
