"""Synthetic camera rings, exact silhouettes and scripted datasets.

Silhouettes are rendered by casting one ray per pixel centre and testing it
against every shape exactly (conical frusta with end caps, spheres). Noisy
colour frames are derived from them with a keyed generator, so a dataset
is a pure function of its script.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bodymodel import (
    DOF_INDEX,
    N_DOF,
    BodyModel,
    default_body,
    forward_kinematics,
    load_body,
    rest_pose,
    save_body,
    write_poses_csv,
)
from .exceptions import ConfigError
from .geometry import CameraModel, CameraRig, look_at_projection, save_rig
from .imageio import write_pgm, write_ppm
from .parallel import SERIAL, ParallelConfig, par_map_array

_NOISE_FRAME = 0
_NOISE_BACKGROUND = 1


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass
class RigSpec:
    n_cameras: int
    radius: float
    focal: float
    width: int
    height: int
    camera_height: float = 1000.0
    look_at: tuple = (0.0, 0.0, 1000.0)

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("rig.n_cameras must be >= 2")
        if not self.radius > 0:
            raise ConfigError("rig.radius must be positive")


@dataclass
class SceneScript:
    rig: RigSpec
    n_frames: int
    seed: int
    body: str = "default"
    root_position: tuple = (0.0, 0.0, 900.0)
    motion: dict = field(default_factory=lambda: {"type": "static"})
    shape: dict | None = None
    fps: float = 10.0
    background_color: tuple = (40.0, 60.0, 80.0)
    foreground_color: tuple = (200.0, 170.0, 140.0)
    noise_sigma: float = 5.0
    n_background: int = 5

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneScript":
        def need(d, key, where):
            if key not in d:
                raise ConfigError(f"missing field '{where}{key}'")
            return d[key]

        rig = need(data, "rig", "")
        if not isinstance(rig, dict):
            raise ConfigError("field 'rig' must be an object")
        size = need(rig, "image_size", "rig.")
        try:
            spec = RigSpec(
                n_cameras=int(need(rig, "n_cameras", "rig.")),
                radius=float(need(rig, "radius", "rig.")),
                focal=float(need(rig, "focal", "rig.")),
                width=int(size[0]),
                height=int(size[1]),
                camera_height=float(rig.get("height", 1000.0)),
                look_at=tuple(float(x) for x in rig.get("look_at", (0.0, 0.0, 1000.0))),
            )
            kwargs = dict(
                rig=spec,
                n_frames=int(need(data, "n_frames", "")),
                seed=int(need(data, "seed", "")),
            )
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"bad script value: {exc}") from None
        for key in ("body", "motion", "shape", "fps", "noise_sigma", "n_background"):
            if key in data:
                kwargs[key] = data[key]
        for key in ("root_position", "background_color", "foreground_color"):
            if key in data:
                kwargs[key] = tuple(float(x) for x in data[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        r = self.rig
        return {
            "rig": {
                "n_cameras": r.n_cameras,
                "radius": r.radius,
                "focal": r.focal,
                "image_size": [r.width, r.height],
                "height": r.camera_height,
                "look_at": list(r.look_at),
            },
            "n_frames": self.n_frames,
            "seed": self.seed,
            "body": self.body,
            "root_position": list(self.root_position),
            "motion": self.motion,
            "shape": self.shape,
            "fps": self.fps,
            "background_color": list(self.background_color),
            "foreground_color": list(self.foreground_color),
            "noise_sigma": self.noise_sigma,
            "n_background": self.n_background,
        }


def load_script(path) -> SceneScript:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return SceneScript.from_dict(data)


def build_ring_rig(spec: RigSpec) -> CameraRig:
    """Cameras equally spaced on a horizontal circle around ``look_at``.

    Camera ``k`` sits at azimuth ``360 * k / n`` degrees, measured from +x
    towards +y.
    """
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for k in range(spec.n_cameras):
        az = 2.0 * np.pi * k / spec.n_cameras
        center = np.array([
            target[0] + spec.radius * np.cos(az),
            target[1] + spec.radius * np.sin(az),
            spec.camera_height,
        ])
        P = look_at_projection(center, target, spec.focal, spec.width, spec.height)
        cams.append(CameraModel(P, spec.width, spec.height, k))
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def pixel_rays(camera: CameraModel, rows=None):
    """Origin and (unnormalised) directions through pixel centres ``(R, W, 3)``."""
    rows = np.arange(camera.height) if rows is None else np.asarray(rows)
    u, v = np.meshgrid(np.arange(camera.width, dtype=np.float64), rows.astype(np.float64))
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    M = camera.projection[:, :3]
    dirs = pix @ np.linalg.inv(M).T
    return camera.center, dirs


def ray_hits_sphere(origin, dirs, center, radius) -> np.ndarray:
    w = origin - np.asarray(center, dtype=np.float64)
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = dirs @ w
    c = w @ w - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        t_far = (-b + np.sqrt(np.maximum(disc, 0.0))) / a
    return (disc >= 0) & (t_far > 0)


def ray_hits_frustum(origin, dirs, base, top, r0, r1) -> np.ndarray:
    """Exact ray test against a solid conical frustum (lateral surface and caps)."""
    base = np.asarray(base, dtype=np.float64)
    axis = np.asarray(top, dtype=np.float64) - base
    L = np.linalg.norm(axis)
    a = axis / L
    k = (r1 - r0) / L
    w = origin - base
    wa = w @ a
    ww = w @ w
    dd = np.einsum("...i,...i->...", dirs, dirs)
    da = dirs @ a
    wd = dirs @ w
    rw = r0 + k * wa
    A = dd - da * da - k * k * da * da
    B = wd - wa * da - k * da * rw
    C = ww - wa * wa - rw * rw
    hit = np.zeros(dirs.shape[:-1], dtype=bool)

    disc = B * B - A * C
    good = (disc >= 0) & (np.abs(A) > 1e-15)
    sq = np.sqrt(np.where(good, disc, 0.0))
    safe_A = np.where(good, A, 1.0)
    for t in ((-B - sq) / safe_A, (-B + sq) / safe_A):
        s = wa + t * da
        hit |= good & (t > 0) & (s >= 0) & (s <= L) & (r0 + k * s >= 0)

    for s_cap, r_cap in ((0.0, r0), (L, r1)):
        ok = np.abs(da) > 1e-15
        t = (s_cap - wa) / np.where(ok, da, 1.0)
        p = w + t[..., None] * dirs - s_cap * a
        hit |= ok & (t > 0) & (np.einsum("...i,...i->...", p, p) <= r_cap * r_cap)
    return hit


def render_silhouette(camera: CameraModel, shapes, cfg: ParallelConfig = SERIAL) -> np.ndarray:
    """Exact binary silhouette ``(H, W)`` uint8 of the union of ``shapes``."""
    shapes = list(shapes)

    def kernel(r0, r1):
        origin, dirs = pixel_rays(camera, np.arange(r0, r1))
        mask = np.zeros(dirs.shape[:-1], dtype=bool)
        for sh in shapes:
            if isinstance(sh, Sphere):
                mask |= ray_hits_sphere(origin, dirs, sh.center, sh.radius)
            else:
                mask |= ray_hits_frustum(origin, dirs, sh.base_center, sh.top_center, sh.base_radius, sh.top_radius)
        return mask.astype(np.uint8)

    rows_per_chunk = max(1, cfg.chunk // camera.width)
    return par_map_array(camera.height, kernel, cfg, chunk=rows_per_chunk)


def noisy_image(mask, fg_color, bg_color, sigma, rng: np.random.Generator) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    base = np.where(mask[..., None], np.asarray(fg_color, float), np.asarray(bg_color, float))
    noise = rng.standard_normal(base.shape) * sigma if sigma > 0 else 0.0
    return np.clip(np.floor(base + noise + 0.5), 0, 255).astype(np.uint8)


def _noise_rng(seed, kind, index, cam):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), kind, int(index), int(cam)])))


def render_frame(
    rig: CameraRig,
    shapes,
    fg_color=(200.0, 170.0, 140.0),
    bg_color=(40.0, 60.0, 80.0),
    noise_sigma: float = 5.0,
    seed: int = 0,
    frame: int = 0,
    cfg: ParallelConfig = SERIAL,
):
    """Per camera ``(colour image, true silhouette)``."""
    out = []
    for cam in rig:
        sil = render_silhouette(cam, shapes, cfg)
        img = noisy_image(sil, fg_color, bg_color, noise_sigma, _noise_rng(seed, _NOISE_FRAME, frame, cam.id))
        out.append((img, sil))
    return out


def render_background(rig: CameraRig, bg_color, noise_sigma, seed, index):
    return [
        noisy_image(
            np.zeros((cam.height, cam.width), dtype=bool),
            bg_color, bg_color, noise_sigma,
            _noise_rng(seed, _NOISE_BACKGROUND, index, cam.id),
        )
        for cam in rig
    ]


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------


def script_body(script: SceneScript, base_dir=None) -> BodyModel:
    if script.body in (None, "default"):
        return default_body()
    path = Path(script.body)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return load_body(path)


def pose_track(script: SceneScript) -> np.ndarray:
    """``(n_frames, 31)`` ground-truth poses."""
    motion = script.motion or {"type": "static"}
    kind = motion.get("type", "static")
    base = rest_pose(script.root_position)
    if "base_pose" in motion:
        base = np.asarray(motion["base_pose"], dtype=np.float64).reshape(N_DOF)
    poses = np.repeat(base[None, :], script.n_frames, axis=0)
    if kind == "static":
        return poses
    if kind == "arm-wave":
        dof = motion.get("dof", "l_shoulder_ry")
        idx = DOF_INDEX[dof] if isinstance(dof, str) else int(dof)
        amp = float(motion.get("amplitude", 0.6))
        freq = float(motion.get("frequency", 0.5))
        t = np.arange(script.n_frames) / float(script.fps)
        poses[:, idx] = base[idx] + amp * np.sin(2.0 * np.pi * freq * t)
        return poses
    if kind == "poses":
        arr = np.asarray(motion["poses"], dtype=np.float64)
        if arr.shape != (script.n_frames, N_DOF):
            raise ConfigError(f"motion.poses must be {script.n_frames}x{N_DOF}")
        return arr
    raise ConfigError(f"unknown motion type {kind!r}")


def scene_shapes(script: SceneScript, body: BodyModel, pose) -> list:
    if script.shape:
        if script.shape.get("type") != "sphere":
            raise ConfigError(f"unknown shape type {script.shape.get('type')!r}")
        return [Sphere(tuple(script.shape["center"]), float(script.shape["radius"]))]
    return forward_kinematics(pose, body)


def generate_sequence(script: SceneScript, out_dir, cfg: ParallelConfig = SERIAL, base_dir=None) -> Path:
    """Write a dataset directory::

        rig.txt  body.txt  script.json
        frames/cam<k>_f<t>.ppm
        background/cam<k>_b<j>.ppm
        truth/sil_cam<k>_f<t>.pgm  truth/poses.csv
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    (out / "background").mkdir(exist_ok=True)
    rig = build_ring_rig(script.rig)
    body = script_body(script, base_dir)
    save_rig(rig, out / "rig.txt")
    save_body(body, out / "body.txt")
    (out / "script.json").write_text(json.dumps(script.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    for j in range(script.n_background):
        for cam, img in zip(rig, render_background(rig, script.background_color, script.noise_sigma, script.seed, j)):
            write_ppm(out / "background" / f"cam{cam.id}_b{j}.ppm", img)

    poses = pose_track(script)
    for t in range(script.n_frames):
        shapes = scene_shapes(script, body, poses[t])
        views = render_frame(
            rig, shapes, script.foreground_color, script.background_color,
            script.noise_sigma, script.seed, t, cfg,
        )
        for cam, (img, sil) in zip(rig, views):
            write_ppm(out / "frames" / f"cam{cam.id}_f{t}.ppm", img)
            write_pgm(out / "truth" / f"sil_cam{cam.id}_f{t}.pgm", sil * 255)
    if script.shape:
        write_poses_csv(out / "truth" / "poses.csv", [], [])
    else:
        write_poses_csv(out / "truth" / "poses.csv", range(script.n_frames), poses)
    return out

