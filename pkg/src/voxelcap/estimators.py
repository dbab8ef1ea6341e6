"""scikit-learn style wrappers around the reconstruction and tracking stages.

The estimators take arrays and camera rigs directly and keep no file state,
so they compose with ordinary Python code. Hyper-parameters are plain
constructor arguments (``get_params`` / ``set_params`` work as usual) and
fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bodymodel import N_DOF, default_body
from .exceptions import CountMismatch
from .parallel import ParallelConfig
from .pipeline import reconstruct_frame, track_sequence
from .silhouette import SIGMA_FLOOR, compute_slm, train_background
from .tracker import DEFAULT_SIGMA_BASE, DEFAULT_SURVIVAL_RATE, DEFAULT_TEMPORAL_SCALE, AnnealSchedule
from .voxelgrid import FusionParams


class BackgroundSubtractor(TransformerMixin, BaseEstimator):
    """Per-pixel Gaussian background model for one camera.

    ``fit`` takes a stack of background frames ``(n, H, W, 3)``;
    ``transform`` maps one frame ``(H, W, 3)`` or a stack of them to
    silhouette likelihood maps in [0, 1].
    """

    def __init__(self, sigma_floor: float = SIGMA_FLOOR):
        self.sigma_floor = sigma_floor

    def fit(self, X, y=None):
        self.model_ = train_background(list(X), sigma_floor=self.sigma_floor)
        self.image_shape_ = self.model_.mean.shape
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X)
        if X.ndim == 3:
            return compute_slm(self.model_, X).values
        return np.stack([compute_slm(self.model_, img).values for img in X])


class VoxelReconstructor(TransformerMixin, BaseEstimator):
    """Multi-view occupancy fusion to a surface voxel cloud.

    Args:
        rig: calibrated cameras.
        voi: volume of interest.
        occlusion_prior, voxel_prior, threshold: fusion parameters.
        color: average the image colour of each surface voxel.
        workers: worker threads (0 means one per CPU).

    ``fit(X)`` takes background frames grouped per camera,
    ``[cam][j] -> (H, W, 3)``. ``transform(X)`` takes frames
    ``[t][cam] -> (H, W, 3)`` and returns one :class:`VoxelCloud` per frame;
    the occupancy grids of the last call are kept in ``grids_``.
    """

    def __init__(self, rig, voi, occlusion_prior=0.5, voxel_prior=0.5, threshold=0.5, color=True, workers=0):
        self.rig = rig
        self.voi = voi
        self.occlusion_prior = occlusion_prior
        self.voxel_prior = voxel_prior
        self.threshold = threshold
        self.color = color
        self.workers = workers

    def fit(self, X, y=None):
        X = list(X)
        if len(X) != len(self.rig):
            raise CountMismatch(f"background frames for {len(X)} cameras, rig has {len(self.rig)}")
        self.models_ = [train_background(list(frames)) for frames in X]
        self.fusion_ = FusionParams(self.occlusion_prior, self.voxel_prior, self.threshold)
        return self

    def transform(self, X):
        check_is_fitted(self, "models_")
        par = ParallelConfig(workers=self.workers)
        clouds, grids = [], []
        for images in X:
            res = reconstruct_frame(list(images), self.models_, self.rig, self.voi, self.fusion_, par, self.color)
            clouds.append(res.cloud)
            grids.append(res.grid)
        self.grids_ = grids
        return clouds


class PoseTracker(BaseEstimator):
    """Annealed particle filter over the 31-DOF cylinder body.

    ``fit(X)`` takes the initial pose (31 values). ``predict(X)`` takes a
    sequence of voxel clouds and returns ``(n_frames, 31)`` poses, always
    starting from the fitted initial pose, so repeated calls agree.
    Per-frame diagnostics of the last call are kept in ``diagnostics_``.
    """

    def __init__(
        self,
        rig,
        body=None,
        n_particles=200,
        n_layers=10,
        survival_rate=DEFAULT_SURVIVAL_RATE,
        anneal_base=0.7,
        diffusion_decay=0.7,
        sigma_base=None,
        temporal_scale=DEFAULT_TEMPORAL_SCALE,
        seed=0,
        workers=0,
    ):
        self.rig = rig
        self.body = body
        self.n_particles = n_particles
        self.n_layers = n_layers
        self.survival_rate = survival_rate
        self.anneal_base = anneal_base
        self.diffusion_decay = diffusion_decay
        self.sigma_base = sigma_base
        self.temporal_scale = temporal_scale
        self.seed = seed
        self.workers = workers

    def fit(self, X, y=None):
        pose = np.asarray(X, dtype=np.float64).ravel()
        if pose.shape != (N_DOF,):
            raise ValueError(f"initial pose needs {N_DOF} values, got {pose.size}")
        if int(self.n_particles) < 1:
            raise ValueError("n_particles must be >= 1")
        sigma = DEFAULT_SIGMA_BASE if self.sigma_base is None else self.sigma_base
        self.schedule_ = AnnealSchedule(
            n_layers=self.n_layers,
            sigma_base=np.array(sigma, dtype=np.float64),
            anneal_base=self.anneal_base,
            diffusion_decay=self.diffusion_decay,
            seed=self.seed,
            temporal_scale=self.temporal_scale,
            survival_rate=self.survival_rate,
        )
        self.body_ = default_body() if self.body is None else self.body
        self.initial_pose_ = pose
        return self

    def predict(self, X):
        check_is_fitted(self, "initial_pose_")
        result = track_sequence(
            list(X), self.initial_pose_, self.schedule_, int(self.n_particles),
            self.body_, self.rig, ParallelConfig(workers=self.workers),
        )
        self.diagnostics_ = result.diagnostics
        return result.poses
