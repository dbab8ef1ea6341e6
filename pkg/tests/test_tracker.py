from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelcap.bodymodel import N_DOF, default_body, forward_kinematics, rest_pose
from voxelcap import tracker
from voxelcap.exceptions import TrackingLost, ZeroTotalWeight
from voxelcap.geometry import CameraModel, CameraRig, project_points
from voxelcap.parallel import ParallelConfig
from voxelcap.synth import RigSpec, build_ring_rig, render_silhouette
from voxelcap.tracker import (
    AnnealSchedule,
    Measurement,
    ParticleSet,
    anneal,
    apf_frame,
    build_measurement,
    diffuse,
    effective_sample_size,
    estimate,
    keyed_rng,
    log_ssd_weights,
    normalize_log_weights,
    reproject_voxels,
    resample,
    ssd_weight,
    survival_beta,
    systematic_indices,
)
from voxelcap.voxelgrid import BinaryVolume, VolumeOfInterest, VoxelCloud, extract_surface

BODY = default_body()
POSE = rest_pose((0, 0, 900))


@pytest.fixture(scope="module")
def wide8():
    # far enough that the whole body stays inside every image
    return build_ring_rig(RigSpec(8, 5000.0, 200.0, 320, 240, camera_height=900.0, look_at=(0.0, 0.0, 900.0)))


def const_measurement(rig, sil, edge):
    return Measurement(
        [np.full((c.height, c.width), float(sil)) for c in rig],
        [np.full((c.height, c.width), float(edge)) for c in rig],
    )


def test_keyed_rng_is_a_pure_function_of_its_key():
    a = keyed_rng(7, 3, 2, 1).standard_normal(5)
    assert np.array_equal(a, keyed_rng(7, 3, 2, 1).standard_normal(5))
    for key in [(8, 3, 2, 1), (7, 4, 2, 1), (7, 3, 1, 1), (7, 3, 2, 0)]:
        assert not np.array_equal(a, keyed_rng(*key).standard_normal(5))


def test_reproject_single_voxel_rounds_to_nearest_pixel():
    P = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    rig = CameraRig([CameraModel(P, 40, 40)])
    (img,) = reproject_voxels(VoxelCloud([[10.2, 20.7, 1.0]]), rig)
    assert img[21, 10] == 1 and img.sum() == 1


def test_reproject_empty_cloud(ring4):
    imgs = reproject_voxels(VoxelCloud(np.zeros((0, 3))), ring4)
    assert len(imgs) == 4 and all(im.shape == (240, 320) and not im.any() for im in imgs)


def test_reprojected_sphere_matches_disk():
    f, depth, radius = 500.0, 3000.0, 300.0
    P = np.array([[f, 0, 99.5, 0], [0, f, 99.5, 0], [0, 0, 1.0, 0]])
    rig = CameraRig([CameraModel(P, 200, 200)])
    voi = VolumeOfInterest((-320.0, -320.0, depth - 320.0), 10.0, 64, 64, 64)
    c = voi.origin[0] + 10.0 * (np.arange(64) + 0.5)
    z, y, x = np.meshgrid(c - voi.origin[0] + voi.origin[2], c, c, indexing="ij")
    occ = x**2 + y**2 + (z - depth) ** 2 <= radius**2
    cloud = extract_surface(BinaryVolume(voi, occ))
    (img,) = reproject_voxels(cloud, rig)
    rr = f * radius / np.sqrt(depth**2 - radius**2)
    v, u = np.mgrid[0:200, 0:200]
    disk = (u - 99.5) ** 2 + (v - 99.5) ** 2 <= rr**2
    iou = np.logical_and(img, disk).sum() / np.logical_or(img, disk).sum()
    assert iou >= 0.9


def test_ssd_weight_extremes(wide8):
    assert ssd_weight(POSE, const_measurement(wide8, 1, 1), BODY, wide8) == pytest.approx(1.0, abs=1e-12)
    assert ssd_weight(POSE, const_measurement(wide8, 0, 0), BODY, wide8) == pytest.approx(np.exp(-16), rel=1e-12)
    assert ssd_weight(POSE, const_measurement(wide8, 0.3, 0.6), BODY, wide8, beta=0.0) == 1.0
    with pytest.raises(ValueError):
        ssd_weight(POSE, const_measurement(wide8, 0, 0), BODY, wide8, beta=-1)


def _random_measurement(rig, rng):
    return Measurement(
        [rng.random((c.height, c.width)) for c in rig],
        [rng.random((c.height, c.width)) for c in rig],
    )


def test_ssd_weight_range_and_sharpening(wide8, rng):
    meas = _random_measurement(wide8, rng)
    poses = POSE + rng.normal(scale=0.2, size=(6, N_DOF)) * np.r_[np.full(3, 100.0), np.ones(28)]
    for p in poses:
        ws = [ssd_weight(p, meas, BODY, wide8, beta=b) for b in (0.1, 0.5, 1.0, 2.0)]
        assert all(0 < w <= 1 for w in ws)
        assert all(a >= b for a, b in zip(ws, ws[1:]))


def test_ssd_weight_camera_permutation_invariant(wide8, rng):
    meas = _random_measurement(wide8, rng)
    perm = rng.permutation(len(wide8))
    rig2 = CameraRig([CameraModel(wide8[i].projection, 320, 240, k) for k, i in enumerate(perm)])
    meas2 = Measurement([meas.silhouettes[i] for i in perm], [meas.edges[i] for i in perm])
    poses = POSE + rng.normal(scale=0.1, size=(5, N_DOF))
    a = log_ssd_weights(poses, meas, BODY, wide8)
    b = log_ssd_weights(poses, meas2, BODY, rig2)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_log_weights_independent_of_workers(wide8, rng):
    meas = _random_measurement(wide8, rng)
    poses = POSE + rng.normal(scale=0.1, size=(40, N_DOF))
    ref = log_ssd_weights(poses, meas, BODY, wide8, ParallelConfig(workers=1))
    assert np.array_equal(ref, log_ssd_weights(poses, meas, BODY, wide8, ParallelConfig(workers=4)))


def test_truth_outscores_perturbations(wide8):
    sils = [render_silhouette(cam, forward_kinematics(POSE, BODY)) for cam in wide8]
    meas = build_measurement(sils)
    rng = np.random.default_rng(0)
    others = POSE + rng.normal(scale=0.3, size=(20, N_DOF)) * np.r_[np.full(3, 100.0), np.ones(28)]
    lw = log_ssd_weights(np.vstack([POSE, others]), meas, BODY, wide8)
    assert lw[0] > lw[1:].max()


def _oracle_systematic(weights, n, u):
    cum = np.cumsum(weights) / np.sum(weights)
    out, j = [], 0
    for i in range(n):
        pos = (u + i) / n
        while j < len(cum) - 1 and pos >= cum[j]:
            j += 1
        out.append(j)
    return out


def test_systematic_resampling_examples():
    pset = ParticleSet(np.arange(3.0)[:, None], [1.0, 0.0, 0.0])
    out = resample(pset, np.random.default_rng(0))
    assert np.all(out.poses == 0) and np.allclose(out.weights, 1 / 3)
    w = [0.5, 0.3, 0.2]
    idx = systematic_indices(w, 10, np.random.default_rng(42))
    u = np.random.default_rng(42).random()
    assert idx.tolist() == _oracle_systematic(w, 10, u)
    assert np.bincount(idx, minlength=3).tolist() == [5, 3, 2]
    with pytest.raises(ZeroTotalWeight):
        systematic_indices([0.0, 0.0], 2, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 60), st.integers(0, 2**31))
def test_systematic_matches_oracle(weights, n, seed):
    if sum(weights) <= 0:
        return
    idx = systematic_indices(weights, n, np.random.default_rng(seed))
    assert idx.tolist() == _oracle_systematic(weights, n, np.random.default_rng(seed).random())
    counts = np.bincount(idx, minlength=len(weights))
    expect = n * np.asarray(weights) / sum(weights)
    assert np.all(np.abs(counts - expect) < 1 + 1e-9)


def test_diffuse_tiny_sigma_is_identity(rng):
    pset = ParticleSet(rng.normal(size=(10, 4)))
    out = diffuse(pset, 1e-12, rng)
    assert np.allclose(out.poses, pset.poses, atol=1e-9)


def test_diffuse_statistics(rng):
    n = 100_000
    sigma = np.array([2.0, 0.5])
    out = diffuse(ParticleSet(np.zeros((n, 2))), sigma, rng)
    assert np.all(np.abs(out.poses.mean(axis=0)) < 5 * sigma / np.sqrt(n))
    # standard error of a sample std is about sigma / sqrt(2 n)
    assert np.all(np.abs(out.poses.std(axis=0) - sigma) < 5 * sigma / np.sqrt(2 * n))


def test_estimate_and_normalisation():
    assert estimate(ParticleSet([[0.0], [2.0]], [0.5, 0.5])).tolist() == [1.0]
    assert estimate(ParticleSet([[0.0], [2.0]], [1.0, 0.0])).tolist() == [0.0]
    assert estimate(ParticleSet([[0.0], [2.0]], [3.0, 1.0])).tolist() == [0.5]
    w = normalize_log_weights([-1000.0, 0.0, -2.0, -np.inf])
    assert w.sum() == pytest.approx(1.0, abs=1e-9) and w[3] == 0
    with pytest.raises(ZeroTotalWeight):
        normalize_log_weights([-np.inf, -np.inf])
    with pytest.raises(ZeroTotalWeight):
        estimate(ParticleSet([[1.0]], [0.0]))


def test_survival_beta_hits_target(rng):
    for rate in (0.1, 0.3, 0.7):
        lw = rng.normal(scale=0.2, size=200)
        beta = survival_beta(lw, rate)
        ess = effective_sample_size(normalize_log_weights(beta * lw))
        assert ess == pytest.approx(rate * 200, rel=1e-6)
    assert survival_beta(np.zeros(10), 0.5) == 1.0
    # two particles can never drop below 1 effective particle
    assert survival_beta([0.0, -1.0], 0.3) == 1e6


def test_single_particle_no_noise_returns_input():
    sched = AnnealSchedule(n_layers=3, sigma_base=np.full(2, 1e-12))
    res = anneal(ParticleSet([[1.5, -2.0]]), lambda p: -np.sum(p**2, axis=1), sched)
    assert np.allclose(res.estimate, [1.5, -2.0], atol=1e-9)


@pytest.mark.parametrize("survival", [None, 0.5])
def test_one_layer_matches_hand_built_sir(survival, rng):
    n, seed, frame = 50, 11, 4
    sigma = np.array([0.3, 0.1])
    sched = AnnealSchedule(n_layers=1, sigma_base=sigma, anneal_base=0.6, diffusion_decay=0.8,
                           seed=seed, survival_rate=survival, temporal_scale=2.5)
    prev = ParticleSet(rng.normal(size=(n, 2)))

    def f(p):
        return -np.sum((p - [0.5, -0.25]) ** 2, axis=1)

    res = anneal(prev, f, sched, frame=frame)

    def weights(x, beta_fixed):
        lw = f(x)
        beta = beta_fixed if survival is None else survival_beta(lw, survival)
        w = np.exp(beta * lw - np.max(beta * lw))
        return w / w.sum()

    # layer 1: weight, resample, diffuse with sigma_base * decay ** 1
    w1 = weights(prev.poses, 0.6)
    r = keyed_rng(seed, frame, 1, 0)
    idx = _oracle_systematic(w1, n, r.random())
    x = prev.poses[idx] + keyed_rng(seed, frame, 1, 1).standard_normal((n, 2)) * sigma * 0.8
    # layer 0: weight with beta = 1 and take the weighted mean
    w0 = weights(x, 1.0)
    assert np.allclose(res.estimate, w0 @ x, rtol=0, atol=1e-12)
    idx = _oracle_systematic(w0, n, keyed_rng(seed, frame, 0, 0).random())
    nxt = x[idx] + keyed_rng(seed, frame, 0, 1).standard_normal((n, 2)) * sigma * 0.8 * 2.5
    assert np.allclose(res.next_set.poses, nxt, rtol=0, atol=1e-12)


def test_anneal_recovers_toy_optimum():
    target = np.array([0.3, -0.7])
    sched = AnnealSchedule(n_layers=10, sigma_base=np.ones(2), seed=3)
    prev = ParticleSet(np.random.default_rng(3).normal(size=(200, 2)))
    res = anneal(prev, lambda p: -np.sum((p - target) ** 2, axis=1), sched)
    assert np.linalg.norm(res.estimate - target) < 0.05
    assert len(res.betas) == 11 and len(res.ess) == 11


def test_apf_frame_raises_tracking_lost(wide8, monkeypatch):
    meas = const_measurement(wide8, 1, 1)
    sched = AnnealSchedule(n_layers=1)
    prev = ParticleSet.replicate(POSE, 4)

    monkeypatch.setattr(tracker, "log_ssd_weights", lambda poses, *a, **k: np.full(len(poses), -np.inf))
    with pytest.raises(TrackingLost) as info:
        apf_frame(prev, meas, sched, BODY, wide8, frame=5)
    assert info.value.frame == 5


def test_apf_frame_deterministic_across_workers(wide8, rng):
    meas = _random_measurement(wide8, rng)
    sched = AnnealSchedule(n_layers=2, seed=9)
    prev = ParticleSet.replicate(POSE, 30)
    a, na = apf_frame(prev, meas, sched, BODY, wide8, frame=2, cfg=ParallelConfig(workers=1))
    b, nb = apf_frame(prev, meas, sched, BODY, wide8, frame=2, cfg=ParallelConfig(workers=4))
    assert np.array_equal(a, b) and np.array_equal(na.poses, nb.poses)


def test_schedule_validation():
    with pytest.raises(ValueError):
        AnnealSchedule(n_layers=0)
    with pytest.raises(ValueError):
        AnnealSchedule(survival_rate=1.0)
    with pytest.raises(ValueError):
        AnnealSchedule(sigma_base=np.zeros(3))
    s = AnnealSchedule(n_layers=4, sigma_base=np.ones(1), anneal_base=0.5, diffusion_decay=0.5)
    assert s.beta(0) == 1.0 and s.beta(2) == 0.25
    assert s.sigma(4)[0] == 1.0 and s.sigma(0)[0] == 0.0625


def test_reprojection_uses_projection(ring4, rng):
    pts = rng.uniform(-200, 200, size=(50, 3)) + [0, 0, 1000]
    imgs = reproject_voxels(VoxelCloud(pts), ring4)
    for cam, img in zip(ring4, imgs):
        uv, _ = project_points(cam, pts)
        px = np.floor(uv + 0.5).astype(int)
        assert np.all(img[px[:, 1], px[:, 0]] == 1)
