from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from voxelcap.bodymodel import (
    DOF_INDEX,
    N_DOF,
    PART_NAMES,
    BodyModel,
    CylinderSpec,
    PlacedCylinder,
    default_body,
    forward_kinematics,
    forward_kinematics_batch,
    joint_centers,
    load_body,
    project_cylinders,
    read_poses_csv,
    rest_pose,
    save_body,
    write_poses_csv,
)
from voxelcap.exceptions import MalformedTree, ParseError
from voxelcap.geometry import CameraModel

BODY = default_body()


def pinhole(f, cx, cy, width=1000, height=1000):
    return CameraModel(np.array([[f, 0, cx, 0], [0, f, cy, 0], [0, 0, 1.0, 0]]), width, height)


def placed(fk):
    return {p.name: p for p in fk}


def test_zero_pose_is_t_pose():
    fk = placed(forward_kinematics(rest_pose((0, 0, 900)), BODY))
    assert np.allclose(fk["TORSO"].base_center, [0, 0, 900])
    assert np.allclose(fk["TORSO"].top_center, [0, 0, 1450])
    assert np.allclose(fk["head"].top_center, [0, 0, 1730])
    assert np.allclose(fk["left_calf"].top_center, [-95, 0, 40])
    assert np.allclose(fk["right_calf"].top_center, [95, 0, 40])
    assert np.allclose(fk["left_lower_arm"].top_center, [-740, 0, 1420])
    assert np.allclose(fk["right_lower_arm"].top_center, [740, 0, 1420])


def test_root_translation_shifts_everything(rng):
    pose = rng.normal(scale=0.5, size=N_DOF)
    b0, t0 = forward_kinematics_batch(pose, BODY)
    pose[0] += 1.0
    b1, t1 = forward_kinematics_batch(pose, BODY)
    assert np.allclose(b1 - b0, [1, 0, 0], atol=1e-9)
    assert np.allclose(t1 - t0, [1, 0, 0], atol=1e-9)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def test_knee_flex_against_rotation_chain():
    pose = rest_pose()
    pose[DOF_INDEX["l_knee_flex"]] = np.pi / 2
    fk = placed(forward_kinematics(pose, BODY))
    thigh = fk["left_thigh"].top_center - fk["left_thigh"].base_center
    calf = fk["left_calf"].top_center - fk["left_calf"].base_center
    assert abs(thigh @ calf) < 1e-9 * 430 * 430
    # knee hinge: rotation of -pi/2 about world x (flex about -x), calf rests along -z
    knee = np.array([-95.0, 0.0, 0.0 + 900 - 900 - 430])
    expect = knee + _rx(-np.pi / 2) @ np.array([0.0, 0.0, -430.0])
    assert np.allclose(fk["left_calf"].top_center, expect, atol=1e-9)
    assert np.allclose(expect, [-95, -430, -430])


def test_lengths_preserved(rng):
    poses = rng.normal(scale=2.0, size=(200, N_DOF))
    poses[:, :3] *= 500
    base, top = forward_kinematics_batch(poses, BODY)
    lengths = np.linalg.norm(top - base, axis=-1)
    assert np.allclose(lengths, BODY.lengths, rtol=1e-9, atol=0)


def test_no_dead_dofs_at_generic_pose(rng):
    for _ in range(5):
        pose = rng.normal(scale=0.4, size=N_DOF)
        b0, t0 = forward_kinematics_batch(pose, BODY)
        for i in range(N_DOF):
            p = pose.copy()
            p[i] += 1e-3
            b1, t1 = forward_kinematics_batch(p, BODY)
            assert max(np.abs(b1 - b0).max(), np.abs(t1 - t0).max()) > 1e-6, i


def test_batch_matches_single(rng):
    poses = rng.normal(size=(4, 3, N_DOF))
    base, top = forward_kinematics_batch(poses, BODY)
    for idx in np.ndindex(4, 3):
        b, t = forward_kinematics_batch(poses[idx], BODY)
        assert np.array_equal(base[idx], b) and np.array_equal(top[idx], t)


def test_malformed_trees():
    parts = list(BODY.parts.values())
    with pytest.raises(MalformedTree):
        BodyModel(parts[:-1])
    with pytest.raises(MalformedTree):
        BodyModel(parts + [parts[0]])
    cyc = [replace(p, parent="left_calf") if p.name == "left_thigh" else p for p in parts]
    with pytest.raises(MalformedTree):
        BodyModel(cyc)
    with pytest.raises(MalformedTree):
        BodyModel([replace(p, parent="nowhere") if p.name == "head" else p for p in parts])
    with pytest.raises(MalformedTree):
        CylinderSpec("tail", 1, 1, 1)
    with pytest.raises(ValueError):
        CylinderSpec("head", 0, 1, 1)


def test_body_file_round_trip(tmp_path):
    save_body(BODY, tmp_path / "b.txt")
    assert load_body(tmp_path / "b.txt") == BODY
    (tmp_path / "bad.txt").write_text("part head TORSO 1 2\n")
    with pytest.raises(ParseError):
        load_body(tmp_path / "bad.txt")


def test_pose_csv_round_trip(tmp_path, rng):
    poses = rng.normal(size=(5, N_DOF))
    write_poses_csv(tmp_path / "p.csv", range(5), poses)
    frames, back = read_poses_csv(tmp_path / "p.csv")
    assert frames == [0, 1, 2, 3, 4]
    assert np.allclose(back, poses, atol=1e-9)
    assert (tmp_path / "p.csv").read_text().splitlines()[0].startswith("frame,root_tx")


def test_broadside_trapezoid_half_width():
    f, d, r = 500.0, 5000.0, 50.0
    cam = pinhole(f, 400.0, 300.0)
    cyl = PlacedCylinder("head", np.array([-200.0, 0, d]), np.array([200.0, 0, d]), r, r)
    (pc,) = project_cylinders([cyl], cam)
    assert not pc.empty
    quad = pc.contour
    half = (quad[:, 1].max() - quad[:, 1].min()) / 2
    assert half == pytest.approx(f * r / d, rel=1e-3)
    # symmetric about the principal point in both directions
    assert np.allclose(np.sort(quad[:, 0] - 400), -np.sort(quad[:, 0] - 400)[::-1], atol=1e-9)
    assert np.allclose(np.sort(quad[:, 1] - 300), -np.sort(quad[:, 1] - 300)[::-1], atol=1e-9)
    assert pc.contour_samples.shape == (16, 2) and pc.interior_samples.shape == (25, 2)
    lo, hi = quad.min(axis=0), quad.max(axis=0)
    assert np.all((pc.interior_samples >= lo - 1e-9) & (pc.interior_samples <= hi + 1e-9))


def test_behind_camera_is_empty():
    cam = pinhole(500.0, 400.0, 300.0)
    behind = PlacedCylinder("head", np.array([0, 0, -1000.0]), np.array([0, 100, -1000.0]), 50, 50)
    straddle = PlacedCylinder("head", np.array([0, 0, -10.0]), np.array([0, 0, 1000.0]), 50, 50)
    out = project_cylinders([behind, straddle], cam)
    assert all(pc.empty and pc.contour_samples.size == 0 for pc in out)


def test_end_on_view_gives_circle():
    f, r, d = 500.0, 60.0, 1000.0
    cam = pinhole(f, 400.0, 300.0)
    cyl = PlacedCylinder("head", np.array([0, 0, d]), np.array([0, 0, d + 300.0]), r, r)
    (pc,) = project_cylinders([cyl], cam, n_contour=32)
    assert np.all(np.isfinite(pc.contour_samples))
    # circle projection oracle: a circle facing the camera maps to radius f r / d
    R = f * r / d
    dist = np.linalg.norm(pc.contour_samples - [400, 300], axis=1)
    assert np.all(dist <= R + 1e-6) and np.all(dist >= R * np.cos(np.pi / 32) - 1e-6)
    assert np.all(np.linalg.norm(pc.interior_samples - [400, 300], axis=1) <= R + 1e-6)


def test_principal_point_shift_commutes(rng):
    pose = rng.normal(scale=0.3, size=N_DOF)
    pose[:3] = (0, 0, 900)
    cyls = forward_kinematics(pose, BODY)
    P = np.array([[400.0, 0, 300, 0], [0, 400, 200, 0], [0, 0, 1, 0]]) @ np.vstack(
        [np.hstack([np.eye(3), [[0], [-1000], [4000]]]), [0, 0, 0, 1]])
    a = project_cylinders(cyls, CameraModel(P, 640, 480))
    T = np.array([[1, 0, 17.5], [0, 1, -3.25], [0, 0, 1]])
    b = project_cylinders(cyls, CameraModel(T @ P, 640, 480))
    for pa, pb in zip(a, b):
        assert np.allclose(pb.contour_samples - pa.contour_samples, [17.5, -3.25], atol=1e-6)
        assert np.allclose(pb.interior_samples - pa.interior_samples, [17.5, -3.25], atol=1e-6)


def test_part_names_and_dof_count():
    assert len(PART_NAMES) == 10 and len(DOF_INDEX) == N_DOF == 31
    assert DOF_INDEX["l_shoulder_ry"] == 12


def test_joint_centers_are_distinct():
    j = joint_centers(rest_pose((0, 0, 900)), BODY)
    assert j.shape == (15, 3)
    assert len({tuple(np.round(p, 6)) for p in j}) == 15
    assert [0, 0, 1730] in j.tolist() and [-740, 0, 1420] in j.tolist() and [95, 0, 40] in j.tolist()
