import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orthovox.scenecam import (CMU15, Camera, PoseSkeleton, SkeletonDef, VoxelSpace, look_at_camera,
                               project_point, project_points, ring_cameras, root_joint, voxel_center,
                               world_to_continuous_grid)


def simple_camera():
    K = np.array([[1000.0, 0, 500], [0, 1000.0, 500], [0, 0, 1]])
    return Camera("c", K, np.eye(3), np.zeros(3), (1001, 1001))


def test_optical_axis_hits_principal_point():
    pix, depth, front = project_point(simple_camera(), (0, 0, 1000))
    assert np.allclose(pix, (500, 500)) and depth == 1000 and front


def test_lateral_offset_projection():
    pix, _, _ = project_point(simple_camera(), (100, 0, 1000))
    assert np.allclose(pix, (600, 500))


def test_behind_camera_flag():
    _, depth, front = project_point(simple_camera(), (0, 0, -10))
    assert depth < 0 and not front


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera("bad", np.eye(3), np.diag([1.0, 2.0, 1.0]), np.zeros(3), (10, 10))


def test_camera_rejects_bad_focal():
    with pytest.raises(ValueError):
        Camera("bad", np.diag([0.0, 1.0, 1.0]), np.eye(3), np.zeros(3), (10, 10))


def test_camera_dict_round_trip():
    cam = ring_cameras(3, (4000, 4000, 0), 7000, 2500, 900, 134, (320, 240))[1]
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.rotation, cam.rotation) and back.image_size == cam.image_size


def test_look_at_centers_target():
    cam = look_at_camera("c", (7000, 1000, 2500), (4000, 4000, 900), 134, (320, 240))
    pix, depth, front = project_point(cam, (4000, 4000, 900))
    assert front and np.allclose(pix, ((320 - 1) / 2, (240 - 1) / 2))
    assert np.allclose(cam.center, (7000, 1000, 2500))


def test_ring_cameras_see_space_center():
    for cam in ring_cameras(5, (4000, 4000, 0), 7500, 2500, 900, 134, (320, 240)):
        pix, _, front = project_point(cam, (4000, 4000, 900))
        assert front and 0 <= pix[0] < 320 and 0 <= pix[1] < 240


@pytest.mark.parametrize("idx,expected", [((0, 0, 0), (50, 50, 50)),
                                          ((79, 79, 19), (7950, 7950, 1950)),
                                          ((40, 40, 10), (4050, 4050, 1050))])
def test_voxel_center_examples(idx, expected):
    assert np.allclose(voxel_center(VoxelSpace(), idx), expected)


def test_voxel_center_out_of_range():
    with pytest.raises(IndexError):
        voxel_center(VoxelSpace(), (80, 0, 0))


@pytest.mark.parametrize("p,expected", [((4050, 4050, 1050), (40.5, 40.5, 10.5)),
                                        ((0, 0, 0), (0, 0, 0)),
                                        ((7999, 0, 0), (79.99, 0, 0))])
def test_continuous_grid_examples(p, expected):
    assert np.allclose(world_to_continuous_grid(VoxelSpace(), p), expected, atol=1e-12)


def test_space_centers_order_matches_voxel_center():
    sp = VoxelSpace((0, 0, 0), (400, 300, 200), (4, 3, 2))
    c = sp.centers().reshape(4, 3, 2, 3)
    assert np.allclose(c[2, 1, 0], voxel_center(sp, (2, 1, 0)))


def test_space_validation():
    with pytest.raises(ValueError):
        VoxelSpace((0, 0, 0), (0, 100, 100), (1, 1, 1))


@given(st.integers(0, 79), st.integers(0, 79), st.integers(0, 19))
def test_grid_round_trip(i, j, k):
    g = world_to_continuous_grid(VoxelSpace(), voxel_center(VoxelSpace(), (i, j, k)))
    assert np.allclose(g, np.array([i, j, k]) + 0.5, atol=1e-9)


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(100, 10000), st.floats(0.1, 5))
def test_projection_linearity(x, y, z, s):
    cam = simple_camera()
    p1, _ = project_points(cam, np.array([[x, y, z]]))
    p2, _ = project_points(cam, np.array([[s * x, y, z]]))
    cx = cam.intrinsics[0, 2]
    assert np.isclose(p2[0, 0] - cx, s * (p1[0, 0] - cx), rtol=1e-9, atol=1e-7)


def test_skeleton_validates_limbs():
    with pytest.raises(ValueError):
        SkeletonDef(("a", "b"), ((0, 2),))
    assert CMU15.joint_count == 15 and CMU15.index("r_hip") == 12


def test_root_joint_hip_midpoint_and_fallback():
    j = np.zeros((15, 3))
    j[6] = (0, 0, 900)
    j[12] = (200, 0, 900)
    j[0] = (7, 7, 7)
    assert np.allclose(root_joint(PoseSkeleton(j)), (100, 0, 900))
    valid = np.ones(15, bool)
    valid[12] = False
    assert np.allclose(root_joint(PoseSkeleton(j, valid)), (7, 7, 7))


@given(st.integers(3, 12), st.floats(0, 8000), st.floats(0, 8000), st.floats(0, 2000))
def test_projection_round_trip(count, x, y, z):
    """Pixel plus depth, lifted back through the intrinsics and pose, is the point."""
    p = np.array([x, y, z])
    for cam in ring_cameras(count, (4000, 4000), 7500, 2500, 900, 134, (320, 240)):
        (pix,), (depth,) = project_points(cam, p[None])
        ray = np.linalg.solve(cam.intrinsics, [pix[0], pix[1], 1.0])
        back = cam.rotation.T @ (depth * ray - cam.translation)
        assert np.allclose(back, p, atol=1e-6)


@given(st.floats(500, 1e4), st.floats(-1e4, 1e4), st.floats(100, 5000), st.floats(50, 2000))
def test_camera_serialization_round_trip(x, y, h, f):
    cam = look_at_camera("c", (x, y, h), (0, 0, 0), f, (320, 240))
    back = Camera.from_dict(cam.to_dict())
    pts = np.array([[0.0, 0.0, 0.0], [100.0, -50.0, 900.0]])
    assert np.array_equal(project_points(back, pts)[0], project_points(cam, pts)[0])
