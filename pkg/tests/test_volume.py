import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orthovox.hdn import Detection3D
from orthovox.scenecam import Camera, VoxelSpace, cube_space, look_at_camera
from orthovox.synthgen import SceneConfig, frame_rng, place_poses, render_heatmaps
from orthovox.volume import (FeatureVolume, TensorFileError, build_person_volume, build_volume,
                             extract_columns, mask_person_volume, project_bev, project_triplanes, read_tensor,
                             tensor_from_bytes, tensor_to_bytes, write_tensor)

seeds = st.integers(0, 2**32 - 1)


def axis_camera(cam_id="c"):
    """Looks along +z from the origin; world (0, 0, 1000) lands on pixel (10, 10)."""
    K = np.array([[100.0, 0, 10], [0, 100.0, 10], [0, 0, 1]])
    return Camera(cam_id, K, np.eye(3), np.zeros(3), (21, 21))


ONE_VOXEL = VoxelSpace((-50, -50, 950), (100, 100, 100), (1, 1, 1))


def peak_map(value):
    hm = np.zeros((1, 21, 21), np.float32)
    hm[0, 10, 10] = value
    return hm


def box(center, size):
    return Detection3D((0, 0), np.asarray(center, float), np.asarray(size, float), 1.0)


def test_single_camera_exact_pixel():
    vol = build_volume([peak_map(0.8)], [axis_camera()], ONE_VOXEL)
    assert vol.data.shape == (1, 1, 1, 1)
    assert vol.data[0, 0, 0, 0] == pytest.approx(0.8)


def test_two_cameras_average():
    vol = build_volume([peak_map(0.4), peak_map(0.8)], [axis_camera("a"), axis_camera("b")], ONE_VOXEL)
    assert vol.data[0, 0, 0, 0] == pytest.approx(0.6)


def test_voxel_behind_camera_is_zero():
    space = VoxelSpace((-50, -50, -1050), (100, 100, 100), (1, 1, 1))
    vol = build_volume([np.ones((1, 21, 21), np.float32)], [axis_camera()], space)
    assert vol.data.max() == 0


def test_voxel_outside_image_is_zero():
    space = VoxelSpace((5000, -50, 950), (100, 100, 100), (1, 1, 1))
    vol = build_volume([np.ones((1, 21, 21), np.float32)], [axis_camera()], space)
    assert vol.data.max() == 0


def test_out_of_view_camera_does_not_dilute_mean():
    far = Camera("far", axis_camera().intrinsics, np.eye(3), np.array([0.0, 0.0, -5000.0]), (21, 21))
    # "far" sees the voxel at depth -4000: behind it, so the mean is over one camera
    vol = build_volume([peak_map(0.8), np.ones((1, 21, 21), np.float32)], [axis_camera(), far], ONE_VOXEL)
    assert vol.data[0, 0, 0, 0] == pytest.approx(0.8)


def test_bilinear_midpoint():
    hm = np.zeros((1, 21, 21), np.float32)
    hm[0, 10, 10], hm[0, 10, 11] = 0.2, 0.6
    # x = 5 mm at depth 1000 lands on u = 10.5
    space = VoxelSpace((-45, -50, 950), (100, 100, 100), (1, 1, 1))
    assert build_volume([hm], [axis_camera()], space).data[0, 0, 0, 0] == pytest.approx(0.4)


def test_values_clipped():
    vol = build_volume([peak_map(3.0)], [axis_camera()], ONE_VOXEL)
    assert vol.data.max() == 1.0


def test_build_volume_errors():
    with pytest.raises(ValueError, match="camera"):
        build_volume([], [], ONE_VOXEL)
    with pytest.raises(ValueError, match="does not match"):
        build_volume([np.zeros((1, 5, 5), np.float32)], [axis_camera()], ONE_VOXEL)
    with pytest.raises(ValueError, match="heatmaps for"):
        build_volume([peak_map(1.0)], [axis_camera(), axis_camera()], ONE_VOXEL)


def test_bev_examples():
    d = np.zeros((2, 4, 3, 5), np.float32)
    d[1, 2, 1, 3] = 0.7
    vol = FeatureVolume(d, VoxelSpace((0, 0, 0), (4, 3, 5), (4, 3, 5)))
    bev = project_bev(vol).data
    assert bev[1, 2, 1] == pytest.approx(0.7) and bev.sum() == pytest.approx(0.7)
    assert project_bev(FeatureVolume(np.zeros_like(d), vol.space)).data.max() == 0
    xy, xz, yz = project_triplanes(vol)
    assert (xy.data[1, 2, 1], xz.data[1, 2, 3], yz.data[1, 1, 3]) == pytest.approx((0.7, 0.7, 0.7))
    assert [p.tag for p in (xy, xz, yz)] == ["xy", "xz", "yz"]


def test_projections_match_brute_force(rng):
    d = rng.random((3, 4, 5, 6)).astype(np.float32)
    vol = FeatureVolume(d, VoxelSpace((0, 0, 0), (4, 5, 6), (4, 5, 6)))
    xy, xz, yz = project_triplanes(vol)
    K, L, W, H = d.shape
    for k in range(K):
        for a in range(L):
            for b in range(W):
                assert xy.data[k, a, b] == max(d[k, a, b, h] for h in range(H))
            for c in range(H):
                assert xz.data[k, a, c] == max(d[k, a, b, c] for b in range(W))
    assert np.array_equal(project_bev(vol).data, xy.data)
    assert np.array_equal(yz.data, d.max(axis=1))


def test_constant_volume_constant_planes():
    vol = FeatureVolume(np.full((2, 3, 3, 3), 0.25, np.float32), cube_space((0, 0, 0), 3, 3))
    for plane in project_triplanes(vol):
        assert np.all(plane.data == 0.25)


def test_extract_columns():
    d = np.zeros((2, 12, 12, 5), np.float32)
    d[0, 3, 4, 2] = 0.9
    vol = FeatureVolume(d, VoxelSpace((0, 0, 0), (12, 12, 5), (12, 12, 5)))
    col = extract_columns(vol, [(3, 4)]).data
    assert col.shape == (1, 2, 5) and col[0, 0, 2] == pytest.approx(0.9) and col.sum() == pytest.approx(0.9)
    assert extract_columns(vol, [(i, i) for i in range(10)]).data.shape == (10, 2, 5)
    with pytest.raises(IndexError):
        extract_columns(vol, [(12, 0)])
    with pytest.raises(IndexError):
        extract_columns(vol, [(0, -1)])


def test_mask_examples():
    vol = FeatureVolume(np.ones((1, 5, 5, 2), np.float32), cube_space((0, 0, 0), 500, 5))
    full = mask_person_volume(vol, box((0, 0, 0), (500, 500)))
    assert np.array_equal(full.data, vol.data)
    point = mask_person_volume(vol, box((0, 0, 0), (0, 0)))
    cols = np.argwhere(point.data[0].max(axis=2) > 0)
    assert cols.tolist() == [[2, 2]]


def test_mask_matches_predicate(rng):
    space = cube_space((100, -200, 1000), 2000, 16)
    vol = FeatureVolume(rng.random((2, 16, 16, 16)).astype(np.float32), space)
    b = box((300, -500, 900), (700, 1100))
    out = mask_person_volume(vol, b).data
    centers = space.centers().reshape(16, 16, 16, 3)
    keep = (np.abs(centers[..., 0] - 300) <= 350) & (np.abs(centers[..., 1] + 500) <= 550)
    assert np.array_equal(out, vol.data * keep[None])


@pytest.fixture(scope="module")
def ring_scene():
    sc = SceneConfig(min_persons=1, max_persons=1)
    poses = place_poses(sc, frame_rng(5, 0), 1)
    cams = sc.cameras()
    return sc, poses, cams, render_heatmaps(poses, cams, sc.sigma_px)


def test_person_volume_matches_coarse_grid(ring_scene):
    sc, _, cams, hms = ring_scene
    coarse = build_volume(hms, cams, sc.space)
    fine = build_person_volume(hms, cams, box((4000, 4000, 1000), (2000, 2000)), fine_res=20)
    assert fine.data.shape == (15, 20, 20, 20)
    assert np.allclose(fine.space.center, (4000, 4000, 1000))
    assert np.allclose(fine.data, coarse.data[:, 30:50, 30:50, :], atol=1e-6)


def test_person_volume_inside_box_equals_masked(ring_scene):
    _, poses, cams, hms = ring_scene
    b = box(poses[0].joints.mean(axis=0), (900, 700))
    full = build_person_volume(hms, cams, b, fine_res=24)
    fast = build_person_volume(hms, cams, b, fine_res=24, only_inside_box=True)
    assert np.allclose(fast.data, mask_person_volume(full, b).data, atol=1e-7)


def test_person_volume_default_shape(ring_scene):
    _, _, cams, hms = ring_scene
    assert build_person_volume(hms, cams, box((4000, 4000, 1000), (100, 100)), only_inside_box=True).data.shape \
        == (15, 64, 64, 64)


def test_tensor_round_trip(tmp_path, rng):
    arr = rng.random((3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.ovxt", arr)
    back = read_tensor(tmp_path / "t.ovxt")
    assert back.dtype == np.float32 and np.array_equal(back, arr)
    assert tensor_to_bytes(back) == tensor_to_bytes(arr)


def test_tensor_errors(rng):
    raw = tensor_to_bytes(rng.random((2, 2)).astype(np.float32))
    with pytest.raises(TensorFileError, match="magic"):
        tensor_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TensorFileError, match="bytes"):
        tensor_from_bytes(raw[:-3])
    with pytest.raises(TensorFileError, match="version"):
        tensor_from_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])


# -- properties ---------------------------------------------------------------

def random_volume(seed, shape=(3, 5, 4, 6)):
    r = np.random.default_rng(seed)
    d = r.random(shape).astype(np.float32) * (r.random(shape) < 0.6)
    return FeatureVolume(d, cube_space((0, 0, 0), 600, 6) if len(set(shape[1:])) == 1
                         else VoxelSpace((0, 0, 0), shape[1:], shape[1:]))


@given(seeds)
def test_bev_max_equals_volume_max(seed):
    vol = random_volume(seed)
    assert np.array_equal(project_bev(vol).data.max(axis=(1, 2)), vol.data.max(axis=(1, 2, 3)))


@given(seeds)
def test_plane_values_are_elements_of_volume(seed):
    vol = random_volume(seed)
    for k in range(vol.data.shape[0]):
        members = set(vol.data[k].ravel().tolist())
        for plane in project_triplanes(vol):
            assert set(plane.data[k].ravel().tolist()) <= members


@given(seeds, st.floats(-400, 400), st.floats(-400, 400), st.floats(0, 900), st.floats(0, 900))
def test_masking_idempotent_and_shrinking(seed, cx, cy, sx, sy):
    vol = random_volume(seed, (2, 6, 6, 6))
    b = box((cx, cy, 0), (sx, sy))
    once = mask_person_volume(vol, b)
    assert np.all(once.data <= vol.data)
    assert np.array_equal(mask_person_volume(once, b).data, once.data)


def _tiny_rig(seed):
    r = np.random.default_rng(seed)
    cams = []
    for c in range(3):
        ang = r.uniform(0, 2 * np.pi)
        eye = (1500 * np.cos(ang), 1500 * np.sin(ang), r.uniform(300, 1500))
        cams.append(look_at_camera(f"c{c}", eye, (0, 0, 500), 20.0, (24, 18)))
    hms = [r.random((2, 18, 24)).astype(np.float32) for _ in cams]
    return cams, hms


@given(seeds, st.permutations([0, 1, 2]))
def test_volume_camera_permutation_invariant(seed, perm):
    cams, hms = _tiny_rig(seed)
    space = VoxelSpace((-400, -400, 0), (800, 800, 1000), (4, 4, 5))
    a = build_volume(hms, cams, space).data
    b = build_volume([hms[i] for i in perm], [cams[i] for i in perm], space).data
    assert np.allclose(a, b, atol=1e-6)
    assert a.min() >= 0 and a.max() <= 1
