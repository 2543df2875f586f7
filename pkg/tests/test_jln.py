import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from orthovox.hdn import Detection3D, gt_boxes
from orthovox.jln import (LAMBDA_CONF, PLANES, AnalyticPoseNet, FusedPose, FusionWeights, ZeroConfidence,
                          estimate_planes, fuse, fuse_backward, gt_plane_coords, localize_masked, localize_person,
                          loss_conf, loss_hm, loss_jln, plane_stack, soft_argmax_2d, soft_argmax_2d_backward)
from orthovox.metrics import pose_error
from orthovox.nncore import build_pose_net
from orthovox.scenecam import PoseSkeleton, VoxelSpace, cube_space, voxel_center
from orthovox.synthgen import SceneConfig, frame_rng, place_poses, render_heatmaps, sample_pose
from orthovox.volume import FeatureVolume, build_person_volume

seeds = st.integers(0, 2**32 - 1)
CUBE = cube_space((1000, 2000, 1000), 2000, 64)


# -- soft-argmax --------------------------------------------------------------

def test_soft_argmax_uniform():
    assert soft_argmax_2d(np.ones((1, 64, 64)))[0] == pytest.approx((31.5, 31.5))


def test_soft_argmax_one_hot():
    hm = np.zeros((1, 20, 20))
    hm[0, 5, 9] = 3.0
    assert soft_argmax_2d(hm)[0] == pytest.approx((5.0, 9.0))


def test_soft_argmax_two_points():
    hm = np.zeros((1, 16, 16))
    hm[0, 0, 0] = hm[0, 10, 0] = 0.5
    assert soft_argmax_2d(hm)[0] == pytest.approx((5.0, 0.0))


def test_soft_argmax_empty_map_falls_back():
    coords, empty = soft_argmax_2d(np.zeros((2, 8, 6)), return_empty=True)
    assert np.allclose(coords, (3.5, 2.5)) and empty.all()


def test_soft_argmax_errors():
    with pytest.raises(ValueError, match="non-empty"):
        soft_argmax_2d(np.zeros((1, 0, 4)))
    with pytest.raises(ValueError, match="non-negative"):
        soft_argmax_2d(-np.ones((1, 3, 3)))


# -- plane estimation ----------------------------------------------------------

class Recorder:
    def __init__(self, inner):
        self.inner, self.shapes = inner, []

    def __call__(self, x):
        self.shapes.append(x.shape)
        return self.inner(x)


def test_estimate_planes_single_batch_of_three(rng):
    vol = FeatureVolume(rng.random((15, 64, 64, 64)).astype(np.float32), CUBE)
    net = Recorder(build_pose_net(15, 4).eval())
    planes = estimate_planes(vol, net)
    assert net.shapes == [(3, 15, 64, 64)]
    assert [p.tag for p in planes] == list(PLANES)
    assert all(p.heatmaps.shape == (15, 64, 64) and p.coords.shape == (15, 2) for p in planes)
    assert all(np.all((p.coords >= 0) & (p.coords <= 64)) for p in planes)


def test_shared_weights_permute_with_planes(rng):
    vol = FeatureVolume(rng.random((2, 12, 12, 12)).astype(np.float32), cube_space((0, 0, 0), 1200, 12))
    net = build_pose_net(2, 3).eval()
    batch = plane_stack(vol).astype(np.float32)
    perm = [2, 0, 1]
    assert np.allclose(net(batch)[perm], net(batch[perm]), atol=1e-6)


def test_non_cubic_volume_rejected():
    vol = FeatureVolume(np.zeros((1, 4, 4, 5), np.float32), VoxelSpace((0, 0, 0), (4, 4, 5), (4, 4, 5)))
    with pytest.raises(ValueError, match="cubic"):
        plane_stack(vol)


def test_gt_plane_coords_are_voxel_indices():
    p = PoseSkeleton(np.stack([voxel_center(CUBE, (3, 40, 17)), voxel_center(CUBE, (63, 0, 5))]))
    g = gt_plane_coords(p, CUBE)
    assert g.shape == (3, 2, 2)
    assert np.allclose(g[:, 0], [(3, 40), (3, 17), (40, 17)])
    assert np.allclose(g[:, 1], [(63, 0), (63, 5), (0, 5)])


# -- losses -------------------------------------------------------------------

def test_loss_hm_examples(rng):
    gt = rng.random((3, 15, 2)) * 64
    assert loss_hm(gt, gt) == 0
    pred = gt.copy()
    pred[1, 4] += (1.0, -2.0)
    assert loss_hm(pred, gt) == pytest.approx(3.0)
    pred = rng.random((3, 15, 2)) * 64
    brute = sum(abs(pred[t, k, c] - gt[t, k, c]) for t in range(3) for k in range(15) for c in range(2))
    assert loss_hm(pred, gt) == pytest.approx(brute, rel=1e-12)


def test_loss_hm_ignores_invalid_joints(rng):
    gt = rng.random((3, 4, 2))
    pred = gt + 1.0
    valid = np.array([True, False, True, True])
    assert loss_hm(pred, gt, valid) == pytest.approx(3 * 3 * 2)


def test_loss_conf_examples(rng):
    gt = PoseSkeleton(rng.random((15, 3)) * 1000)
    assert loss_conf(gt.joints.copy(), gt) == 0
    j = gt.joints.copy()
    j[7] += (10.0, 0.0, 0.0)
    assert loss_conf(FusedPose(j, np.zeros((15, 3, 2))), gt) == pytest.approx(10.0)
    pred = rng.random((15, 3)) * 1000
    brute = sum(abs(pred[k, c] - gt.joints[k, c]) for k in range(15) for c in range(3))
    assert loss_conf(pred, gt) == pytest.approx(brute, rel=1e-12)


def test_loss_jln_weights():
    assert LAMBDA_CONF == 1.0
    assert loss_jln(2.0, 3.0) == 5.0 and loss_jln(0.0, 0.0) == 0.0
    assert loss_jln(1.0, 4.0) + loss_jln(2.0, 5.0) == loss_jln(3.0, 9.0)


# -- fusion -------------------------------------------------------------------

def test_fuse_equal_logits_average(rng):
    c = rng.random((3, 15, 2)) * 64
    f = fuse(c, np.zeros((3, 15)), CUBE)
    cs = CUBE.cell_size
    grid = (f.joints - np.asarray(CUBE.origin) - cs / 2) / cs
    assert np.allclose(grid[:, 0], (c[0, :, 0] + c[1, :, 0]) / 2)
    assert np.allclose(grid[:, 1], (c[0, :, 1] + c[2, :, 0]) / 2)
    assert np.allclose(grid[:, 2], (c[1, :, 1] + c[2, :, 1]) / 2)
    assert np.allclose(f.pair_weights, 0.5)


def test_fuse_dominant_logit_selects_plane(rng):
    c = rng.random((3, 15, 2)) * 64
    logits = np.zeros((3, 15))
    logits[0] = 20.0  # xy dominates x and y
    f = fuse(c, logits, CUBE)
    cs = CUBE.cell_size[0]
    x_sel = CUBE.origin[0] + c[0, :, 0] * cs + cs / 2
    assert np.all(1.0 - f.pair_weights[:, :2, 0] < 1e-8)
    # relative to the cube edge: the losing plane still carries e^-20 of its estimate
    assert np.abs(f.joints[:, 0] - x_sel).max() <= 1e-8 * CUBE.extent[0]


def test_fuse_routing():
    c = np.random.default_rng(0).random((3, 5, 2)) * 30
    logits = np.random.default_rng(1).normal(size=(3, 5))
    base = fuse(c, logits, CUBE).joints
    for plane, untouched_axis in ((2, 0), (1, 1), (0, 2)):
        d = c.copy()
        d[plane] += 7.0
        moved = fuse(d, logits, CUBE).joints
        assert np.array_equal(moved[:, untouched_axis], base[:, untouched_axis])


def test_fusion_weights_validation():
    with pytest.raises(ValueError, match="finite"):
        FusionWeights(np.array([[0.0], [np.nan], [0.0]]))
    with pytest.raises(ValueError, match=r"\(3, K\)"):
        FusionWeights(np.zeros((2, 4)))


def test_soft_argmax_fusion_path_gradients():
    """Heatmaps and logits -> soft-argmax -> pairwise fusion -> world joints."""
    r = np.random.default_rng(3)
    hm = r.random((3, 4, 6, 6)) + 0.05
    logits = r.normal(size=(3, 4))
    cube = cube_space((0, 0, 0), 600, 6)
    R = r.normal(size=(4, 3))

    def objective():
        return float((fuse(soft_argmax_2d(hm), logits, cube).joints * R).sum())

    coords = soft_argmax_2d(hm)
    dc, dl = fuse_backward(coords, logits, cube, R)
    dhm = soft_argmax_2d_backward(hm, dc)
    assert rel_error(dhm, numeric_grad(objective, hm, 1e-6)) < 1e-6
    assert rel_error(dl, numeric_grad(objective, logits, 1e-6)) < 1e-6


# -- end to end with the analytic stand-ins -------------------------------------

@pytest.fixture(scope="module")
def two_people():
    sc = SceneConfig(min_persons=2, max_persons=2, min_center_distance=2500)
    poses = place_poses(sc, frame_rng(21, 0), 2)
    cams = sc.cameras()
    return sc, poses, cams


def test_oracle_localization_accuracy(two_people):
    sc, poses, cams = two_people
    hms = render_heatmaps(poses[:1], cams, sc.sigma_px)
    box = gt_boxes(poses[:1])[0]
    fused = localize_person(hms, cams, box, AnalyticPoseNet(), ZeroConfidence(), space=sc.space)
    assert pose_error(fused.joints, poses[0]) < 16.0
    assert not fused.low_confidence.any()


def test_empty_volume_gives_flagged_center(two_people):
    sc, _, cams = two_people
    hms = [np.zeros((15, c.height, c.width), np.float32) for c in cams]
    box = Detection3D((0, 0), np.array([4000.0, 4000.0, 1000.0]), np.array([800.0, 800.0]), 1.0)
    fused = localize_person(hms, cams, box, AnalyticPoseNet(), ZeroConfidence(), fine_res=32)
    assert fused.low_confidence.all()
    assert np.allclose(fused.joints, (4000, 4000, 1000))


def test_box_outside_space_rejected(two_people):
    sc, _, cams = two_people
    box = Detection3D((0, 0), np.array([-100.0, 4000.0, 1000.0]), np.array([800.0, 800.0]), 1.0)
    with pytest.raises(ValueError, match="outside"):
        localize_person([], cams, box, AnalyticPoseNet(), ZeroConfidence(), space=sc.space)


def test_people_localized_independently():
    # near-overhead cameras: no ray through A's box also crosses B
    sc = SceneConfig(camera_count=3, ring_radius=1500, camera_height=12000, camera_target_height=0, focal_px=300)
    cams = sc.cameras()
    poses = [sample_pose(np.random.default_rng(1), (2500, 2500)), sample_pose(np.random.default_rng(2), (5500, 5500))]
    ghost = build_person_volume(render_heatmaps(poses[1:], cams, sc.sigma_px), cams, gt_boxes(poses[:1])[0], 32,
                                only_inside_box=True)
    assert ghost.data.max() == 0  # precondition: B adds nothing inside A's box
    together = render_heatmaps(poses, cams, sc.sigma_px)
    alone = render_heatmaps(poses[:1], cams, sc.sigma_px)
    box = gt_boxes(poses[:1])[0]
    a = localize_person(together, cams, box, AnalyticPoseNet(), ZeroConfidence(), fine_res=32)
    b = localize_person(alone, cams, box, AnalyticPoseNet(), ZeroConfidence(), fine_res=32)
    assert np.abs(a.joints - b.joints).max() <= 1e-6


# -- properties ---------------------------------------------------------------

@given(seeds, st.integers(-5, 5), st.integers(-5, 5))
def test_soft_argmax_translation_equivariant(seed, di, dj):
    r = np.random.default_rng(seed)
    hm = np.zeros((2, 24, 24))
    hm[:, 8:16, 8:16] = r.random((2, 8, 8))
    shifted = np.roll(hm, (di, dj), axis=(1, 2))
    assert np.allclose(soft_argmax_2d(shifted) - soft_argmax_2d(hm), (di, dj), atol=1e-6)


@given(seeds, st.floats(-30, 30))
def test_fusion_convex_pairs(seed, scale):
    r = np.random.default_rng(seed)
    c = r.random((3, 6, 2)) * 64
    logits = r.normal(size=(3, 6)) * scale
    f = fuse(c, logits, CUBE)
    assert np.allclose(f.pair_weights.sum(axis=2), 1.0)
    cs = CUBE.cell_size
    grid = (f.joints - np.asarray(CUBE.origin) - cs / 2) / cs
    pairs = {0: (c[0, :, 0], c[1, :, 0]), 1: (c[0, :, 1], c[2, :, 0]), 2: (c[1, :, 1], c[2, :, 1])}
    for axis, (a, b) in pairs.items():
        assert np.all(grid[:, axis] >= np.minimum(a, b) - 1e-9)
        assert np.all(grid[:, axis] <= np.maximum(a, b) + 1e-9)


@given(seeds, st.floats(-50, 50))
def test_fusion_constant_logits_is_mean(seed, c0):
    c = np.random.default_rng(seed).random((3, 5, 2)) * 64
    same = fuse(c, np.full((3, 5), c0), CUBE).joints
    zero = fuse(c, np.zeros((3, 5)), CUBE).joints
    assert np.allclose(same, zero, atol=1e-9)


@given(seeds, st.integers(1, 4))
def test_masking_isolation(seed, edge):
    """Content outside A's box never reaches A's pose."""
    r = np.random.default_rng(seed)
    cube = cube_space((0, 0, 1000), 1600, 16)
    box = Detection3D((0, 0), np.array([0.0, 0.0, 1000.0]), np.array([edge * 200.0, edge * 200.0]), 1.0)
    person_a = r.random((3, 16, 16, 16)).astype(np.float32)
    clutter = r.random((3, 16, 16, 16)).astype(np.float32)
    centers = cube.centers().reshape(16, 16, 16, 3)
    outside = (np.abs(centers[..., 0]) > edge * 100) | (np.abs(centers[..., 1]) > edge * 100)
    polluted = np.where(outside[None], clutter, person_a)
    a = localize_masked(FeatureVolume(person_a, cube), box, AnalyticPoseNet(), ZeroConfidence())
    b = localize_masked(FeatureVolume(polluted, cube), box, AnalyticPoseNet(), ZeroConfidence())
    assert np.abs(a.joints - b.joints).max() <= 1e-6
