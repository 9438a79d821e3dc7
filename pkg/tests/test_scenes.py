import numpy as np
import pytest

from lacet import kernels
from lacet.scenes import Episode, EpisodeSpec, SyntheticScene, random_scene, render_gt, sample_episode
from lacet.sceneio import CameraPose, look_at_pose


def empty_scene(seed=0) -> SyntheticScene:
    z = np.zeros((0, 3))
    return SyntheticScene(c0=z, c1=z, c2=z, radii=np.zeros(0), albedos=z,
                          bg_bottom=np.array([0.1, 0.2, 0.3]),
                          bg_top=np.array([0.7, 0.8, 0.9]),
                          sky_axis=np.array([0.0, 0.0, 1.0]),
                          light=np.array([0.0, 0.0, 1.0]),
                          ambient=0.25, seed=seed)


def test_no_blobs_gives_pure_gradient():
    scene = empty_scene()
    pose = look_at_pose((3.0, 0.0, 0.5), (0, 0, 0), (16.0, 16.0, 8.0, 8.0))
    img = render_gt(scene, pose, 0.0, 16, 16)
    # every pixel is a convex combination of the two background colors
    for c in range(3):
        lo, hi = sorted([scene.bg_bottom[c], scene.bg_top[c]])
        assert img[..., c].min() >= lo - 1e-12
        assert img[..., c].max() <= hi + 1e-12
    # rows nearer the sky axis blend toward bg_top
    assert img[0, 8, 2] != img[15, 8, 2]


def test_blob_on_optical_axis_hits_center():
    scene = empty_scene()
    blob = SyntheticScene(
        c0=np.array([[0.0, 0.0, 0.9]]), c1=np.zeros((1, 3)), c2=np.zeros((1, 3)),
        radii=np.array([0.3]), albedos=np.array([[1.0, 0.0, 0.0]]),
        bg_bottom=scene.bg_bottom, bg_top=scene.bg_top, sky_axis=scene.sky_axis,
        light=np.array([0.0, 0.0, 1.0]), ambient=0.25, seed=0)
    # camera at origin looking along +z; odd resolution puts a pixel on the axis
    pose = CameraPose(np.eye(4), (9.0, 9.0, 4.5, 4.5))
    img = render_gt(blob, pose, 0.0, 9, 9)
    assert img[4, 4, 0] > 0.1 and img[4, 4, 1] == 0.0  # red blob hit
    assert img[0, 0, 1] > 0.0  # corner still background


def test_render_deterministic():
    scene = random_scene(3)
    pose = look_at_pose((2.5, 1.0, 1.0), (0, 0, 0), (32.0, 32.0, 16.0, 16.0))
    a = render_gt(scene, pose, 0.4, 32, 32)
    b = render_gt(scene, pose, 0.4, 32, 32)
    np.testing.assert_array_equal(a, b)


def test_render_rejects_bad_t():
    with pytest.raises(ValueError):
        render_gt(random_scene(0), look_at_pose((3, 0, 1), (0, 0, 0), (8.0, 8.0, 4.0, 4.0)),
                  1.5, 8, 8)


def test_pose_equivariance_under_rigid_transform():
    # a compact scene so any rotation plus a small shift stays in the box
    rng = np.random.default_rng(0)
    scene = SyntheticScene(
        c0=rng.uniform(-0.35, 0.35, size=(3, 3)),
        c1=rng.uniform(-0.1, 0.1, size=(3, 3)),
        c2=rng.uniform(-0.05, 0.05, size=(3, 3)),
        radii=rng.uniform(0.15, 0.3, size=3),
        albedos=rng.uniform(0.2, 1.0, size=(3, 3)),
        bg_bottom=np.array([0.1, 0.2, 0.3]), bg_top=np.array([0.7, 0.8, 0.9]),
        sky_axis=np.array([0.0, 0.0, 1.0]),
        light=np.array([0.3, 0.2, 0.933]) / np.linalg.norm([0.3, 0.2, 0.933]),
        ambient=0.25, seed=0)
    pose = look_at_pose((2.8, -0.5, 1.3), (0, 0, 0), (24.0, 24.0, 12.0, 12.0))
    base = render_gt(scene, pose, 0.3, 24, 24)

    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    shift = rng.uniform(-0.2, 0.2, size=3)

    moved = SyntheticScene(
        c0=scene.c0 @ q.T + shift, c1=scene.c1 @ q.T, c2=scene.c2 @ q.T,
        radii=scene.radii, albedos=scene.albedos,
        bg_bottom=scene.bg_bottom, bg_top=scene.bg_top,
        sky_axis=q @ scene.sky_axis, light=q @ scene.light,
        ambient=scene.ambient, seed=scene.seed)
    tf = np.eye(4)
    tf[:3, :3] = q
    tf[:3, 3] = shift
    moved_pose = CameraPose(tf @ pose.camera_to_world, pose.intrinsics)

    np.testing.assert_allclose(render_gt(moved, moved_pose, 0.3, 24, 24), base, atol=1e-10)


def test_scene_trajectory_bound_enforced():
    z = np.zeros((1, 3))
    with pytest.raises(ValueError):
        SyntheticScene(c0=np.array([[0.9, 0.0, 0.0]]), c1=np.array([[0.5, 0.0, 0.0]]),
                       c2=z, radii=np.array([0.1]), albedos=np.ones((1, 3)),
                       bg_bottom=np.zeros(3), bg_top=np.ones(3),
                       sky_axis=np.array([0.0, 0.0, 1.0]),
                       light=np.array([0.0, 0.0, 1.0]), ambient=0.2, seed=0)


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(window_len=10, n_input=8, n_target=8)
    with pytest.raises(ValueError):
        EpisodeSpec(total_frames=16, window_len=32)
    with pytest.raises(ValueError):
        EpisodeSpec(mode="dense")
    with pytest.raises(ValueError):
        EpisodeSpec(mode="continuous", window_len=32, n_input=8, n_target=8)
    EpisodeSpec(mode="continuous", window_len=16, n_input=8, n_target=8)


def test_sample_episode_disjoint_and_reproducible():
    scene = random_scene(1)
    spec = EpisodeSpec(total_frames=64, window_len=32, n_input=6, n_target=4)
    ep1 = sample_episode(scene, spec, 16, 16, np.random.default_rng(5))
    ep2 = sample_episode(scene, spec, 16, 16, np.random.default_rng(5))
    assert set(ep1.input_indices) & set(ep1.target_indices) == set()
    np.testing.assert_array_equal(ep1.input_indices, ep2.input_indices)
    np.testing.assert_array_equal(ep1.target_indices, ep2.target_indices)
    for a, b in zip(ep1.inputs, ep2.inputs):
        np.testing.assert_array_equal(a.image, b.image)
    assert len(ep1.inputs) == 6 and len(ep1.targets) == 4
    lo, hi = ep1.window_start, ep1.window_start + spec.window_len
    for idx in list(ep1.input_indices) + list(ep1.target_indices):
        assert lo <= idx < hi


def test_sample_episode_ablation_shapes():
    # the controlled study protocol: 128-frame window, 32-in / 32-target
    scene = random_scene(2)
    spec = EpisodeSpec(total_frames=136, window_len=128, n_input=32, n_target=32)
    ep = sample_episode(scene, spec, 8, 8, np.random.default_rng(0))
    assert len(ep.inputs) == 32 and len(ep.targets) == 32
    # the interpolation probe: contiguous 40 frames for 32-in / 8-out
    spec = EpisodeSpec(total_frames=136, window_len=40, n_input=32, n_target=8,
                       mode="continuous")
    ep = sample_episode(scene, spec, 8, 8, np.random.default_rng(0))
    joined = np.sort(np.concatenate([ep.input_indices, ep.target_indices]))
    np.testing.assert_array_equal(joined, np.arange(joined[0], joined[0] + 40))


def test_sparse_and_continuous_converge_on_full_span():
    # with the window covering the whole sequence and every frame used,
    # both modes draw the same family of splits
    scene = random_scene(3)
    n = 12
    sparse = EpisodeSpec(total_frames=n, window_len=n, n_input=8, n_target=4)
    cont = EpisodeSpec(total_frames=n, window_len=n, n_input=8, n_target=4,
                       mode="continuous")
    eps = sample_episode(scene, sparse, 8, 8, np.random.default_rng(9))
    epc = sample_episode(scene, cont, 8, 8, np.random.default_rng(9))
    full = set(range(n))
    assert set(eps.input_indices) | set(eps.target_indices) == full
    assert set(epc.input_indices) | set(epc.target_indices) == full


def test_timestamps_normalized_within_window():
    scene = random_scene(4)
    spec = EpisodeSpec(total_frames=64, window_len=16, n_input=4, n_target=4)
    ep = sample_episode(scene, spec, 8, 8, np.random.default_rng(11))
    for fb, idx in zip(ep.inputs, ep.input_indices):
        expect = (idx - ep.window_start) / (spec.window_len - 1)
        assert abs(fb.t - expect) < 1e-12


def test_kernel_backends_agree():
    if not kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    scene = random_scene(5)
    pose = look_at_pose((3.0, 1.0, 1.5), (0, 0, 0), (32.0, 32.0, 16.0, 16.0))
    args = (scene.blob_centers(0.6), scene.radii, scene.albedos,
            scene.bg_bottom, scene.bg_top, scene.sky_axis, scene.light,
            scene.ambient, pose.camera_to_world, 32.0, 32.0, 16.0, 16.0, 32, 32)
    a = kernels.render_frame(*args, backend="numpy")
    b = kernels.render_frame(*args, backend="numba")
    np.testing.assert_allclose(a, b, atol=1e-12)
