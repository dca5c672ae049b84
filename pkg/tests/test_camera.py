import math

import numpy as np
import pytest

from corf.camera import (
    CameraPose,
    PoseDistribution,
    Ray,
    ray_grid,
    rays_for_image,
    sample_pose,
    sphere_clip,
    stratified_depths,
    stratified_samples,
)
from corf.rng import Rng


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(yaw=0.0, pitch=1.0, radius=2.7, fov=0.35)
    with pytest.raises(ValueError):
        CameraPose(yaw=0.0, pitch=0.0, radius=-1.0, fov=0.35)
    with pytest.raises(ValueError):
        CameraPose(yaw=0.0, pitch=0.0, radius=2.7, fov=4.0)


def test_collapsed_ranges_give_fixed_pose():
    dist = PoseDistribution(yaw_min=0.2, yaw_max=0.2, pitch_min=-0.1, pitch_max=-0.1)
    rng = Rng(0)
    for _ in range(5):
        p = sample_pose(rng, dist)
        assert p.yaw == 0.2 and p.pitch == -0.1


def test_pose_sampling_statistics():
    dist = PoseDistribution(yaw_min=-0.5, yaw_max=0.5)
    rng = Rng(1)
    yaws = np.array([sample_pose(rng, dist).yaw for _ in range(100_000)])
    # uniform on [-0.5, 0.5]: mean 0, sd of the mean = (1/sqrt(12)) / sqrt(n)
    three_sigma = 3.0 / math.sqrt(12.0) / math.sqrt(yaws.size)
    assert abs(yaws.mean()) < three_sigma
    assert yaws.min() >= -0.5 and yaws.max() <= 0.5


def test_pose_sampling_deterministic():
    dist = PoseDistribution()
    seq1 = [(p.yaw, p.pitch) for p in (sample_pose(Rng(9).split(i), dist) for i in range(6))]
    seq2 = [(p.yaw, p.pitch) for p in (sample_pose(Rng(9).split(i), dist) for i in range(6))]
    assert seq1 == seq2


def test_pose_sampling_respects_support():
    dist = PoseDistribution(yaw_min=-0.6, yaw_max=0.6, pitch_min=-0.3, pitch_max=0.3)
    rng = Rng(5)
    n = 1_000_000
    yaws = rng.uniform(dist.yaw_min, dist.yaw_max, n)  # same draw path as sample_pose
    assert yaws.min() >= dist.yaw_min and yaws.max() <= dist.yaw_max


def test_dataset_matched_mode():
    dist = PoseDistribution(mode="dataset")
    pool = [CameraPose(0.1, 0.0, 2.7, 0.35), CameraPose(-0.2, 0.1, 2.7, 0.35)]
    rng = Rng(2)
    picks = {sample_pose(rng, dist, labels=pool).yaw for _ in range(50)}
    assert picks == {0.1, -0.2}
    with pytest.raises(ValueError):
        sample_pose(rng, dist)


def test_single_pixel_ray_is_optical_axis():
    pose = CameraPose(yaw=0.3, pitch=-0.1, radius=2.7, fov=0.35)
    rays = rays_for_image(pose, 1, 1)
    assert len(rays) == 1
    o = pose.origin()
    expected = -o / np.linalg.norm(o)  # looking at the origin
    assert np.allclose(rays[0].direction, expected, atol=1e-12)


def test_ray_directions_unit_norm_and_in_frustum():
    pose = CameraPose(yaw=-0.4, pitch=0.2, radius=2.7, fov=0.35)
    dirs = ray_grid(pose, 16, 16).reshape(-1, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-9)
    _, _, fwd = pose.basis()
    # every ray lies inside the cone spanned by the image corners
    corner = math.atan(math.tan(pose.fov / 2) * math.sqrt(2.0))
    angles = np.arccos(np.clip(dirs @ fwd, -1, 1))
    assert angles.max() <= corner + 1e-9


def test_halving_fov_halves_corner_spread():
    pose_wide = CameraPose(0.0, 0.0, 2.7, 0.2)
    pose_narrow = CameraPose(0.0, 0.0, 2.7, 0.1)

    def corner_angle(pose):
        d = ray_grid(pose, 2, 2).reshape(-1, 3)
        _, _, fwd = pose.basis()
        return np.arccos(np.clip(d @ fwd, -1, 1)).max()

    ratio = corner_angle(pose_wide) / corner_angle(pose_narrow)
    assert abs(ratio - 2.0) < 0.02  # small-angle regime


def test_doubling_resolution_refines_same_frustum():
    pose = CameraPose(0.1, 0.05, 2.7, 0.35)
    lo = ray_grid(pose, 8, 8).reshape(-1, 3)
    hi = ray_grid(pose, 16, 16).reshape(-1, 3)

    def max_gap(dirs):
        grid = dirs.reshape(int(math.sqrt(len(dirs))), -1, 3)
        d = np.arccos(np.clip((grid[:, 1:] * grid[:, :-1]).sum(-1), -1, 1))
        return d.max()

    # finer sampling of the same frustum: gaps halve, bounds match
    assert abs(max_gap(hi) / max_gap(lo) - 0.5) < 0.02
    _, _, fwd = pose.basis()
    a_lo = np.arccos(np.clip(lo @ fwd, -1, 1)).max()
    a_hi = np.arccos(np.clip(hi @ fwd, -1, 1)).max()
    assert a_hi > a_lo  # corner pixels move outward but stay inside the cone
    corner = math.atan(math.tan(pose.fov / 2) * math.sqrt(2.0))
    assert a_hi <= corner


def test_pixel_subset_and_out_of_range():
    pose = CameraPose(0.0, 0.0, 2.7, 0.35)
    rays = rays_for_image(pose, 4, 4, pixel_subset=[0, 5, 15])
    assert len(rays) == 3
    with pytest.raises(IndexError):
        rays_for_image(pose, 4, 4, pixel_subset=[16])


def test_stratified_bin_centers():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
    sp = stratified_samples(ray, 2)
    assert np.allclose(sp.depths, [1.5, 2.5])
    assert np.allclose(sp.positions[:, 2], [1.5, 2.5])


def test_stratified_jitter_stays_in_bins():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
    rng = Rng(3)
    for _ in range(20):
        sp = stratified_samples(ray, 8, rng=rng, jitter=True)
        edges = np.linspace(1.0, 3.0, 9)
        assert np.all(sp.depths >= edges[:-1]) and np.all(sp.depths < edges[1:])
        assert np.all(np.diff(sp.depths) > 0)


def test_stratified_requires_two_samples():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
    with pytest.raises(ValueError):
        stratified_samples(ray, 1)


def test_quadrupling_samples_shrinks_gaps():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
    gap = lambda n: np.diff(stratified_samples(ray, n).depths).max()
    assert abs(gap(8) / gap(32) - 4.0) < 1e-9


def test_stratified_depths_vectorized_matches_scalar():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.2, 3.4)
    batch = stratified_depths(np.full(5, 1.2), np.full(5, 3.4), 6)
    single = stratified_samples(ray, 6).depths
    assert np.allclose(batch, single[None, :])


def test_sphere_clip():
    origins = np.array([[0.0, 0.0, 2.7]])
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    near, far, hit = sphere_clip(origins, dirs, radius=0.5, t_near=1.7, t_far=3.7)
    assert hit[0] and not hit[1]
    assert abs(near[0] - 2.2) < 1e-12 and abs(far[0] - 3.2) < 1e-12
