"""Look-at-origin spherical camera, pose sampling, and ray generation.

The camera sits on a sphere of configurable radius, always looking at the
world origin with +y as up.  Yaw 0 / pitch 0 places it on the +z axis, so
the head's face points toward +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    radius: float
    fov: float  # vertical field of view, radians

    def __post_init__(self):
        if not (-math.pi <= self.yaw <= math.pi):
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi]")
        if not (-math.pi / 4 <= self.pitch <= math.pi / 4):
            raise ValueError(f"pitch {self.pitch} outside [-pi/4, pi/4]")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0 < self.fov < math.pi):
            raise ValueError(f"fov {self.fov} outside (0, pi)")

    def origin(self) -> np.ndarray:
        cp = math.cos(self.pitch)
        return self.radius * np.array(
            [cp * math.sin(self.yaw), math.sin(self.pitch), cp * math.cos(self.yaw)]
        )

    def basis(self):
        """Right-handed (right, up, forward) frame looking at the origin."""
        o = self.origin()
        fwd = -o / np.linalg.norm(o)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, world_up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def as_condition(self) -> np.ndarray:
        """Angle-smooth 5-vector used to condition the discriminator."""
        return np.array(
            [math.sin(self.yaw), math.cos(self.yaw), math.sin(self.pitch), math.cos(self.pitch), self.fov]
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    t_near: float
    t_far: float

    def __post_init__(self):
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction norm {n} is not 1")
        if not (0 < self.t_near < self.t_far):
            raise ValueError(f"invalid depth range [{self.t_near}, {self.t_far}]")


@dataclass(frozen=True)
class SamplePoints:
    depths: np.ndarray  # (S,), strictly increasing within [t_near, t_far]
    positions: np.ndarray  # (S, 3)


@dataclass(frozen=True)
class PoseDistribution:
    """Uniform pose prior; ranges come from the run configuration."""

    yaw_min: float = -0.6
    yaw_max: float = 0.6
    pitch_min: float = -0.3
    pitch_max: float = 0.3
    radius: float = 2.7
    fov: float = 0.35
    t_near: float = 1.7
    t_far: float = 3.7
    mode: str = "uniform"  # or "dataset"

    def __post_init__(self):
        if self.yaw_min > self.yaw_max or self.pitch_min > self.pitch_max:
            raise ValueError("empty pose range")


def sample_pose(rng: Rng, dist: PoseDistribution, labels=None) -> CameraPose:
    """Draw a camera pose from the prior.

    In dataset-matched mode the pose is read off a uniformly chosen entry
    of ``labels`` (a sequence of CameraPose), mirroring conditioning on an
    annotated training frame.
    """
    if dist.mode == "dataset":
        if not labels:
            raise ValueError("dataset-matched pose sampling needs a label pool")
        return labels[int(rng.integers(0, len(labels)))]
    yaw = float(rng.uniform(dist.yaw_min, dist.yaw_max))
    pitch = float(rng.uniform(dist.pitch_min, dist.pitch_max))
    return CameraPose(yaw=yaw, pitch=pitch, radius=dist.radius, fov=dist.fov)


def ray_grid(pose: CameraPose, width: int, height: int) -> np.ndarray:
    """Unit direction per pixel center, shape (height, width, 3)."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    right, up, fwd = pose.basis()
    tan_half = math.tan(pose.fov / 2.0)
    aspect = width / height
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = 1.0 - (np.arange(height) + 0.5) / height * 2.0
    dirs = (
        fwd[None, None, :]
        + xs[None, :, None] * (tan_half * aspect) * right[None, None, :]
        + ys[:, None, None] * tan_half * up[None, None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def rays_for_image(pose: CameraPose, width: int, height: int, pixel_subset=None,
                   t_near: float = 1.7, t_far: float = 3.7) -> list[Ray]:
    """One ray per requested pixel, through the pixel center.

    ``pixel_subset`` is an optional list of flat row-major pixel indices;
    by default every pixel gets a ray (row-major order).
    """
    dirs = ray_grid(pose, width, height).reshape(-1, 3)
    o = pose.origin()
    if pixel_subset is None:
        pixel_subset = range(width * height)
    rays = []
    for idx in pixel_subset:
        if not (0 <= idx < width * height):
            raise IndexError(f"pixel index {idx} out of range for {width}x{height}")
        rays.append(Ray(origin=o, direction=dirs[idx], t_near=t_near, t_far=t_far))
    return rays


def stratified_samples(ray: Ray, count: int, rng: Rng | None = None, jitter: bool = False) -> SamplePoints:
    """Split [t_near, t_far] into equal bins and take one depth per bin."""
    depths = stratified_depths(ray.t_near, ray.t_far, count, rng=rng, jitter=jitter, n_rays=1)[0]
    positions = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
    return SamplePoints(depths=depths, positions=positions)


def stratified_depths(t_near, t_far, count: int, rng: Rng | None = None,
                      jitter: bool = False, n_rays: int | None = None) -> np.ndarray:
    """Vectorized bin-stratified depths, shape (n_rays, count).

    ``t_near`` / ``t_far`` may be scalars or per-ray arrays.
    """
    if count < 2:
        raise ValueError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if n_rays is None:
        n_rays = max(t_near.size, t_far.size)
    t_near = np.broadcast_to(t_near, (n_rays,))
    t_far = np.broadcast_to(t_far, (n_rays,))
    span = (t_far - t_near)[:, None]
    edges = np.arange(count, dtype=np.float64)[None, :] / count
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        # keep jittered depths strictly inside their bins so order is strict
        off = rng.uniform(0.0, 1.0, (n_rays, count)) * (1.0 - 1e-9) + 0.5e-9
    else:
        off = 0.5
    return t_near[:, None] + span * (edges + off / count)


# ----------------------------------------------------------------------
# bounded-volume helpers for the renderer
# ----------------------------------------------------------------------

def sphere_clip(origins: np.ndarray, dirs: np.ndarray, radius: float,
                t_near: float, t_far: float):
    """Per-ray depth range clipped to the chord through a centered sphere.

    Returns (near, far, hit): rays missing the sphere get hit=False and a
    degenerate range; callers composite those as pure background.
    """
    oc = origins if origins.ndim == 2 else np.broadcast_to(origins, dirs.shape)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.clip(-b - root, t_near, t_far)
    far = np.clip(-b + root, t_near, t_far)
    hit &= far > near
    return near, far, hit
