"""Procedural proto-head world with exact labels, plus frozen oracle nets.

The world is a smooth signed-distance scene: a head ellipsoid with a jaw,
cheek bulges, and painted eye/brow/mouth regions whose geometry follows
an 8-dimensional motion vector.  Every motion dimension produces a
distinct visible change so a small regressor can recover all of them
from 32x32 renders.  Rendering is sphere tracing at 2x supersampling
with Lambertian shading; it shares no code with the learned generator.

Three small conv nets are pretrained offline on rendered frames and then
frozen: a regressor (motion, pose angles, lighting, albedo, texture,
shape), an identity encoder, and a background segmenter.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pngio
from .autodiff import Tensor, param
from .camera import CameraPose, PoseDistribution, ray_grid, sample_pose
from .config import RunConfig
from .optim import Adam
from .renderer import downsample_box
from .rng import Rng

MOTION_DIMS = 8

# geometry (world units; head centered at the origin, face toward +z)
HEAD_SEMI = np.array([0.22, 0.26, 0.21])
JAW_CENTER = np.array([0.0, -0.17, 0.06])
JAW_SEMI = np.array([0.13, 0.10, 0.11])
JAW_DROP_MAX = 0.07
JAW_YAW_MAX = 0.05
CHEEK_CENTER = np.array([0.175, -0.03, 0.10])
CHEEK_R_BASE, CHEEK_R_SPAN = 0.043, 0.022
EYE_X, EYE_Y, EYE_RX = 0.10, 0.06, 0.05
EYE_RY_MIN, EYE_RY_SPAN = 0.006, 0.034
BROW_Y, BROW_RAISE, BROW_TILT = 0.125, 0.045, 0.035
BROW_RX, BROW_RY = 0.055, 0.012
MOUTH_Y, MOUTH_RX_MIN, MOUTH_RX_SPAN = -0.155, 0.05, 0.055
MOUTH_RY_MIN, MOUTH_RY_SPAN = 0.006, 0.043
AMBIENT = 0.35

# per-identity attribute ranges (uniform)
SKIN_RANGE = (0.45, 0.95)
FEATURE_RANGE = (0.02, 0.35)
TEX_FREQ_RANGE = (4.0, 12.0)
TEX_AMP_RANGE = (0.0, 0.25)
TEX_PHASE_RANGE = (0.3, 2.8)
SHAPE_RANGE = (0.85, 1.15)
LIGHT_X_RANGE = (-0.8, 0.8)
LIGHT_Y_RANGE = (0.2, 1.0)
LIGHT_Z_RANGE = (0.4, 1.0)
LIGHT_INT_RANGE = (0.4, 1.0)
BG_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class SceneParams:
    shape: np.ndarray  # (4,) ellipsoid axis scales + jaw size
    albedo: np.ndarray  # (6,) skin RGB + feature RGB
    texture: np.ndarray  # (3,) stripe frequency, amplitude, phase
    lighting: np.ndarray  # (4,) unit direction + intensity
    motion: np.ndarray  # (MOTION_DIMS,) each in [-1, 1]
    identity: int
    background: np.ndarray  # (3,) gradient base color

    def validate(self):
        assert abs(np.linalg.norm(self.lighting[:3]) - 1.0) < 1e-9
        assert np.all(np.abs(self.motion) <= 1.0)
        return self


@dataclass
class SynthFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}; 1 marks background
    params: SceneParams
    pose: CameraPose


def sample_identity_attrs(rng: Rng) -> dict:
    """Motion-independent attributes, drawn once per identity."""
    ldir = np.array([
        rng.uniform(*LIGHT_X_RANGE),
        rng.uniform(*LIGHT_Y_RANGE),
        rng.uniform(*LIGHT_Z_RANGE),
    ])
    ldir /= np.linalg.norm(ldir)
    return {
        "shape": rng.uniform(*SHAPE_RANGE, (4,)),
        "albedo": np.concatenate([rng.uniform(*SKIN_RANGE, (3,)), rng.uniform(*FEATURE_RANGE, (3,))]),
        "texture": np.array([
            rng.uniform(*TEX_FREQ_RANGE),
            rng.uniform(*TEX_AMP_RANGE),
            rng.uniform(*TEX_PHASE_RANGE),
        ]),
        "lighting": np.concatenate([ldir, [rng.uniform(*LIGHT_INT_RANGE)]]),
        "background": rng.uniform(*BG_RANGE, (3,)),
    }


def sample_motion(rng: Rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (MOTION_DIMS,))


def sample_scene(rng: Rng, identity: int = 0, attrs: dict | None = None) -> SceneParams:
    """A frame's full parameter set; identity attributes are reused when
    given so frames of one identity differ only in motion."""
    attrs = attrs if attrs is not None else sample_identity_attrs(rng)
    return SceneParams(
        shape=attrs["shape"].copy(),
        albedo=attrs["albedo"].copy(),
        texture=attrs["texture"].copy(),
        lighting=attrs["lighting"].copy(),
        motion=sample_motion(rng),
        identity=identity,
        background=attrs["background"].copy(),
    ).validate()


# ---------------------------------------------------------------------------
# signed-distance scene
# ---------------------------------------------------------------------------

def _ellipsoid(p, center, semi):
    q = (p - center) / semi
    return (np.linalg.norm(q, axis=-1) - 1.0) * semi.min()


def _sphere(p, center, r):
    return np.linalg.norm(p - center, axis=-1) - r


def _smooth_union(d1, d2, k):
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 * (1.0 - h) + d1 * h - k * h * (1.0 - h)


def scene_sdf(p: np.ndarray, sp: SceneParams) -> np.ndarray:
    """Signed distance of points (..., 3) to the head surface."""
    m = sp.motion
    u_mouth = 0.5 * (m[0] + 1.0)
    d = _ellipsoid(p, np.zeros(3), HEAD_SEMI * sp.shape[:3])
    jaw_c = JAW_CENTER + np.array([JAW_YAW_MAX * m[4], -JAW_DROP_MAX * u_mouth, 0.0])
    d = _smooth_union(d, _ellipsoid(p, jaw_c, JAW_SEMI * sp.shape[3]), 0.05)
    cheek_r = CHEEK_R_BASE + CHEEK_R_SPAN * m[7]
    for sx in (1.0, -1.0):
        c = CHEEK_CENTER * np.array([sx, 1.0, 1.0])
        d = _smooth_union(d, _sphere(p, c, cheek_r), 0.03)
    return d


def _sdf_normal(p, sp, eps=5e-4):
    n = np.zeros_like(p)
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = eps
        n[..., axis] = scene_sdf(p + dp, sp) - scene_sdf(p - dp, sp)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def _ellipse_mask(x, y, cx, cy, rx, ry):
    q = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
    return np.clip((1.15 - q) / 0.3, 0.0, 1.0)


def _box_mask(x, y, cx, cy, rx, ry):
    q = np.maximum(np.abs(x - cx) / rx, np.abs(y - cy) / ry)
    return np.clip((1.1 - q) / 0.2, 0.0, 1.0)


def _paint_albedo(points: np.ndarray, sp: SceneParams) -> np.ndarray:
    """Skin with procedural stripes plus painted face features."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    m = sp.motion
    freq, amp, phase = sp.texture
    skin = sp.albedo[:3] * (1.0 + amp * np.sin(freq * y + phase))[..., None]
    skin = np.clip(skin, 0.0, 1.0)

    u_mouth, u_width = 0.5 * (m[0] + 1.0), 0.5 * (m[5] + 1.0)
    front = np.clip((z - 0.02) / 0.02, 0.0, 1.0)
    mask = np.zeros_like(x)
    for sx, eye_m in ((1.0, m[2]), (-1.0, m[1])):  # m[2] drives the +x eye
        ry = EYE_RY_MIN + EYE_RY_SPAN * 0.5 * (eye_m + 1.0)
        mask = np.maximum(mask, _ellipse_mask(x, y, sx * EYE_X, EYE_Y, EYE_RX, ry))
    for sx in (1.0, -1.0):
        by = BROW_Y + BROW_RAISE * m[3] - sx * BROW_TILT * m[6]
        mask = np.maximum(mask, _box_mask(x, y, sx * EYE_X, by, BROW_RX, BROW_RY))
    mouth_cy = MOUTH_Y - 0.5 * JAW_DROP_MAX * u_mouth
    mouth = _ellipse_mask(x, y, JAW_YAW_MAX * m[4], mouth_cy,
                          MOUTH_RX_MIN + MOUTH_RX_SPAN * u_width,
                          MOUTH_RY_MIN + MOUTH_RY_SPAN * u_mouth)
    mask = np.maximum(mask, mouth) * front
    return skin * (1.0 - mask[..., None]) + sp.albedo[3:6] * mask[..., None]


def _background_image(sp: SceneParams, height: int, width: int) -> np.ndarray:
    v = np.linspace(1.0, 0.0, height)[:, None, None]  # brighter at the top
    return np.clip(sp.background * (0.55 + 0.45 * v) * np.ones((height, width, 3)), 0.0, 1.0)


def render_scene(sp: SceneParams, pose: CameraPose, resolution: int,
                 supersample: int = 2, include_head: bool = True) -> SynthFrame:
    """Sphere-trace one frame; deterministic in all inputs.

    Renders at ``supersample`` x the target resolution and box-averages
    down, so sub-pixel feature motion shows up in pixel intensities.
    """
    side = resolution * supersample
    dirs = ray_grid(pose, side, side).reshape(-1, 3)
    origin = pose.origin()
    img_hi = _background_image(sp, side, side).reshape(-1, 3)
    hit = np.zeros(side * side, dtype=bool)

    if include_head:
        t = np.full(dirs.shape[0], pose.radius - 0.55)
        alive = np.ones(dirs.shape[0], dtype=bool)
        t_stop = pose.radius + 0.55
        for _ in range(64):
            p = origin[None, :] + t[alive, None] * dirs[alive]
            d = scene_sdf(p, sp)
            t[alive] += 0.9 * d
            converged = d < 5e-4
            idx = np.flatnonzero(alive)
            hit[idx[converged]] = True
            still = ~converged & (t[alive] < t_stop)
            alive[idx] = still
            if not alive.any():
                break
        if hit.any():
            ph = origin[None, :] + t[hit, None] * dirs[hit]
            n = _sdf_normal(ph, sp)
            albedo = _paint_albedo(ph, sp)
            lam = np.maximum(0.0, n @ sp.lighting[:3])
            shade = AMBIENT + sp.lighting[3] * lam
            img_hi[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)

    img_hi = img_hi.reshape(side, side, 3)
    cover = downsample_box(hit.reshape(side, side, 1).astype(np.float64), supersample)[..., 0]
    image = downsample_box(img_hi, supersample)
    mask = (cover < 0.5).astype(np.float64)  # 1 marks background
    return SynthFrame(image=image, mask=mask, params=sp, pose=pose)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def pose_distribution(cfg: RunConfig) -> PoseDistribution:
    return PoseDistribution(yaw_min=cfg.yaw_min, yaw_max=cfg.yaw_max,
                            pitch_min=cfg.pitch_min, pitch_max=cfg.pitch_max,
                            radius=cfg.radius, fov=cfg.fov,
                            t_near=cfg.t_near, t_far=cfg.t_far, mode="uniform")


def frame_for_slot(cfg: RunConfig, seed: int, identity: int, slot: int,
                   resolution: int | None = None) -> SynthFrame:
    """Deterministic frame for an (identity, slot) pair under one seed."""
    root = Rng(seed)
    attrs = sample_identity_attrs(root.split(f"id-{identity}"))
    frng = root.split(f"frame-{identity}-{slot}")
    sp = sample_scene(frng, identity=identity, attrs=attrs)
    pose = sample_pose(frng, pose_distribution(cfg))
    return render_scene(sp, pose, resolution or cfg.resolution)


def _record_for(frame: SynthFrame, image_rel: str, mask_rel: str) -> dict:
    sp, pose = frame.params, frame.pose
    return {
        "image": image_rel,
        "mask": mask_rel,
        "identity": sp.identity,
        "m": [float(v) for v in sp.motion],
        "pose": {"yaw": pose.yaw, "pitch": pose.pitch, "radius": pose.radius, "fov": pose.fov},
        "l": [float(v) for v in sp.lighting],
        "a": [float(v) for v in sp.albedo],
        "t": [float(v) for v in sp.texture],
        "s": [float(v) for v in sp.shape],
        "b": [float(v) for v in sp.background],
    }


def generate_dataset(cfg: RunConfig, out_dir, n_identities: int | None = None,
                     frames_per_identity: int | None = None, seed: int | None = None) -> Path:
    """Write PNG frames, masks, and a JSON-lines manifest; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_ids = n_identities or cfg.world_identities
    n_frames = frames_per_identity or cfg.frames_per_identity
    seed = cfg.seed if seed is None else seed
    records = []
    for ident in range(n_ids):
        for slot in range(n_frames):
            frame = frame_for_slot(cfg, seed, ident, slot)
            image_rel = f"images/i{ident:04d}_f{slot:02d}.png"
            mask_rel = f"masks/i{ident:04d}_f{slot:02d}.png"
            try:
                pngio.save_rgb(out / image_rel, frame.image)
                pngio.save_mask(out / mask_rel, frame.mask)
            except OSError as e:
                raise OSError(f"failed writing frame under {out}: {e}") from e
            records.append(_record_for(frame, image_rel, mask_rel))
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path) -> list[dict]:
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_dataset(manifest_path):
    """Manifest -> stacked arrays: images (N,3,H,W), masks (N,H,W), labels."""
    records = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    images, masks = [], []
    for rec in records:
        images.append(np.transpose(pngio.load_rgb(root / rec["image"]), (2, 0, 1)))
        masks.append((pngio.load_mask(root / rec["mask"]) > 0.5).astype(np.float64))
    labels = {
        "identity": np.array([r["identity"] for r in records], dtype=np.intp),
        "m": np.array([r["m"] for r in records]),
        "pose": np.array([[r["pose"]["yaw"], r["pose"]["pitch"]] for r in records]),
        "l": np.array([r["l"] for r in records]),
        "a": np.array([r["a"] for r in records]),
        "t": np.array([r["t"] for r in records]),
        "s": np.array([r["s"] for r in records]),
    }
    return np.stack(images), np.stack(masks), labels


# ---------------------------------------------------------------------------
# oracle networks
# ---------------------------------------------------------------------------

ATTR_SLICES = {"m": slice(0, 8), "pose": slice(8, 10), "l": slice(10, 14),
               "a": slice(14, 20), "t": slice(20, 23), "s": slice(23, 27)}
TARGET_DIM = 27


def _uniform_stats(lo, hi):
    return (lo + hi) / 2.0, (hi - lo) / np.sqrt(12.0)


def _target_norm(cfg: RunConfig):
    """Analytic mean/sd of each regression target under the world priors."""
    mu, sd = np.zeros(TARGET_DIM), np.ones(TARGET_DIM)
    mu[0:8], sd[0:8] = _uniform_stats(-1.0, 1.0)
    mu[8], sd[8] = _uniform_stats(cfg.yaw_min, cfg.yaw_max)
    mu[9], sd[9] = _uniform_stats(cfg.pitch_min, cfg.pitch_max)
    mu[10:13] = (0.0, 0.55, 0.65)  # normalized light direction, approximate
    sd[10:13] = 0.4
    mu[13], sd[13] = _uniform_stats(*LIGHT_INT_RANGE)
    mu[14:17], sd[14:17] = _uniform_stats(*SKIN_RANGE)
    mu[17:20], sd[17:20] = _uniform_stats(*FEATURE_RANGE)
    mu[20], sd[20] = _uniform_stats(*TEX_FREQ_RANGE)
    mu[21], sd[21] = _uniform_stats(*TEX_AMP_RANGE)
    mu[22], sd[22] = _uniform_stats(*TEX_PHASE_RANGE)
    mu[23:27], sd[23:27] = _uniform_stats(*SHAPE_RANGE)
    return mu, sd


def _trunk_init(rng: Rng, cfg: RunConfig) -> tuple[dict, int]:
    t = {}
    c_in, base = 3, cfg.oracle_channels
    for i in range(4):
        c_out = base * (2 ** i)
        t[f"c{i}.w"] = param(rng.normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9)))
        t[f"c{i}.b"] = param(np.zeros(c_out))
        c_in = c_out
    side = cfg.resolution // 16
    flat = c_in * side * side
    fc = base * 8
    t["fc.w"] = param(rng.normal((flat, fc)) * np.sqrt(2.0 / flat))
    t["fc.b"] = param(np.zeros(fc))
    return t, fc


def _trunk_forward(t: dict, images) -> Tensor:
    h = ad.tensor(images)
    for i in range(4):
        b = ad.reshape(t[f"c{i}.b"], (1, t[f"c{i}.b"].shape[0], 1, 1))
        h = ad.leaky_relu(ad.add(ad.conv2d(h, t[f"c{i}.w"], stride=2, pad=1), b), 0.2)
    return ad.leaky_relu(ad.add(ad.matmul(ad.reshape(h, (h.shape[0], -1)), t["fc.w"]), t["fc.b"]), 0.2)


@dataclass
class OracleNets:
    """Frozen regressor, identity encoder, and background segmenter."""

    cfg: RunConfig
    regressor: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    segmenter: dict = field(default_factory=dict)
    content_hash: str = ""

    @classmethod
    def init(cls, cfg: RunConfig, rng: Rng, n_classes: int) -> "OracleNets":
        o = cls(cfg=cfg)
        r, fc = _trunk_init(rng.split("oracle-R"), cfg)
        r["head.w"] = param(rng.normal((fc, TARGET_DIM)) / np.sqrt(fc))
        r["head.b"] = param(np.zeros(TARGET_DIM))
        o.regressor = r

        e, fc = _trunk_init(rng.split("oracle-E"), cfg)
        e["embed.w"] = param(rng.normal((fc, cfg.embed_dim)) / np.sqrt(fc))
        e["embed.b"] = param(np.zeros(cfg.embed_dim))
        e["cls.w"] = param(rng.normal((cfg.embed_dim, n_classes)) / np.sqrt(cfg.embed_dim))
        e["cls.b"] = param(np.zeros(n_classes))
        o.encoder = e

        s, c_in = {}, 3
        rs = rng.split("oracle-S")
        widths = [12, 12, 12, 1]
        for i, c_out in enumerate(widths):
            s[f"c{i}.w"] = param(rs.normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9)))
            s[f"c{i}.b"] = param(np.zeros(c_out))
            c_in = c_out
        o.segmenter = s
        return o

    def all_params(self):
        """Canonical (name, tensor) order used for serialization/hashing."""
        out = []
        for net_name, net in (("regressor", self.regressor), ("encoder", self.encoder),
                              ("segmenter", self.segmenter)):
            for key in sorted(net):
                out.append((f"{net_name}.{key}", net[key]))
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.all_params():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


ORACLE_MAGIC = b"CORFORC1"


def save_oracles(oracles: OracleNets, path) -> str:
    """Flat binary: magic, parameter count, then raw float64 values."""
    blobs = [t.data.reshape(-1) for _, t in oracles.all_params()]
    flat = np.concatenate(blobs) if blobs else np.zeros(0)
    payload = ORACLE_MAGIC + struct.pack("<Q", flat.size) + flat.tobytes()
    Path(path).write_bytes(payload)
    oracles.content_hash = hashlib.sha256(payload).hexdigest()
    return oracles.content_hash


def load_oracles(cfg: RunConfig, path, n_classes: int | None = None) -> OracleNets:
    raw = Path(path).read_bytes()
    if raw[:8] != ORACLE_MAGIC:
        raise ValueError(f"{path}: not an oracle checkpoint (bad magic)")
    (count,) = struct.unpack("<Q", raw[8:16])
    flat = np.frombuffer(raw[16:], dtype=np.float64)
    if flat.size != count:
        raise ValueError(f"{path}: truncated oracle checkpoint ({flat.size} != {count})")
    n_classes = n_classes if n_classes is not None else cfg.world_identities - cfg.holdout_identities
    oracles = OracleNets.init(cfg, Rng(0), n_classes)
    offset = 0
    for name, t in oracles.all_params():
        n = t.data.size
        if offset + n > flat.size:
            raise ValueError(f"{path}: parameter count does not match the configured architecture")
        t.data = flat[offset:offset + n].reshape(t.data.shape).copy()
        offset += n
    if offset != flat.size:
        raise ValueError(f"{path}: parameter count does not match the configured architecture")
    for _, t in oracles.all_params():
        t.requires_grad = False  # frozen; gradients still flow through to images
    oracles.content_hash = hashlib.sha256(raw).hexdigest()
    return oracles


# frozen-oracle forward passes -------------------------------------------------

def regress(oracles: OracleNets, images) -> dict:
    """Differentiable attribute prediction from images (B, 3, H, W).

    Returns denormalized tensors keyed m / pose / l / a / t / s; gradients
    flow to the images while the oracle weights stay fixed.
    """
    cfg = oracles.cfg
    images = ad.tensor(images)
    if images.shape[-1] != cfg.resolution:
        raise ad.ShapeError(f"regress: image side {images.shape[-1]} != oracle resolution {cfg.resolution}")
    feats = _trunk_forward(oracles.regressor, images)
    norm_out = ad.add(ad.matmul(feats, oracles.regressor["head.w"]), oracles.regressor["head.b"])
    mu, sd = _target_norm(cfg)
    raw = ad.add(ad.mul(norm_out, Tensor(sd)), Tensor(mu))
    return {key: ad.getitem(raw, (slice(None), sl)) for key, sl in ATTR_SLICES.items()}


def embed_id(oracles: OracleNets, images) -> Tensor:
    """L2-normalized identity embedding (B, embed_dim); differentiable."""
    cfg = oracles.cfg
    images = ad.tensor(images)
    if images.shape[-1] != cfg.resolution:
        raise ad.ShapeError(f"embed_id: image side {images.shape[-1]} != oracle resolution {cfg.resolution}")
    e = oracles.encoder
    emb = ad.add(ad.matmul(_trunk_forward(e, images), e["embed.w"]), e["embed.b"])
    norm = ad.sqrt(ad.add(ad.tsum(ad.mul(emb, emb), axis=1, keepdims=True), 1e-24))
    return ad.div(emb, norm)


def segment_bg(oracles: OracleNets, images) -> Tensor:
    """Per-pixel background probability (B, H, W)."""
    cfg = oracles.cfg
    images = ad.tensor(images)
    if images.shape[-1] != cfg.resolution:
        raise ad.ShapeError(f"segment_bg: image side {images.shape[-1]} != oracle resolution {cfg.resolution}")
    s = oracles.segmenter
    h = images
    for i in range(4):
        b = ad.reshape(s[f"c{i}.b"], (1, s[f"c{i}.b"].shape[0], 1, 1))
        h = ad.add(ad.conv2d(h, s[f"c{i}.w"], stride=1, pad=1), b)
        if i < 3:
            h = ad.leaky_relu(h, 0.2)
    prob = ad.sigmoid(h)
    return ad.reshape(prob, (prob.shape[0],) + prob.shape[2:])


# pretraining ------------------------------------------------------------------

def _softmax_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy; the rowwise max shift is a constant, which keeps
    the exponentials bounded without touching gradients."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = ad.sub(logits, shift)
    lse = ad.log(ad.tsum(ad.exp(z), axis=1))
    rows = np.arange(logits.shape[0])
    picked = ad.getitem(z, (rows, np.asarray(targets)))
    return ad.tmean(ad.sub(lse, picked))


def pretrain_oracles(cfg: RunConfig, images, masks, labels, rng: Rng,
                     progress=None):
    """Train R / E / segmenter on the rendered dataset, then freeze them.

    The last ``holdout_identities`` identities are excluded from all
    training and used for the returned held-out metrics.
    """
    n_train_ids = cfg.world_identities - cfg.holdout_identities
    if n_train_ids < 200:
        raise ValueError(f"encoder pretraining needs >= 200 training identities, got {n_train_ids}")
    train_sel = labels["identity"] < n_train_ids
    hold_sel = ~train_sel
    if not hold_sel.any():
        raise ValueError("no held-out identities for oracle evaluation")
    idx_train = np.flatnonzero(train_sel)

    targets = np.concatenate(
        [labels["m"], labels["pose"], labels["l"], labels["a"], labels["t"], labels["s"]], axis=1
    )
    mu, sd = _target_norm(cfg)
    targets_n = (targets - mu) / sd

    oracles = OracleNets.init(cfg, rng.split("oracle-init"), n_classes=n_train_ids)
    batch = cfg.oracle_batch
    r_draw = rng.split("oracle-R-batches")

    def batches(steps, drng):
        for k in range(steps):
            yield k, idx_train[drng.integers(0, idx_train.size, (min(batch, idx_train.size),))]

    opt = Adam(cfg.oracle_lr, 0.9, 0.999)
    for k, sel in batches(cfg.oracle_steps_regressor, r_draw):
        feats = _trunk_forward(oracles.regressor, images[sel])
        pred = ad.add(ad.matmul(feats, oracles.regressor["head.w"]), oracles.regressor["head.b"])
        loss = ad.tmean(ad.power(ad.sub(pred, Tensor(targets_n[sel])), 2.0))
        grads = ad.backward(loss, list(oracles.regressor.values()), free_graph=True)
        opt.step(dict(oracles.regressor), {k2: grads[v] for k2, v in oracles.regressor.items()})
        if progress and k % 200 == 0:
            progress(f"regressor step {k}: loss {loss.item():.4f}")

    opt = Adam(cfg.oracle_lr, 0.9, 0.999)
    e_draw = rng.split("oracle-E-batches")
    for k, sel in batches(cfg.oracle_steps_encoder, e_draw):
        e = oracles.encoder
        emb = ad.add(ad.matmul(_trunk_forward(e, images[sel]), e["embed.w"]), e["embed.b"])
        logits = ad.add(ad.matmul(emb, e["cls.w"]), e["cls.b"])
        loss = _softmax_ce(logits, labels["identity"][sel])
        grads = ad.backward(loss, list(e.values()), free_graph=True)
        opt.step(dict(e), {k2: grads[v] for k2, v in e.items()})
        if progress and k % 200 == 0:
            progress(f"encoder step {k}: loss {loss.item():.4f}")

    opt = Adam(cfg.oracle_lr, 0.9, 0.999)
    s_draw = rng.split("oracle-S-batches")
    seg_batch = max(8, batch // 4)
    for k in range(cfg.oracle_steps_segmenter):
        sel = idx_train[s_draw.integers(0, idx_train.size, (seg_batch,))]
        s = oracles.segmenter
        h = ad.tensor(images[sel])
        for i in range(4):
            b = ad.reshape(s[f"c{i}.b"], (1, s[f"c{i}.b"].shape[0], 1, 1))
            h = ad.add(ad.conv2d(h, s[f"c{i}.w"], stride=1, pad=1), b)
            if i < 3:
                h = ad.leaky_relu(h, 0.2)
        target = Tensor(masks[sel][:, None, :, :])
        # binary cross-entropy with logits: softplus(x) - t * x
        loss = ad.tmean(ad.sub(ad.softplus(h), ad.mul(target, h)))
        grads = ad.backward(loss, list(s.values()), free_graph=True)
        opt.step(dict(s), {k2: grads[v] for k2, v in s.items()})
        if progress and k % 100 == 0:
            progress(f"segmenter step {k}: loss {loss.item():.4f}")

    for _, t in oracles.all_params():
        t.requires_grad = False
    metrics = evaluate_oracles(oracles, images, masks, labels, hold_sel, rng.split("oracle-eval"))
    return oracles, metrics


def evaluate_oracles(oracles: OracleNets, images, masks, labels, hold_sel, rng: Rng) -> dict:
    """Held-out metrics: per-dim motion R^2, identity triplet accuracy,
    segmentation pixel accuracy."""
    hold_idx = np.flatnonzero(hold_sel)
    with ad.no_grad():
        preds = []
        for start in range(0, hold_idx.size, 256):
            sel = hold_idx[start:start + 256]
            preds.append(regress(oracles, images[sel])["m"].data)
        pred_m = np.concatenate(preds)
        true_m = labels["m"][hold_idx]
        sse = ((pred_m - true_m) ** 2).mean(axis=0)
        var = true_m.var(axis=0)
        r2 = 1.0 - sse / var

        embs = []
        for start in range(0, hold_idx.size, 256):
            sel = hold_idx[start:start + 256]
            embs.append(embed_id(oracles, images[sel]).data)
        emb = np.concatenate(embs)
        ids = labels["identity"][hold_idx]
        correct = total = 0
        for _ in range(2000):
            a = int(rng.integers(0, emb.shape[0]))
            same = np.flatnonzero((ids == ids[a]) & (np.arange(ids.size) != a))
            diff = np.flatnonzero(ids != ids[a])
            if same.size == 0 or diff.size == 0:
                continue
            p = int(same[rng.integers(0, same.size)])
            n = int(diff[rng.integers(0, diff.size)])
            correct += float(emb[a] @ emb[p] > emb[a] @ emb[n])
            total += 1

        accs = []
        for start in range(0, hold_idx.size, 64):
            sel = hold_idx[start:start + 64]
            prob = segment_bg(oracles, images[sel]).data
            accs.append(((prob > 0.5) == (masks[sel] > 0.5)).mean())
        seg_acc = float(np.mean(accs))

    return {
        "motion_r2": [float(v) for v in r2],
        "motion_r2_min": float(r2.min()),
        "triplet_accuracy": correct / max(total, 1),
        "segmenter_accuracy": seg_acc,
        "held_out_frames": int(hold_idx.size),
    }
