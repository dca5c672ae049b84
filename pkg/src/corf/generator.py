"""Style-based radiance field generator with layered latent motion control.

The generator has three parts: a style mapping from noise, a motion
mapping that embeds the low-dimensional motion vector into one latent per
synthesis layer, and a synthesis field whose dense layers are weight-
modulated (with demodulation) by the per-layer latent ``w + d_i``.
Density comes off the trunk before view directions are injected, so it
cannot depend on the viewing direction by construction.

Rendering batches every latent set that shares camera geometry through
one trunk pass; a training pair (same z and pose, two motions) is the
common case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, param
from .camera import CameraPose, ray_grid, sphere_clip, stratified_depths
from .config import RunConfig
from .renderer import composite, rgb_from_feature
from .rng import Rng


def positional_encoding(x: np.ndarray, octaves: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < octaves, along the last axis."""
    scales = (2.0 ** np.arange(octaves)) * np.pi
    ang = x[..., None, :] * scales[:, None]  # (..., octaves, 3)
    lead = x.shape[:-1]
    return np.concatenate(
        [x, np.sin(ang).reshape(lead + (-1,)), np.cos(ang).reshape(lead + (-1,))], axis=-1
    )


def encoding_dim(octaves: int) -> int:
    return 3 * (1 + 2 * octaves)


def _he(rng: Rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class GeneratorParams:
    """All trainable generator tensors, keyed for the optimizer."""

    cfg: RunConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: RunConfig, rng: Rng) -> "GeneratorParams":
        p = cls(cfg=cfg)
        t = p.tensors
        dw, dm = cfg.dim_w, cfg.dim_m
        dz = cfg.dim_z + (dm if cfg.conditioning_mode == "input_concat" else 0)
        r = rng.split("gen-init")

        # style mapping: two hidden relu layers, linear output
        dims = [dz, dw, dw, dw]
        for i in range(3):
            t[f"fz.w{i}"] = param(_he(r, dims[i], (dims[i], dims[i + 1])))
            t[f"fz.b{i}"] = param(np.zeros(dims[i + 1]))

        # motion mapping: relu MLP whose zero head makes step 0 unconditional
        mdims = [dm, dw, dw, cfg.n_layers * dw]
        for i in range(3):
            w0 = np.zeros((mdims[i], mdims[i + 1])) if i == 2 else _he(r, mdims[i], (mdims[i], mdims[i + 1]))
            t[f"fm.w{i}"] = param(w0)
            t[f"fm.b{i}"] = param(np.zeros(mdims[i + 1]))

        # synthesis trunk: modulated dense layers
        c_in = encoding_dim(cfg.octaves_x)
        for i in range(cfg.n_layers):
            c_out = cfg.hidden_width
            t[f"syn.w{i}"] = param(r.normal((c_in, c_out)) / np.sqrt(c_in))
            t[f"syn.b{i}"] = param(np.zeros(c_out))
            t[f"aff.w{i}"] = param(r.normal((dw, c_in)) / np.sqrt(dw))
            t[f"aff.b{i}"] = param(np.zeros(c_in))
            c_in = c_out

        h = cfg.hidden_width
        t["sigma.w"] = param(r.normal((h, 1)) / np.sqrt(h))
        t["sigma.b"] = param(np.zeros(1))
        fdim_in = h + encoding_dim(cfg.octaves_d)
        t["feat.w"] = param(r.normal((fdim_in, cfg.feature_dim)) / np.sqrt(fdim_in))
        t["feat.b"] = param(np.zeros(cfg.feature_dim))
        t["rgb.w"] = param(r.normal((cfg.feature_dim, 3)) / np.sqrt(cfg.feature_dim))
        t["rgb.b"] = param(np.zeros(3))
        t["bg.w"] = param(r.normal((dw, 3)) / np.sqrt(dw))
        t["bg.b"] = param(np.zeros(3))
        return p

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]


def map_style(params: GeneratorParams, z) -> Tensor:
    """Noise (B, dz) -> style vectors (B, dw)."""
    t = params.tensors
    h = ad.tensor(np.atleast_2d(z))
    expected = t["fz.w0"].shape[0]
    if h.shape[1] != expected:
        raise ad.ShapeError(f"map_style: input dim {h.shape[1]} != {expected}")
    for i in range(3):
        h = ad.add(ad.matmul(h, t[f"fz.w{i}"]), t[f"fz.b{i}"])
        if i < 2:
            h = ad.relu(h)
    return h


def map_motion(params: GeneratorParams, m) -> Tensor:
    """Motion (B, dm) -> layered latents (B, n_layers, dw)."""
    t = params.tensors
    cfg = params.cfg
    h = ad.tensor(np.atleast_2d(m))
    if h.shape[1] != cfg.dim_m:
        raise ad.ShapeError(f"map_motion: input dim {h.shape[1]} != {cfg.dim_m}")
    for i in range(3):
        h = ad.add(ad.matmul(h, t[f"fm.w{i}"]), t[f"fm.b{i}"])
        if i < 2:
            h = ad.relu(h)
    return ad.reshape(h, (h.shape[0], cfg.n_layers, cfg.dim_w))


def condition_layers(w: Tensor, dm: Tensor) -> Tensor:
    """Per-layer latents (B, N, dw): layer i receives exactly w + d_i."""
    if w.shape[-1] != dm.shape[-1]:
        raise ad.ShapeError(f"condition_layers: dim mismatch {w.shape} vs {dm.shape}")
    return ad.add(ad.reshape(w, (w.shape[0], 1, w.shape[1])), dm)


def _modulated_weight(params: GeneratorParams, layer: int, latents: Tensor) -> Tensor:
    """Demodulated weights (B, c_in, c_out) for per-member latents (B, dw)."""
    t = params.tensors
    scale = ad.add(ad.add(ad.matmul(latents, t[f"aff.w{layer}"]), t[f"aff.b{layer}"]), 1.0)
    w = ad.mul(t[f"syn.w{layer}"], ad.reshape(scale, (scale.shape[0], scale.shape[1], 1)))
    denom = ad.sqrt(ad.add(ad.tsum(ad.mul(w, w), axis=1, keepdims=True), 1e-8))
    return ad.div(w, denom)


def _trunk(params: GeneratorParams, enc_x: Tensor, latents: Tensor) -> Tensor:
    """Modulated dense stack: shared (M, enc) positions, (B, N, dw) latents
    -> activations (B, M, hidden)."""
    cfg = params.cfg
    if latents.shape[1] != cfg.n_layers:
        raise ad.ShapeError(f"field_eval: {latents.shape[1]} latents for {cfg.n_layers} layers")
    t = params.tensors
    h = enc_x
    for i in range(cfg.n_layers):
        wmod = _modulated_weight(params, i, ad.getitem(latents, (slice(None), i)))
        h = ad.dense_lrelu(h, wmod, t[f"syn.b{i}"], 0.2)
    return h


def field_eval(params: GeneratorParams, positions, directions, latents):
    """Density and feature at sample points for one set of layer latents.

    positions (M, 3), directions (M, 3); latents (n_layers, dw) from
    condition_layers.  Returns (sigma (M,), feature (M, feature_dim)).
    Density is read off the trunk before directions enter, so it cannot
    depend on the view direction.
    """
    cfg = params.cfg
    t = params.tensors
    latents = ad.tensor(latents)
    if latents.ndim == 2:
        latents = ad.reshape(latents, (1,) + latents.shape)
    enc_x = Tensor(positional_encoding(np.asarray(positions, dtype=np.float64), cfg.octaves_x))
    h = ad.getitem(_trunk(params, enc_x, latents), (0,))
    sigma = ad.softplus(ad.add(ad.matmul(h, t["sigma.w"]), t["sigma.b"]))
    enc_d = Tensor(positional_encoding(np.asarray(directions, dtype=np.float64), cfg.octaves_d))
    hw = cfg.hidden_width
    w_h = ad.getitem(t["feat.w"], (slice(0, hw),))
    w_d = ad.getitem(t["feat.w"], (slice(hw, None),))
    feat = ad.add(ad.add(ad.matmul(h, w_h), ad.matmul(enc_d, w_d)), t["feat.b"])
    return ad.reshape(sigma, (sigma.shape[0],)), feat


def background_color(params: GeneratorParams, w: Tensor) -> Tensor:
    """Per-style background RGB in [0,1]; a fixed mid-gray when disabled."""
    if not params.cfg.background_head:
        return Tensor(np.full((w.shape[0], 3), 0.5))
    t = params.tensors
    return ad.sigmoid(ad.add(ad.matmul(w, t["bg.w"]), t["bg.b"]))


@dataclass
class RenderGeometry:
    """Pose- and sampling-dependent constants shared by a render batch."""

    n_rays: int
    resolution: int
    samples: int
    hit_idx: np.ndarray
    miss_idx: np.ndarray
    depths: np.ndarray  # (n_hit, samples)
    far_hit: np.ndarray
    enc_x: Tensor  # (n_hit * samples, enc_x_dim)
    enc_d: Tensor  # (n_hit, enc_d_dim)
    grid: bool


def prepare_geometry(cfg: RunConfig, pose: CameraPose, resolution: int, samples: int,
                     rng: Rng | None = None, jitter: bool = False,
                     pixel_subset=None) -> RenderGeometry:
    """Rays, bounding-sphere clipping, sample depths, and encodings."""
    dirs = ray_grid(pose, resolution, resolution).reshape(-1, 3)
    if pixel_subset is not None:
        dirs = dirs[np.asarray(pixel_subset, dtype=np.intp)]
    n_rays = dirs.shape[0]
    origin = pose.origin()
    near, far, hit = sphere_clip(origin[None, :], dirs, cfg.bound_radius, cfg.t_near, cfg.t_far)
    hit_idx = np.flatnonzero(hit)
    miss_idx = np.flatnonzero(~hit)
    if hit_idx.size:
        depths = stratified_depths(near[hit_idx], far[hit_idx], samples, rng=rng, jitter=jitter)
        pos = origin[None, None, :] + depths[:, :, None] * dirs[hit_idx][:, None, :]
        enc_x = Tensor(positional_encoding(pos.reshape(-1, 3), cfg.octaves_x))
        enc_d = Tensor(positional_encoding(dirs[hit_idx], cfg.octaves_d))
        far_hit = far[hit_idx]
    else:
        depths = np.zeros((0, samples))
        far_hit = np.zeros(0)
        enc_x = Tensor(np.zeros((0, encoding_dim(cfg.octaves_x))))
        enc_d = Tensor(np.zeros((0, encoding_dim(cfg.octaves_d))))
    return RenderGeometry(n_rays=n_rays, resolution=resolution, samples=samples,
                          hit_idx=hit_idx, miss_idx=miss_idx, depths=depths,
                          far_hit=far_hit, enc_x=enc_x, enc_d=enc_d,
                          grid=pixel_subset is None)


def latents_for(params: GeneratorParams, z, m):
    """Style vectors and per-layer latents for stacked (z, m) rows, honoring
    the configured conditioning mode.  Returns (w (B, dw), lat (B, N, dw))."""
    cfg = params.cfg
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if cfg.conditioning_mode == "input_concat":
        w = map_style(params, np.concatenate([z, m], axis=1))
        lat = ad.broadcast_to(ad.reshape(w, (w.shape[0], 1, cfg.dim_w)),
                              (w.shape[0], cfg.n_layers, cfg.dim_w))
    else:
        w = map_style(params, z)
        lat = condition_layers(w, map_motion(params, m))
    return w, lat


def render_with_latents(params: GeneratorParams, geom: RenderGeometry, w: Tensor,
                        latents: Tensor) -> list[Tensor]:
    """Render one image per latent row over shared camera geometry."""
    cfg = params.cfg
    t = params.tensors
    n_mem = latents.shape[0]
    bg = background_color(params, w)  # (n_mem, 3)
    fg_rows = None
    if geom.hit_idx.size:
        nh, s, fd = geom.hit_idx.size, geom.samples, cfg.feature_dim
        h = _trunk(params, geom.enc_x, latents)  # (n_mem, M, hidden)
        sigma = ad.softplus(ad.add(ad.matmul(h, t["sigma.w"]), t["sigma.b"]))
        hw = cfg.hidden_width
        # directions are constant per ray: project once per ray, then
        # spread the contribution across that ray's samples
        dir_feat = ad.add(ad.matmul(geom.enc_d, ad.getitem(t["feat.w"], (slice(hw, None),))),
                          t["feat.b"])
        dir_rep = ad.reshape(
            ad.broadcast_to(ad.reshape(dir_feat, (1, nh, 1, fd)), (n_mem, nh, s, fd)),
            (n_mem * nh, s, fd),
        )
        feat = ad.add(ad.reshape(ad.matmul(h, ad.getitem(t["feat.w"], (slice(0, hw),))),
                                 (n_mem * nh, s, fd)), dir_rep)
        res = composite(ad.reshape(sigma, (n_mem * nh, s)), feat,
                        np.tile(geom.depths, (n_mem, 1)), np.tile(geom.far_hit, n_mem))
        bg_rows = ad.reshape(ad.broadcast_to(ad.reshape(bg, (n_mem, 1, 3)), (n_mem, nh, 3)),
                             (n_mem * nh, 3))
        pix = rgb_from_feature(res.f_r, res.t_final, t["rgb.w"], t["rgb.b"], bg_rows)
        fg_rows = ad.reshape(pix, (n_mem, nh, 3))
    images = []
    for k in range(n_mem):
        pieces = []
        if geom.hit_idx.size:
            pieces.append(ad.scatter_rows(ad.getitem(fg_rows, (k,)), geom.hit_idx, geom.n_rays))
        if geom.miss_idx.size:
            bg_k = ad.reshape(ad.getitem(bg, (k,)), (1, 3))
            pieces.append(ad.scatter_rows(ad.broadcast_to(bg_k, (geom.miss_idx.size, 3)),
                                          geom.miss_idx, geom.n_rays))
        flat = pieces[0] if len(pieces) == 1 else ad.add(pieces[0], pieces[1])
        images.append(ad.reshape(flat, (geom.resolution, geom.resolution, 3)) if geom.grid else flat)
    return images


def generator_forward(params: GeneratorParams, z, m, pose: CameraPose, resolution: int,
                      rng: Rng | None = None, samples: int | None = None,
                      jitter: bool = False, pixel_subset=None) -> Tensor:
    """Render one RGB image (H, W, 3) in [0,1] for a (z, m, pose) triple.

    The ray span is clipped to the configured bounding sphere; rays that
    miss it show the background color directly.  With ``pixel_subset``
    the result is (len(subset), 3) rows instead of a full grid.
    """
    cfg = params.cfg
    s = samples or cfg.samples_eval
    geom = prepare_geometry(cfg, pose, resolution, s, rng=rng, jitter=jitter,
                            pixel_subset=pixel_subset)
    w, lat = latents_for(params, z, m)
    return render_with_latents(params, geom, w, lat)[0]


def generator_forward_pair(params: GeneratorParams, z, m1, m2, pose: CameraPose,
                           resolution: int, rng: Rng | None = None,
                           samples: int | None = None, jitter: bool = False):
    """Render the two images of a training pair: same z and pose, two motions.

    Both members share the ray geometry, sample depths, and one batched
    trunk pass, so motion is the only varying factor between them.
    """
    cfg = params.cfg
    s = samples or cfg.samples_train
    geom = prepare_geometry(cfg, pose, resolution, s, rng=rng, jitter=jitter)
    z2 = np.tile(np.asarray(z, dtype=np.float64).reshape(1, -1), (2, 1))
    m12 = np.stack([np.asarray(m1, dtype=np.float64).reshape(-1),
                    np.asarray(m2, dtype=np.float64).reshape(-1)])
    w, lat = latents_for(params, z2, m12)
    img1, img2 = render_with_latents(params, geom, w, lat)
    return img1, img2
