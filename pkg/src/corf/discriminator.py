"""Pose- and motion-conditioned convolutional discriminator.

Conditioning is projection-style: the score is an unconditional branch
plus the inner product of an embedded (pose, motion) vector with the
image features.  The adversarial objective is the non-saturating softplus
form with an input-gradient regularizer on real samples, computed by
differentiating through the discriminator's own backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, param
from .camera import CameraPose
from .config import RunConfig
from .rng import Rng

N_BLOCKS = 4
COND_POSE_DIM = 5  # sin/cos yaw, sin/cos pitch, fov


@dataclass
class DiscriminatorParams:
    cfg: RunConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: RunConfig, rng: Rng) -> "DiscriminatorParams":
        if cfg.resolution % (2 ** N_BLOCKS):
            raise ValueError(f"discriminator needs resolution divisible by {2 ** N_BLOCKS}")
        p = cls(cfg=cfg)
        t = p.tensors
        r = rng.split("disc-init")
        c_in, base = 3, cfg.disc_channels
        for i in range(N_BLOCKS):
            c_out = base * (2 ** i)
            t[f"conv{i}.w"] = param(r.normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9)))
            t[f"conv{i}.b"] = param(np.zeros(c_out))
            c_in = c_out
        side = cfg.resolution // (2 ** N_BLOCKS)
        flat = c_in * side * side
        fc = base * 8
        t["fc.w"] = param(r.normal((flat, fc)) * np.sqrt(2.0 / flat))
        t["fc.b"] = param(np.zeros(fc))
        t["score.w"] = param(r.normal((fc, 1)) / np.sqrt(fc))
        t["score.b"] = param(np.zeros(1))
        t["embed.w"] = param(r.normal((COND_POSE_DIM + cfg.dim_m, fc)) / np.sqrt(fc))
        t["embed.b"] = param(np.zeros(fc))
        return p

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]


def condition_vector(pose: CameraPose, m) -> np.ndarray:
    return np.concatenate([pose.as_condition(), np.asarray(m, dtype=np.float64)])


def disc_forward(params: DiscriminatorParams, images, conditions) -> Tensor:
    """Scores (B,) for images (B, 3, H, W) under (B, 5 + dim_m) conditions."""
    cfg = params.cfg
    t = params.tensors
    images = ad.tensor(images)
    if images.shape[2] != cfg.resolution or images.shape[3] != cfg.resolution:
        raise ad.ShapeError(
            f"disc_forward: image {images.shape} does not match training resolution {cfg.resolution}"
        )
    h = images
    for i in range(N_BLOCKS):
        b = ad.reshape(t[f"conv{i}.b"], (1, t[f"conv{i}.b"].shape[0], 1, 1))
        h = ad.leaky_relu(ad.add(ad.conv2d(h, t[f"conv{i}.w"], stride=2, pad=1), b), 0.2)
    feats = ad.leaky_relu(ad.add(ad.matmul(ad.reshape(h, (h.shape[0], -1)), t["fc.w"]), t["fc.b"]), 0.2)
    uncond = ad.add(ad.matmul(feats, t["score.w"]), t["score.b"])
    cond = ad.tensor(np.atleast_2d(conditions))
    proj = ad.tsum(ad.mul(ad.add(ad.matmul(cond, t["embed.w"]), t["embed.b"]), feats),
                   axis=1, keepdims=True)
    score = ad.add(uncond, proj)
    return ad.reshape(score, (score.shape[0],))


def adv_loss_g(params: DiscriminatorParams, fake_images, fake_conditions) -> Tensor:
    """Non-saturating generator objective: mean softplus(-D(fake))."""
    scores = disc_forward(params, fake_images, fake_conditions)
    return ad.tmean(ad.softplus(ad.neg(scores)))


def adv_loss_d(params: DiscriminatorParams, real_images, real_conditions,
               fake_images, fake_conditions, gamma: float):
    """Discriminator objective with the gradient regularizer on reals.

    Returns (loss, parts) where parts holds the plain-float breakdown.
    Real images enter as graph leaves so their input gradient exists; the
    penalty (gamma/2) * mean ||d D / d I||^2 is differentiated again when
    the caller backprops the loss into the discriminator weights.
    """
    real_images = ad.tensor(real_images)
    fake_images = ad.tensor(fake_images)
    if real_images.size == 0 or fake_images.size == 0:
        raise ValueError("adv_loss_d: empty batch")
    real_leaf = Tensor(real_images.data, requires_grad=True, op="real-batch")
    real_scores = disc_forward(params, real_leaf, real_conditions)
    fake_scores = disc_forward(params, fake_images, fake_conditions)
    loss = ad.add(ad.tmean(ad.softplus(fake_scores)), ad.tmean(ad.softplus(ad.neg(real_scores))))
    parts = {
        "d_real": float(np.mean(real_scores.data)),
        "d_fake": float(np.mean(fake_scores.data)),
        "penalty": 0.0,
    }
    if gamma > 0:
        gx = ad.grad_map(ad.tsum(real_scores), [real_leaf], create_graph=True)[real_leaf]
        penalty = ad.tmean(ad.tsum(ad.mul(gx, gx), axis=(1, 2, 3)))
        parts["penalty"] = penalty.item()
        loss = ad.add(loss, ad.mul(penalty, gamma / 2.0))
    return loss, parts
