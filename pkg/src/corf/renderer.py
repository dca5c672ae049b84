"""Discrete quadrature of the volume rendering equation.

``composite`` is the differentiable production path (graph tensors in,
graph tensors out).  ``oracle_composite`` is a deliberately separate,
plain-numpy dense integrator used as the brute-force test oracle; it
shares no code with the production path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Ray


@dataclass
class CompositeResult:
    f_r: Tensor  # (R, F) composited feature per ray
    t_final: Tensor  # (R,) residual transmittance
    weights: Tensor  # (R, S) per-sample contributions


def composite(sigmas, features, depths, t_far) -> CompositeResult:
    """Alpha-composite per-sample densities and features along rays.

    sigmas (R, S) and features (R, S, F) may carry gradients; depths
    (R, S) and t_far (scalar or (R,)) are treated as constants.  Interval
    lengths are the forward differences of the depths, with the last
    interval running to t_far.
    """
    sigmas = ad.tensor(sigmas)
    features = ad.tensor(features)
    depths = np.asarray(depths.data if isinstance(depths, Tensor) else depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = depths[None, :]
    if sigmas.ndim == 1:
        sigmas = ad.reshape(sigmas, (1, sigmas.shape[0]))
    if features.ndim == 2:
        features = ad.reshape(features, (1,) + features.shape)
    if sigmas.shape != depths.shape or features.shape[:2] != depths.shape:
        raise ad.ShapeError(
            f"composite: sigmas {sigmas.shape}, features {features.shape}, depths {depths.shape} disagree"
        )
    if np.any(np.diff(depths, axis=-1) <= 0):
        raise ValueError("composite: depths must be strictly increasing")
    if np.any(sigmas.data < 0):
        raise ValueError("composite: negative density")

    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (depths.shape[0],))
    if np.any(t_far < depths[:, -1]):
        raise ValueError("composite: t_far in front of the last sample")
    deltas = np.concatenate([np.diff(depths, axis=-1), (t_far - depths[:, -1])[:, None]], axis=-1)

    sd = ad.mul(sigmas, Tensor(deltas))
    inc = ad.cumsum(sd, axis=-1)  # optical depth through sample i
    trans_in = ad.exp(ad.neg(ad.sub(inc, sd)))  # transmittance arriving at sample i
    alpha = ad.sub(1.0, ad.exp(ad.neg(sd)))
    weights = ad.mul(trans_in, alpha)
    f_r = ad.tsum(ad.mul(ad.reshape(weights, weights.shape + (1,)), features), axis=1)
    t_final = ad.exp(ad.neg(ad.getitem(inc, (slice(None), -1))))
    return CompositeResult(f_r=f_r, t_final=t_final, weights=weights)


def oracle_composite(sigma_fn, feature_fn, ray: Ray, fine_count: int,
                     production_count: int | None = None) -> CompositeResult:
    """Dense-quadrature reference integrator (independent of ``composite``).

    ``sigma_fn(t)`` and ``feature_fn(t)`` take a depth array (S*,) and
    return (S*,) densities and (S*, F) features.  Sampling is an inclusive
    linspace over [t_near, t_far]; compositing uses the cumulative-product
    alpha form.
    """
    if production_count is not None and fine_count < 16 * production_count:
        raise ValueError("oracle sampling must be at least 16x denser than production")
    t = np.linspace(ray.t_near, ray.t_far, fine_count)
    sig = np.asarray(sigma_fn(t), dtype=np.float64)
    feat = np.asarray(feature_fn(t), dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("oracle_composite: negative density")
    deltas = np.concatenate([np.diff(t), [ray.t_far - t[-1]]])
    alpha = 1.0 - np.exp(-sig * deltas)
    one_minus = np.concatenate([[1.0], 1.0 - alpha[:-1]])
    trans_in = np.cumprod(one_minus)
    weights = trans_in * alpha
    f_r = (weights[:, None] * feat).sum(axis=0)
    t_final = float(np.prod(1.0 - alpha))
    return CompositeResult(
        f_r=Tensor(f_r[None, :]), t_final=Tensor(np.array([t_final])), weights=Tensor(weights[None, :])
    )


def rgb_from_feature(f_r, t_final, rgb_weight, rgb_bias, background_color):
    """Convert composited features to pixels over a background color.

    pixel = sigmoid(linear(f_r)) * (1 - t_final) + background * t_final,
    so vacuum rays show the background exactly.  Shapes: f_r (R, F),
    t_final (R,), background (3,) or (R, 3); returns (R, 3).
    """
    f_r = ad.tensor(f_r)
    t_final = ad.tensor(t_final)
    fg = ad.sigmoid(ad.add(ad.matmul(f_r, rgb_weight), rgb_bias))
    t_col = ad.reshape(t_final, (t_final.shape[0], 1))
    bg = ad.tensor(background_color)
    if bg.ndim == 1:
        bg = ad.reshape(bg, (1, 3))
    return ad.add(ad.mul(fg, ad.sub(1.0, t_col)), ad.mul(bg, t_col))


def downsample_box(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-average over factor x factor pixel blocks; (H, W, C) numpy in/out."""
    h, w = img.shape[0], img.shape[1]
    if h % factor or w % factor:
        raise ValueError(f"downsample_box: {img.shape} not divisible by {factor}")
    view = img.reshape(h // factor, factor, w // factor, factor, -1)
    out = view.mean(axis=(1, 3))
    return out.reshape(h // factor, w // factor, *img.shape[2:])
