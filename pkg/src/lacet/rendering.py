"""Patch decoding, the photometric objective, and image quality metrics.

The decoder maps each target token straight to a sigmoid-bounded RGB
patch. The training loss is mean squared error per image plus an optional
weighted perceptual term: the perceptual functional is injectable (see
`register_perceptual`) and absent by default, so the default loss is pure
MSE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels
from .tape import Tensor, layer_norm, matmul, reshape, sigmoid, tmean

PSNR_CAP = 99.0

_PERCEPTUAL: dict[str, Callable] = {}


def register_perceptual(name: str, fn: Callable) -> None:
    """Register a perceptual loss plug-in: fn(pred, gt) -> scalar Tensor."""
    _PERCEPTUAL[name] = fn


def get_perceptual(name: Optional[str]) -> Optional[Callable]:
    if name is None:
        return None
    try:
        return _PERCEPTUAL[name]
    except KeyError:
        raise ValueError(f"no perceptual plug-in named {name!r}") from None


@dataclass
class DecoderHead:
    """Layer norm over the token width, then a linear map to 3 p^2."""

    ln_gain: Tensor
    ln_bias: Tensor
    proj: Tensor  # (D, 3*p*p)


def decode_tokens(tokens: Tensor, head: DecoderHead, p: int) -> Tensor:
    """Tokens (n,D) -> RGB patches (n,p,p,3), values strictly inside (0,1)."""
    if head.proj.shape[1] != 3 * p * p:
        raise ValueError("projection width must be 3*p^2")
    h = layer_norm(tokens, head.ln_gain, head.ln_bias)
    y = sigmoid(matmul(h, head.proj))
    return reshape(y, (tokens.shape[0], p, p, 3))


def photometric_loss(pred: Tensor, gt: np.ndarray, mu: float = 0.5,
                     perceptual: Optional[Callable] = None) -> Tensor:
    """MSE plus mu times the perceptual term (zero functional by default)."""
    if pred.shape != np.shape(gt):
        raise ValueError("prediction and ground truth shapes differ")
    diff = pred - Tensor(np.asarray(gt))
    loss = tmean(diff * diff)
    if perceptual is not None:
        loss = loss + mu * perceptual(pred, gt)
    return loss


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1/MSE) for [0,1] images, capped at 99 dB near zero error."""
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11,
         sigma: float = 1.5) -> float:
    """Windowed SSIM averaged over pixels and channels; images smaller
    than the window fall back to global statistics."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]

    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        if min(xc.shape) < window:
            mx, my = xc.mean(), yc.mean()
            vx, vy = xc.var(), yc.var()
            cov = ((xc - mx) * (yc - my)).mean()
        else:
            kern = _gaussian_window(window, sigma)
            mx = kernels.filter2d_valid(xc, kern)
            my = kernels.filter2d_valid(yc, kern)
            vx = kernels.filter2d_valid(xc * xc, kern) - mx * mx
            vy = kernels.filter2d_valid(yc * yc, kern) - my * my
            cov = kernels.filter2d_valid(xc * yc, kern) - mx * my
        num = (2.0 * mx * my + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
        den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
