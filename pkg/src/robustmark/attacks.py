"""Differentiable image distortions.

Every operator is differentiable with respect to the watermarked input at a
fixed severity and a fixed random draw. Randomized operators consume the same
number of uniform draws from ``rng`` whatever the severity, so replaying a
generator state reproduces the same placement/mask family across severities.
"""

from __future__ import annotations

import io
import math
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import AttackSpec, ContractError, SeverityDomainError, check_images, in_domain

MIN_CROP_SIDE = 8


def _same_shape(x_wm: torch.Tensor, x_cover: torch.Tensor) -> None:
    if x_cover is None:
        raise ContractError("this attack needs the cover images")
    if x_wm.shape != x_cover.shape:
        raise ContractError(
            f"shape mismatch: watermarked {tuple(x_wm.shape)} vs cover {tuple(x_cover.shape)}"
        )


def _check_fraction(p: float, name: str, allow_zero: bool = False) -> None:
    ok = (0.0 <= p <= 1.0) if allow_zero else (0.0 < p <= 1.0)
    if not ok:
        raise SeverityDomainError(f"{name} severity {p} outside {'[0, 1]' if allow_zero else '(0, 1]'}")


def crop_side(p: float, dim: int) -> int:
    """Side length kept along one axis when retaining area fraction ``p``."""
    return int(math.floor(math.sqrt(p) * dim + 1e-9))


def _offsets(u: torch.Tensor, dim: int, side: int) -> list[int]:
    room = dim - side + 1
    return [min(int(math.floor(float(v) * room)), dim - side) for v in u]


def identity(x_wm: torch.Tensor) -> torch.Tensor:
    return x_wm


def crop(x_wm: torch.Tensor, p: float, rng: torch.Generator) -> torch.Tensor:
    """Random square-ish crop retaining area fraction ``p``; output is smaller than the input."""
    check_images(x_wm, "x_wm")
    _check_fraction(p, "crop")
    b, _, h, w = x_wm.shape
    u = torch.rand((b, 2), generator=rng, dtype=torch.float64)
    sh, sw = crop_side(p, h), crop_side(p, w)
    if sh < MIN_CROP_SIDE or sw < MIN_CROP_SIDE:
        raise SeverityDomainError(
            f"crop p={p} on {h}x{w} leaves {sh}x{sw}, below {MIN_CROP_SIDE} pixels"
        )
    tops, lefts = _offsets(u[:, 0], h, sh), _offsets(u[:, 1], w, sw)
    return torch.stack(
        [x_wm[i, :, t:t + sh, l:l + sw] for i, (t, l) in enumerate(zip(tops, lefts))]
    )


def cropout_mask(shape, p: float, rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    b, _, h, w = shape
    u = torch.rand((b, 2), generator=rng, dtype=torch.float64)
    sh, sw = crop_side(p, h), crop_side(p, w)
    mask = torch.zeros((b, 1, h, w), dtype=dtype)
    if sh == 0 or sw == 0:
        return mask
    for i, (t, l) in enumerate(zip(_offsets(u[:, 0], h, sh), _offsets(u[:, 1], w, sw))):
        mask[i, :, t:t + sh, l:l + sw] = 1
    return mask


def cropout(x_wm, x_cover, p: float, rng: torch.Generator) -> torch.Tensor:
    """Keep watermarked pixels inside a random square of area fraction ``p``; cover pixels elsewhere."""
    check_images(x_wm, "x_wm")
    _same_shape(x_wm, x_cover)
    _check_fraction(p, "cropout")
    mask = cropout_mask(x_wm.shape, p, rng, x_wm.dtype)
    return mask * x_wm + (1 - mask) * x_cover


def dropout_mask(shape, p: float, rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    b, _, h, w = shape
    u = torch.rand((b, 1, h, w), generator=rng, dtype=torch.float64)
    return (u < p).to(dtype)


def dropout(x_wm, x_cover, p: float, rng: torch.Generator) -> torch.Tensor:
    """Per-pixel keep-with-probability ``p``; dropped pixels revert to the cover."""
    check_images(x_wm, "x_wm")
    _same_shape(x_wm, x_cover)
    _check_fraction(p, "dropout", allow_zero=True)
    mask = dropout_mask(x_wm.shape, p, rng, x_wm.dtype)
    return mask * x_wm + (1 - mask) * x_cover


def blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(2 * sigma) + 1


def gaussian_kernel1d(sigma: float, dtype=torch.float32) -> torch.Tensor:
    k = blur_kernel_size(sigma)
    r = torch.arange(k, dtype=torch.float64) - (k - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return (g / g.sum()).to(dtype)


def gaussian_blur(x_wm: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur, kernel size ``2*ceil(2*sigma)+1``, reflect padding."""
    check_images(x_wm, "x_wm")
    if not sigma > 0:
        raise SeverityDomainError(f"blur sigma must be > 0, got {sigma}")
    c = x_wm.shape[1]
    g = gaussian_kernel1d(sigma, x_wm.dtype)
    pad = g.numel() // 2
    if pad >= x_wm.shape[2] or pad >= x_wm.shape[3]:
        raise SeverityDomainError(
            f"blur sigma={sigma} needs images larger than {pad} pixels for reflect padding"
        )
    out = F.pad(x_wm, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(out, g.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    out = F.conv2d(out, g.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return out


@lru_cache(maxsize=None)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix; rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


@lru_cache(maxsize=None)
def zigzag_indices(n: int = 8) -> np.ndarray:
    """``out[i, j]`` is the position of coefficient (i, j) in JPEG zigzag scan order."""
    order = sorted(
        ((i, j) for i in range(n) for j in range(n)),
        key=lambda ij: (ij[0] + ij[1], ij[1] if (ij[0] + ij[1]) % 2 == 0 else ij[0]),
    )
    out = np.empty((n, n), dtype=np.int64)
    for rank, (i, j) in enumerate(order):
        out[i, j] = rank
    return out


def jpeg_kept_coefficients(q: float) -> int:
    return math.ceil(64 * q / 100)


def jpeg_approx(x_wm: torch.Tensor, q: float) -> torch.Tensor:
    """Blockwise DCT low-pass: keep the first ``ceil(64*q/100)`` zigzag coefficients per 8x8 block."""
    check_images(x_wm, "x_wm")
    if not 1 <= q <= 100:
        raise SeverityDomainError(f"JPEG quality must be in [1, 100], got {q}")
    b, c, h, w = x_wm.shape
    if h % 8 or w % 8:
        raise ContractError(f"JPEG needs H and W multiples of 8, got {h}x{w}")
    d = torch.as_tensor(dct_matrix(8), dtype=x_wm.dtype)
    keep = torch.as_tensor(zigzag_indices(8) < jpeg_kept_coefficients(q), dtype=x_wm.dtype)
    blocks = x_wm.reshape(b, c, h // 8, 8, w // 8, 8)
    coef = torch.einsum("ui,bchiwj,vj->bchuwv", d, blocks, d)
    coef = coef * keep.view(1, 1, 1, 8, 1, 8)
    rec = torch.einsum("ui,bchuwv,vj->bchiwj", d, coef, d)
    return rec.reshape(b, c, h, w).clamp(0, 1)


def jpeg_codec(x: torch.Tensor, q: float) -> torch.Tensor:
    """Real JPEG round-trip through Pillow; evaluation only, no gradients."""
    check_images(x, "x")
    out = []
    for img in x.detach().cpu():
        arr = (img.permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=int(round(q)))
        buf.seek(0)
        dec = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(dec).permute(2, 0, 1))
    return torch.stack(out).to(x.dtype)


def apply(
    spec: AttackSpec,
    x_wm: torch.Tensor,
    x_cover: Optional[torch.Tensor],
    s: Optional[float],
    rng: Optional[torch.Generator],
) -> torch.Tensor:
    """Dispatch ``N(x_wm, s)`` for the attack family ``spec.kind``."""
    kind = spec.kind
    if kind == "identity":
        return identity(x_wm)
    if s is None or not in_domain(kind, s):
        raise SeverityDomainError(f"severity {s} outside the legal domain of {kind}")
    if kind == "crop":
        return crop(x_wm, s, rng)
    if kind == "cropout":
        return cropout(x_wm, x_cover, s, rng)
    if kind == "dropout":
        return dropout(x_wm, x_cover, s, rng)
    if kind == "gaussian_blur":
        return gaussian_blur(x_wm, s)
    if kind == "jpeg":
        return jpeg_approx(x_wm, s)
    raise ContractError(f"unknown attack kind {kind!r}")
