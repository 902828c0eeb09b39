"""Training losses: message MSE, image MSE, and the discriminator terms."""

from __future__ import annotations

import torch

from .core import ContractError, check_decoded

LOG_FLOOR = 1e-7


def per_item_decoder_loss(m: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    """Squared-error sum over message bits, one value per item."""
    check_decoded(m, decoded)
    return ((m.to(decoded.dtype) - decoded) ** 2).sum(dim=1)


def decoder_loss(m: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    return per_item_decoder_loss(m, decoded).mean()


def image_loss(x: torch.Tensor, x_wm: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean squared error, averaged over the batch."""
    if x.shape != x_wm.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_wm.shape)}")
    return ((x - x_wm) ** 2).flatten(1).mean(dim=1).mean()


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_FLOOR))


def adversarial_loss_from_scores(scores_wm: torch.Tensor) -> torch.Tensor:
    """mean log(1 - C(x_wm))."""
    return _log(1 - scores_wm).mean()


def discriminator_loss_from_scores(scores_cover: torch.Tensor, scores_wm: torch.Tensor) -> torch.Tensor:
    """mean [log(1 - C(x)) + log(C(x_wm))]; minimized by the discriminator."""
    return (_log(1 - scores_cover) + _log(scores_wm)).mean()


def adversarial_loss(discriminator, x_wm: torch.Tensor) -> torch.Tensor:
    return adversarial_loss_from_scores(discriminator(x_wm))


def discriminator_loss(discriminator, x: torch.Tensor, x_wm: torch.Tensor) -> torch.Tensor:
    return discriminator_loss_from_scores(discriminator(x), discriminator(x_wm))
