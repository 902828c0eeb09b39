"""Encoder, decoder and discriminator networks plus the checkpoint container.

Conv-BN-ReLU stacks throughout. The encoder replicates the message
spatially and concatenates it with its features; the decoder ends in global average pooling
so cropped (smaller) images decode without resizing.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ArchConfig
from .core import CheckpointFormatError, ContractError, check_images, check_messages

CHECKPOINT_VERSION = 1
MIN_DECODE_SIZE = 8
# initial scale of the encoder's output conv, so an untrained encoder is close to identity
RESIDUAL_INIT_SCALE = 0.01


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1, momentum: float = 0.1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.BatchNorm2d(cout, momentum=momentum),
            nn.ReLU(inplace=False),
        )


class StraightThroughClamp(torch.autograd.Function):
    """Clamp to [0, 1] in the forward pass, identity gradient in the backward pass."""

    @staticmethod
    def forward(ctx, x):
        return x.clamp(0, 1)

    @staticmethod
    def backward(ctx, grad):
        return grad


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c, m = arch.channels, arch.bn_momentum
        blocks = [ConvBNReLU(3, c, momentum=m)]
        blocks += [ConvBNReLU(c, c, momentum=m) for _ in range(arch.encoder_blocks - 1)]
        self.features = nn.Sequential(*blocks)
        post = []
        cin = c + arch.message_length + 3
        for _ in range(arch.encoder_post_blocks):
            post.append(ConvBNReLU(cin, c, momentum=m))
            cin = c
        self.after_concat = nn.Sequential(*post)
        self.to_image = nn.Conv2d(cin, 3, 1)
        self.message_length = arch.message_length

    def forward(self, x: torch.Tensor, m: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        check_images(x, "cover")
        check_messages(m)
        if m.shape[0] != x.shape[0] or m.shape[1] != self.message_length:
            raise ContractError(
                f"messages {tuple(m.shape)} do not match batch {x.shape[0]} / L={self.message_length}"
            )
        h, w = x.shape[2:]
        spread = m.to(x.dtype)[:, :, None, None].expand(-1, -1, h, w)
        z = torch.cat([self.features(x), spread, x], dim=1)
        # residual output: the network predicts the watermark pattern added to the cover
        out = x + self.to_image(self.after_concat(z))
        return StraightThroughClamp.apply(out) if clamp else out


class Decoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c, m = arch.channels, arch.bn_momentum
        n = arch.decoder_blocks
        strides = [1] * (n - arch.decoder_downsample) + [2] * arch.decoder_downsample
        blocks = []
        cin = 3
        for s in strides:
            blocks.append(ConvBNReLU(cin, c, stride=s, momentum=m))
            cin = c
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(c, arch.message_length)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_images(x, "attacked", min_size=MIN_DECODE_SIZE)
        return self.linear(self.pool(self.features(x)).flatten(1))


class Discriminator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c, m = arch.channels, arch.bn_momentum
        blocks = [ConvBNReLU(3, c, momentum=m)]
        blocks += [ConvBNReLU(c, c, momentum=m) for _ in range(arch.discriminator_blocks - 1)]
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probability that each image is a cover, shape (batch,)."""
        check_images(x, "images")
        return torch.sigmoid(self.linear(self.pool(self.features(x)).flatten(1))).squeeze(1)


def init_parameters(module: nn.Module, rng: torch.Generator) -> None:
    """Fan-in scaled uniform kernels, zero biases, unit/zero normalization affine."""
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.uniform_(-bound, bound, generator=rng)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_running_stats()
                mod.weight.fill_(1.0)
                mod.bias.zero_()


@contextlib.contextmanager
def frozen_norm_stats(*modules: nn.Module):
    """Use batch statistics without touching running averages (momentum 0)."""
    saved = []
    for module in modules:
        for mod in module.modules():
            if isinstance(mod, nn.BatchNorm2d):
                saved.append((mod, mod.momentum, mod.num_batches_tracked.clone()))
                mod.momentum = 0.0
    try:
        yield
    finally:
        for mod, momentum, tracked in saved:
            mod.momentum = momentum
            mod.num_batches_tracked.copy_(tracked)


@dataclass
class ModelBundle:
    arch: ArchConfig
    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    step: int = 0
    seed: Optional[int] = None
    config_snapshot: Optional[dict] = None
    optimizers: dict = field(default_factory=dict, repr=False)

    def networks(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "decoder": self.decoder, "discriminator": self.discriminator}

    def train(self) -> "ModelBundle":
        for net in self.networks().values():
            net.train()
        return self

    def eval(self) -> "ModelBundle":
        for net in self.networks().values():
            net.eval()
        return self

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for net in self.networks().values():
            net.to(dtype)
        return self

    def parameter_count(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in v.parameters()) for k, v in self.networks().items()}


def build_models(arch: ArchConfig) -> ModelBundle:
    return ModelBundle(arch, Encoder(arch), Decoder(arch), Discriminator(arch))


def init_models(arch: ArchConfig, rng: torch.Generator, seed: Optional[int] = None) -> ModelBundle:
    bundle = build_models(arch)
    for net in bundle.networks().values():
        init_parameters(net, rng)
    with torch.no_grad():
        bundle.encoder.to_image.weight.mul_(RESIDUAL_INIT_SCALE)
    bundle.seed = seed
    return bundle


# --- checkpoints ----------------------------------------------------------------------
#
# A checkpoint is an uncompressed ``.npz`` archive. Every network tensor is stored
# under ``<network>/<state_dict key>``; the entry ``__manifest__`` holds a UTF-8
# JSON document as a uint8 array:
#
#   {"format": "robustmark-checkpoint", "version": 1, "arch": {...},
#    "step": int, "seed": int | null, "config": {...} | null}


def _manifest(bundle: ModelBundle) -> dict[str, Any]:
    return {
        "format": "robustmark-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": dataclasses.asdict(bundle.arch),
        "step": bundle.step,
        "seed": bundle.seed,
        "config": bundle.config_snapshot,
    }


def save_checkpoint(bundle: ModelBundle, path) -> None:
    arrays = {}
    for name, net in bundle.networks().items():
        for key, tensor in net.state_dict().items():
            arrays[f"{name}/{key}"] = tensor.detach().cpu().numpy()
    blob = json.dumps(_manifest(bundle), sort_keys=True).encode()
    arrays["__manifest__"] = np.frombuffer(blob, dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _open_archive(path):
    try:
        return np.load(Path(path), allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint archive ({e})") from None


def read_manifest(path) -> dict[str, Any]:
    """Checkpoint metadata without materializing any network."""
    with _open_archive(path) as archive:
        if "__manifest__" not in archive.files:
            raise CheckpointFormatError(f"{path}: missing manifest")
        try:
            manifest = json.loads(archive["__manifest__"].tobytes().decode())
        except ValueError as e:
            raise CheckpointFormatError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format") != "robustmark-checkpoint":
        raise CheckpointFormatError(f"{path}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {manifest.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return manifest


def load_checkpoint(path) -> ModelBundle:
    manifest = read_manifest(path)
    try:
        arch = ArchConfig(**manifest["arch"])
    except TypeError as e:
        raise CheckpointFormatError(f"{path}: bad architecture record ({e})") from None
    bundle = build_models(arch)
    with _open_archive(path) as archive:
        for name, net in bundle.networks().items():
            state = {}
            for key in net.state_dict():
                entry = f"{name}/{key}"
                if entry not in archive.files:
                    raise CheckpointFormatError(f"{path}: missing tensor {entry}")
                state[key] = torch.from_numpy(archive[entry].copy())
            try:
                net.load_state_dict(state)
            except RuntimeError as e:
                raise CheckpointFormatError(f"{path}: {e}") from None
    bundle.step = int(manifest["step"])
    bundle.seed = manifest.get("seed")
    bundle.config_snapshot = manifest.get("config")
    return bundle.eval()
