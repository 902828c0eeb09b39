"""Shared domain types, errors and seeded randomness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Optional

import torch

__all__ = [
    "WatermarkError",
    "ConfigError",
    "ContractError",
    "SeverityDomainError",
    "IngestError",
    "TrainingError",
    "CheckpointFormatError",
    "ATTACK_KINDS",
    "SeverityGrid",
    "AttackSpec",
    "LossWeights",
    "make_rng",
    "draw_seed",
    "check_images",
    "check_messages",
    "check_decoded",
]


class WatermarkError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(WatermarkError):
    """Schema or invariant violation in a configuration; ``field`` is the dotted path."""

    exit_code = 1

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ContractError(WatermarkError, ValueError):
    exit_code = 1


class SeverityDomainError(ContractError):
    pass


class IngestError(WatermarkError):
    exit_code = 2


class TrainingError(WatermarkError):
    exit_code = 3


class CheckpointFormatError(WatermarkError):
    exit_code = 4


# Severity semantics per kind: retained area fraction (crop, cropout), keep
# probability (dropout), blur sigma in pixels, JPEG quality.
ATTACK_KINDS = ("identity", "crop", "cropout", "dropout", "gaussian_blur", "jpeg")

# kind -> (low, high, low_inclusive); high is always inclusive.
_DOMAINS = {
    "crop": (0.0, 1.0, False),
    "cropout": (0.0, 1.0, False),
    "dropout": (0.0, 1.0, False),
    "gaussian_blur": (0.0, math.inf, False),
    "jpeg": (1.0, 100.0, True),
}

# True when a larger severity value means a harsher attack.
_HARSHER_WHEN_LARGER = {
    "crop": False,
    "cropout": False,
    "dropout": False,
    "gaussian_blur": True,
    "jpeg": False,
}


def in_domain(kind: str, s: float) -> bool:
    if kind == "identity":
        return True
    lo, hi, lo_inclusive = _DOMAINS[kind]
    if not math.isfinite(s) and hi != math.inf:
        return False
    above = s >= lo if lo_inclusive else s > lo
    return above and s <= hi


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


@dataclass(frozen=True)
class SeverityGrid:
    """Inclusive grid ``{min, min+step, ..., max}`` enumerated in exact decimal arithmetic."""

    min: float
    max: float
    step: float

    def __post_init__(self):
        for name in ("min", "max", "step"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")
        if self.min > self.max:
            raise ConfigError("min", f"min {self.min} exceeds max {self.max}")
        if self.step <= 0:
            raise ConfigError("step", f"step must be > 0, got {self.step}")
        if (_dec(self.max) - _dec(self.min)) / _dec(self.step) > 10_000:
            raise ConfigError("step", "grid has more than 10000 points")

    @classmethod
    def single(cls, value: float) -> "SeverityGrid":
        return cls(value, value, 1.0)

    def values(self) -> list[float]:
        lo, hi, step = _dec(self.min), _dec(self.max), _dec(self.step)
        out = []
        v = lo
        while v <= hi:
            out.append(float(v))
            v += step
        return out

    def __len__(self) -> int:
        return len(self.values())

    def extended(self, kind: str) -> "SeverityGrid":
        """Grid grown by one step past each end, trimmed to the kind's legal domain."""
        lo = _dec(self.min) - _dec(self.step)
        hi = _dec(self.max) + _dec(self.step)
        if not in_domain(kind, float(lo)):
            lo = _dec(self.min)
        if not in_domain(kind, float(hi)):
            hi = _dec(self.max)
        return SeverityGrid(float(lo), float(hi), self.step)


@dataclass(frozen=True)
class AttackSpec:
    """One distortion family with its severity grid and optional fixed (baseline) severity."""

    kind: str
    grid: Optional[SeverityGrid] = None
    fixed: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError("kind", f"unknown attack kind {self.kind!r}")
        if self.kind == "identity":
            return
        if self.grid is None and self.fixed is None:
            raise ConfigError(self.kind, "needs a severity grid or a fixed severity")
        if self.grid is not None:
            for bound in (self.grid.min, self.grid.max):
                if not in_domain(self.kind, bound):
                    raise ConfigError(
                        f"{self.kind}.grid", f"bound {bound} outside legal severity domain"
                    )
        if self.fixed is not None and not in_domain(self.kind, self.fixed):
            raise ConfigError(f"{self.kind}.fixed", f"{self.fixed} outside legal severity domain")

    @property
    def name(self) -> str:
        return self.kind

    def search_values(self) -> list[Optional[float]]:
        """Severities the worst-case search ranges over."""
        if self.kind == "identity":
            return [None]
        if self.grid is None:
            return [self.fixed]
        return self.grid.values()

    def fixed_severity(self) -> Optional[float]:
        if self.kind == "identity":
            return None
        if self.fixed is not None:
            return self.fixed
        values = self.grid.values()
        if len(values) != 1:
            raise ConfigError(
                f"{self.kind}.fixed", "fixed_severity mode requires exactly one severity"
            )
        return values[0]

    def harshest_first(self, values: list) -> list:
        """Order severities from harshest to mildest (tie-break order of the search)."""
        if self.kind == "identity":
            return list(values)
        return sorted(values, reverse=_HARSHER_WHEN_LARGER[self.kind])


@dataclass(frozen=True)
class LossWeights:
    lambda_I: float = 0.7
    lambda_A: float = 0.001

    def __post_init__(self):
        for name in ("lambda_I", "lambda_A"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"training.{name}", f"must be finite and >= 0, got {v}")


def make_rng(seed: int) -> torch.Generator:
    """A CPU generator; equal seeds give identical streams."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def draw_seed(rng: torch.Generator) -> int:
    """Draw a child seed so independent consumers can be split deterministically."""
    return int(torch.randint(0, 2**62, (1,), generator=rng).item())


def check_images(x: torch.Tensor, name: str = "images", min_size: int = 1) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ContractError(f"{name}: expected shape (batch, 3, H, W), got {tuple(x.shape)}")
    if x.shape[2] < min_size or x.shape[3] < min_size:
        raise ContractError(
            f"{name}: spatial size {tuple(x.shape[2:])} below minimum {min_size}"
        )


def check_messages(m: torch.Tensor, name: str = "messages") -> None:
    if m.dim() != 2 or m.shape[1] < 1:
        raise ContractError(f"{name}: expected shape (batch, L), got {tuple(m.shape)}")


def check_decoded(m: torch.Tensor, decoded: torch.Tensor) -> None:
    if m.shape != decoded.shape:
        raise ContractError(
            f"shape mismatch: messages {tuple(m.shape)} vs decoded {tuple(decoded.shape)}"
        )
