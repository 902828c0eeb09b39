"""Robust image watermarking trained against worst-case distortions."""

from .config import Config, load_config
from .core import AttackSpec, SeverityGrid, make_rng
from .models import ModelBundle, init_models, load_checkpoint, save_checkpoint
from .trainer import train, train_step, worst_case_severity

__version__ = "0.1.0"
