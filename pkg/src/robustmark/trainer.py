"""Worst-case severity search and the min-max training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import torch

from . import attacks as atk
from .config import Config, config_to_dict
from .core import AttackSpec, ContractError, TrainingError, draw_seed, make_rng
from .ingest import ImageDataset, epoch_batches, sample_messages
from .losses import (
    adversarial_loss,
    decoder_loss,
    discriminator_loss,
    image_loss,
    per_item_decoder_loss,
)
from .models import ModelBundle, frozen_norm_stats, init_models, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class AttackedGroup:
    """Images of one subset attacked at one severity; ``indices`` index the full minibatch."""

    attack: AttackSpec
    severity: Optional[float]
    indices: torch.Tensor
    images: torch.Tensor


@dataclass
class InnerMaxResult:
    severities: list  # per attack: a severity, or a per-image list in per_image search
    losses: list  # per attack: sub-batch summed decoder loss at the chosen severity (None if not searched)
    groups: list[AttackedGroup]


@dataclass
class StepReport:
    step: int
    epoch: int
    decoder_loss: float
    image_loss: float
    adversarial_loss: float
    discriminator_loss: float
    objective: float
    severities: list
    search_losses: list
    wall_time: float = field(default=0.0, compare=False)

    def record(self) -> dict:
        """Deterministic part of the report (no timing)."""
        out = asdict(self)
        out.pop("wall_time")
        return out


class TrainResult(NamedTuple):
    bundle: ModelBundle
    history: list[StepReport]
    evaluations: list[dict]


def _snapshot(rng: torch.Generator) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.set_state(rng.get_state())
    return g


def severity_losses(decoder, attack: AttackSpec, x_wm, x_cover, messages, rng, severities=None):
    """Per-item decoder loss at each severity, every severity seeing the same random draw.

    Returns ``[(s, per_item_losses)]`` in harshest-first order.
    """
    values = attack.search_values() if severities is None else list(severities)
    if not values:
        raise ContractError(f"empty severity grid for {attack.kind}")
    if x_wm.shape[0] == 0:
        raise ContractError("empty sub-batch")
    out = []
    with torch.no_grad(), frozen_norm_stats(decoder):
        for s in attack.harshest_first(values):
            attacked = atk.apply(attack, x_wm, x_cover, s, _snapshot(rng))
            out.append((s, per_item_decoder_loss(messages, decoder(attacked))))
    return out


def worst_case_severity(decoder, attack: AttackSpec, x_wm, x_cover, messages, rng,
                        per_image: bool = False):
    """Exhaustive argmax of the decoder loss over the attack's severity grid.

    ``rng`` is not advanced: its current state is replayed for every severity.
    Ties go to the harshest severity. With ``per_image`` the argmax is taken per
    item and lists are returned.
    """
    table = severity_losses(decoder, attack, x_wm, x_cover, messages, rng)
    if not per_image:
        best_s, best = None, None
        for s, losses in table:
            total = losses.sum().item()
            if best is None or total > best:
                best_s, best = s, total
        return best_s, best
    n = x_wm.shape[0]
    best_s = [None] * n
    best = [-math.inf] * n
    for s, losses in table:
        for j, v in enumerate(losses.tolist()):
            if v > best[j]:
                best_s[j], best[j] = s, v
    return best_s, best


def _attack_groups(attack, x_wm, x_cover, severities, rng, offset: int) -> list[AttackedGroup]:
    """Apply ``attack`` with per-item severities; each distinct severity reuses the same draw."""
    groups = []
    for s in attack.harshest_first(list(dict.fromkeys(severities))):
        out = atk.apply(attack, x_wm, x_cover, s, _snapshot(rng))
        idx = torch.tensor([j for j, v in enumerate(severities) if v == s], dtype=torch.long)
        images = out if len(idx) == x_wm.shape[0] else out[idx]
        groups.append(AttackedGroup(attack, s, idx + offset, images))
    return groups


def build_attacked_batch(bundle: ModelBundle, x, messages, attack_list: Sequence[AttackSpec],
                         sizes: Sequence[int], mode: str, rng: torch.Generator,
                         search: str = "batch", replay_draws: bool = False):
    """Encode, split into contiguous subsets, pick severities, and attack with gradients.

    Returns ``(x_wm, InnerMaxResult)``. The same number of seeds is drawn from
    ``rng`` in both modes, so a worst-case run with singleton grids follows the
    fixed-severity run exactly.
    """
    if sum(sizes) != x.shape[0] or len(sizes) != len(attack_list):
        raise ContractError(f"subset sizes {list(sizes)} do not split a batch of {x.shape[0]}")
    x_wm = bundle.encoder(x, messages)
    severities, losses, groups = [], [], []
    start = 0
    for attack, k in zip(attack_list, sizes):
        sl = slice(start, start + k)
        search_seed, update_seed = draw_seed(rng), draw_seed(rng)
        if replay_draws:
            update_seed = search_seed
        sub_wm, sub_cover, sub_m = x_wm[sl], x[sl], messages[sl]
        if mode == "fixed_severity" or attack.kind == "identity":
            s_star = attack.fixed_severity()
            per_item = [s_star] * k
            loss = None
        elif mode == "worst_case":
            s_star, loss = worst_case_severity(
                bundle.decoder, attack, sub_wm.detach(), sub_cover, sub_m,
                make_rng(search_seed), per_image=(search == "per_image"),
            )
            per_item = s_star if search == "per_image" else [s_star] * k
        else:
            raise ContractError(f"unknown training mode {mode!r}")
        groups += _attack_groups(attack, sub_wm, sub_cover, per_item, make_rng(update_seed), start)
        severities.append(s_star)
        losses.append(loss)
        start += k
    return x_wm, InnerMaxResult(severities, losses, groups)


def decode_groups(decoder, groups: Sequence[AttackedGroup]) -> torch.Tensor:
    """Decode each group separately (sizes may differ) and restore minibatch order."""
    order = torch.cat([g.indices for g in groups])
    decoded = torch.cat([decoder(g.images) for g in groups])
    return decoded[torch.argsort(order)]


def make_optimizers(bundle: ModelBundle, cfg: Config) -> dict:
    t = cfg.training
    cls = torch.optim.SGD if t.optimizer == "sgd" else torch.optim.Adam
    return {
        "encoder": cls(bundle.encoder.parameters(), lr=t.lr_encoder),
        "decoder": cls(bundle.decoder.parameters(), lr=t.lr_decoder),
        "discriminator": cls(bundle.discriminator.parameters(), lr=t.lr_discriminator),
    }


def _finite(name: str, value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {name} ({value.item()}) at step {step}; training aborted")


def train_step(bundle: ModelBundle, x, messages, cfg: Config, rng: torch.Generator, epoch: int = 0):
    """One discriminator update followed by one joint encoder/decoder update."""
    t0 = time.perf_counter()
    t = cfg.training
    if not bundle.optimizers:
        bundle.optimizers = make_optimizers(bundle, cfg)
    opt = bundle.optimizers
    bundle.train()

    x_wm, inner = build_attacked_batch(
        bundle, x, messages, cfg.attacks, cfg.subset_sizes(), t.mode, rng,
        search=t.search, replay_draws=t.replay_draws,
    )

    opt["discriminator"].zero_grad(set_to_none=True)
    loss_a = discriminator_loss(bundle.discriminator, x, x_wm.detach())
    _finite("discriminator loss", loss_a, bundle.step)
    loss_a.backward()
    opt["discriminator"].step()

    decoded = decode_groups(bundle.decoder, inner.groups)
    loss_d = decoder_loss(messages, decoded)
    loss_ei = image_loss(x, x_wm)
    with frozen_norm_stats(bundle.discriminator):
        loss_ea = adversarial_loss(bundle.discriminator, x_wm)
    objective = loss_d + t.lambda_I * loss_ei + t.lambda_A * loss_ea
    _finite("objective", objective, bundle.step)

    opt["encoder"].zero_grad(set_to_none=True)
    opt["decoder"].zero_grad(set_to_none=True)
    objective.backward()
    opt["encoder"].step()
    opt["decoder"].step()
    bundle.discriminator.zero_grad(set_to_none=True)

    report = StepReport(
        step=bundle.step,
        epoch=epoch,
        decoder_loss=loss_d.item(),
        image_loss=loss_ei.item(),
        adversarial_loss=loss_ea.item(),
        discriminator_loss=loss_a.item(),
        objective=objective.item(),
        severities=list(inner.severities),
        search_losses=list(inner.losses),
        wall_time=time.perf_counter() - t0,
    )
    bundle.step += 1
    return bundle, report


def _converged(history: list[StepReport], window: int, tol: Optional[float]) -> bool:
    if not window or tol is None or len(history) < 2 * window:
        return False
    recent = sum(r.objective for r in history[-window:]) / window
    before = sum(r.objective for r in history[-2 * window:-window]) / window
    return abs(recent - before) <= tol * max(abs(before), 1e-12)


def train(cfg: Config, train_set: ImageDataset, eval_set: Optional[ImageDataset] = None,
          out_dir=None, bundle: Optional[ModelBundle] = None, log_every: int = 0) -> TrainResult:
    """Run the epoch budget (or until the objective's moving average settles).

    With ``out_dir``: ``history.jsonl`` (one deterministic record per step),
    ``timing.jsonl`` (wall times), periodic ``checkpoint_epochNNNN.npz`` and
    ``final.npz``.
    """
    from .evaluation import quick_eval

    cfg.validate()
    t = cfg.training
    rng = make_rng(t.seed)
    if bundle is None:
        bundle = init_models(cfg.model, rng, seed=t.seed)
    bundle.config_snapshot = config_to_dict(cfg)
    history: list[StepReport] = []
    evaluations: list[dict] = []
    if t.epochs == 0:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(bundle, Path(out_dir) / "final.npz")
        return TrainResult(bundle, history, evaluations)
    if t.batch_size > len(train_set):
        raise ContractError(f"batch size {t.batch_size} exceeds training set size {len(train_set)}")

    hist_fh = time_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_fh = open(out_dir / "history.jsonl", "w")
        time_fh = open(out_dir / "timing.jsonl", "w")
    try:
        stop = False
        for epoch in range(t.epochs):
            for idx in epoch_batches(len(train_set), t.batch_size, rng):
                x = train_set.images[idx]
                m = sample_messages(rng, t.batch_size, cfg.model.message_length)
                step_rng = make_rng(draw_seed(rng))
                bundle, report = train_step(bundle, x, m, cfg, step_rng, epoch=epoch)
                history.append(report)
                if hist_fh:
                    hist_fh.write(json.dumps(report.record(), sort_keys=True) + "\n")
                    time_fh.write(json.dumps({"step": report.step, "wall_time": report.wall_time}) + "\n")
                if log_every and report.step % log_every == 0:
                    log.info("step %d  J=%.4f  L_D=%.4f  L_EI=%.5f  s*=%s", report.step,
                             report.objective, report.decoder_loss, report.image_loss,
                             report.severities)
                if _converged(history, t.early_stop_window, t.early_stop_tol):
                    log.info("early stop at step %d", report.step)
                    stop = True
                    break
            if eval_set is not None:
                evaluations.append({"epoch": epoch, **quick_eval(bundle, eval_set, cfg.eval.seed)})
                bundle.train()
            if out_dir is not None and t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                save_checkpoint(bundle, out_dir / f"checkpoint_epoch{epoch + 1:04d}.npz")
            if stop:
                break
    finally:
        if hist_fh:
            hist_fh.close()
            time_fh.close()
    if out_dir is not None:
        save_checkpoint(bundle, out_dir / "final.npz")
    bundle.eval()
    return TrainResult(bundle, history, evaluations)
