"""Bit accuracy, PSNR, severity sweeps and model comparison reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import attacks as atk
from .core import AttackSpec, ContractError, check_decoded, draw_seed, make_rng
from .ingest import ImageDataset, sample_messages
from .models import ModelBundle

SWEEP_COLUMNS = ("model_id", "attack", "severity", "bit_acc_mean", "bit_acc_std", "n")
CODEC_JPEG = "jpeg_codec"


def decide_bits(decoded: torch.Tensor) -> torch.Tensor:
    return (decoded >= 0.5).to(torch.int64)


def per_image_bit_accuracy(m: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    check_decoded(m, decoded)
    return (decide_bits(decoded) == (m >= 0.5).to(torch.int64)).to(torch.float64).mean(dim=1)


def bit_accuracy(m: torch.Tensor, decoded: torch.Tensor) -> float:
    """Fraction of bits recovered after thresholding the decoder output at 0.5."""
    check_decoded(m, decoded)
    matches = (decide_bits(decoded) == (m >= 0.5).to(torch.int64)).sum().item()
    return matches / m.numel()


def psnr(x: torch.Tensor, x_wm: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR in dB on the 255 scale (no quantization); identical images give +inf."""
    if x.shape != x_wm.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_wm.shape)}")
    diff = (x.to(torch.float64) - x_wm.to(torch.float64)) * 255.0
    mse = (diff**2).flatten(1).mean(dim=1)
    out = 10.0 * torch.log10(255.0**2 / mse)
    return torch.where(mse == 0, torch.full_like(out, math.inf), out)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def quick_eval(bundle: ModelBundle, dataset: ImageDataset, seed: int, batch_size: int = 32) -> dict:
    """No-attack bit accuracy and mean PSNR."""
    bundle.eval()
    rng = make_rng(seed)
    m = sample_messages(rng, len(dataset), bundle.arch.message_length)
    accs, psnrs = [], []
    with torch.no_grad():
        for sl in _batches(len(dataset), batch_size):
            x = dataset.images[sl]
            x_wm = bundle.encoder(x, m[sl])
            accs.append(per_image_bit_accuracy(m[sl], bundle.decoder(x_wm)))
            psnrs.append(psnr(x, x_wm))
    return {"bit_accuracy": torch.cat(accs).mean().item(), "psnr": _finite_mean(torch.cat(psnrs))}


def _finite_mean(values: torch.Tensor) -> float:
    finite = values[torch.isfinite(values)]
    return finite.mean().item() if finite.numel() else math.inf


@dataclass(frozen=True)
class SweepRow:
    attack: str
    severity: Optional[float]
    mean: float
    std: float
    n: int


@dataclass
class SweepTable:
    model_id: str
    seed: int
    rows: list[SweepRow]
    psnr_mean: float = math.nan
    trained_severities: dict = field(default_factory=dict)

    def accuracy(self, attack: str, severity) -> float:
        for r in self.rows:
            if r.attack == attack and r.severity == severity:
                return r.mean
        raise KeyError((attack, severity))

    def attacks(self) -> list[str]:
        return list(dict.fromkeys(r.attack for r in self.rows))

    def rows_for(self, attack: str) -> list[SweepRow]:
        return [r for r in self.rows if r.attack == attack]

    def keys(self) -> list[tuple]:
        return [(r.attack, r.severity) for r in self.rows]


def severity_sweep(bundle: ModelBundle, dataset: ImageDataset, attack_list: Sequence[AttackSpec],
                   seed: int, true_jpeg: bool = False, batch_size: int = 32,
                   model_id: str = "model", trained_severities: Optional[dict] = None) -> SweepTable:
    """Bit accuracy over the dataset for every (attack, severity), identity first.

    Messages are drawn once per image from the evaluation seed; each (batch, attack)
    gets one random draw shared by all its severities. Rows are ordered by attack
    as given, then severity ascending.
    """
    if len(dataset) == 0:
        raise ContractError("empty evaluation dataset")
    if bundle.arch.message_length < 1:
        raise ContractError("invalid model bundle")
    plan = [AttackSpec("identity")] + [a for a in attack_list if a.kind != "identity"]
    keyed = []
    for a in plan:
        values = sorted(a.search_values(), key=lambda v: -math.inf if v is None else v)
        keyed.append((a.kind, a, values))
        if true_jpeg and a.kind == "jpeg":
            keyed.append((CODEC_JPEG, a, values))

    bundle.eval()
    rng = make_rng(seed)
    messages = sample_messages(rng, len(dataset), bundle.arch.message_length)
    per_image = {(name, s): [] for name, _, values in keyed for s in values}
    psnrs = []
    with torch.no_grad():
        for sl in _batches(len(dataset), batch_size):
            x, m = dataset.images[sl], messages[sl]
            x_wm = bundle.encoder(x, m)
            psnrs.append(psnr(x, x_wm))
            for name, a, values in keyed:
                draw = draw_seed(rng)
                for s in values:
                    if name == CODEC_JPEG:
                        attacked = atk.jpeg_codec(x_wm, s)
                    else:
                        attacked = atk.apply(a, x_wm, x, s, make_rng(draw))
                    per_image[(name, s)].append(per_image_bit_accuracy(m, bundle.decoder(attacked)))
    rows = []
    for name, _, values in keyed:
        for s in values:
            acc = torch.cat(per_image[(name, s)])
            rows.append(SweepRow(name, s, acc.mean().item(), acc.std(unbiased=False).item(), acc.numel()))
    return SweepTable(model_id, seed, rows, _finite_mean(torch.cat(psnrs)), dict(trained_severities or {}))


def _fmt(v) -> str:
    if v is None:
        return "-"
    return repr(float(v))


def format_sweep_table(table: SweepTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in table.rows:
        w.writerow([table.model_id, r.attack, _fmt(r.severity), _fmt(r.mean), _fmt(r.std), r.n])
    return buf.getvalue()


def write_sweep_table(table: SweepTable, path) -> None:
    Path(path).write_text(format_sweep_table(table))


def read_sweep_table(path, seed: int = -1) -> SweepTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        rows, model_id = [], None
        for rec in reader:
            model_id = rec["model_id"]
            sev = None if rec["severity"] == "-" else float(rec["severity"])
            rows.append(SweepRow(rec["attack"], sev, float(rec["bit_acc_mean"]),
                                 float(rec["bit_acc_std"]), int(rec["n"])))
    return SweepTable(model_id or Path(path).stem, seed, rows)


def compare_models(tables: Sequence[SweepTable]) -> dict:
    """Per-point accuracy deltas against the first table, worst-case accuracy per attack,
    and the gap between trained-on and held-out severities where those are known."""
    if not tables:
        raise ContractError("nothing to compare")
    keys = tables[0].keys()
    for t in tables[1:]:
        if t.keys() != keys:
            raise ContractError(f"sweep grids of {t.model_id!r} and {tables[0].model_id!r} differ")
    ids = [t.model_id for t in tables]
    ref = tables[0]
    points = []
    for attack, s in keys:
        acc = {t.model_id: t.accuracy(attack, s) for t in tables}
        points.append({
            "attack": attack,
            "severity": s,
            "accuracy": acc,
            "delta_vs_" + ref.model_id: {k: v - acc[ref.model_id] for k, v in acc.items()},
        })
    worst = {}
    for attack in ref.attacks():
        mins = {t.model_id: min(r.mean for r in t.rows_for(attack)) for t in tables}
        best = max(mins.values())
        worst[attack] = {"min_accuracy": mins, "most_robust": [k for k, v in mins.items() if v == best]}
    overfit = {}
    for t in tables:
        per_attack = {}
        for attack, trained in t.trained_severities.items():
            rows = [r for r in t.rows_for(attack)]
            on = [r.mean for r in rows if r.severity in trained]
            off = [r.mean for r in rows if r.severity not in trained]
            if on and off:
                per_attack[attack] = {
                    "trained_mean": float(np.mean(on)),
                    "held_out_mean": float(np.mean(off)),
                    "gap": float(np.mean(on) - np.mean(off)),
                }
        if per_attack:
            overfit[t.model_id] = per_attack
    return {"models": ids, "reference": ref.model_id, "points": points,
            "worst_case": worst, "overfitting": overfit,
            "psnr_mean": {t.model_id: t.psnr_mean for t in tables}}


def plot_sweeps(tables: Sequence[SweepTable], out_dir) -> list[Path]:
    """One accuracy-vs-severity figure per attack, every model as a line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for attack in tables[0].attacks():
        if attack == "identity":
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        for t in tables:
            rows = t.rows_for(attack)
            ax.plot([r.severity for r in rows], [r.mean for r in rows], marker="o", label=t.model_id)
        ax.set_xlabel("severity")
        ax.set_ylabel("bit accuracy")
        ax.set_title(attack)
        ax.set_ylim(0.0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"sweep_{attack}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
