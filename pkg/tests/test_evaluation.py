import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import MICRO_ARCH
from robustmark.config import TRAINING_GRIDS
from robustmark.core import AttackSpec, ContractError, make_rng
from robustmark.evaluation import (
    SweepRow,
    SweepTable,
    bit_accuracy,
    compare_models,
    format_sweep_table,
    plot_sweeps,
    psnr,
    read_sweep_table,
    severity_sweep,
    write_sweep_table,
)
from robustmark.ingest import ImageDataset
from robustmark.models import init_models


def brute_bit_accuracy(m, d):
    hits = total = 0
    for row_m, row_d in zip(m.tolist(), d.tolist()):
        for bit, val in zip(row_m, row_d):
            decided = 1 if val >= 0.5 else 0
            hits += int(decided == int(bit))
            total += 1
    return hits / total


def brute_psnr(x, y):
    out = []
    for a, b in zip(x.tolist(), y.tolist()):
        flat_a = np.ravel(a)
        flat_b = np.ravel(b)
        se = 0.0
        for u, v in zip(flat_a, flat_b):
            se += (u * 255.0 - v * 255.0) ** 2
        mse = se / len(flat_a)
        out.append(math.inf if mse == 0 else 10 * math.log10(255.0**2 / mse))
    return out


def test_bit_accuracy_examples():
    m = torch.randint(0, 2, (4, 30), generator=torch.Generator().manual_seed(0)).float()
    assert bit_accuracy(m, m) == 1.0
    assert bit_accuracy(m, 1 - m) == 0.0
    d = m.clone()
    d[:, :15] = 1 - d[:, :15]
    assert bit_accuracy(m, d) == 0.5
    with pytest.raises(ContractError):
        bit_accuracy(m, d[:, :29])


def test_psnr_examples():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert torch.isinf(psnr(x, x)).all()
    y = torch.full((1, 3, 8, 8), 0.5, dtype=torch.float64)
    value = psnr(y, y + 1 / 255).item()
    assert abs(value - 20 * math.log10(255)) <= 0.01
    assert abs(value - 48.13) <= 0.01
    with pytest.raises(ContractError):
        psnr(x, x[:, :, :8])


def test_metrics_match_brute_force():
    g = torch.Generator().manual_seed(42)
    for _ in range(100):
        b, L = int(torch.randint(1, 5, (1,), generator=g)), int(torch.randint(1, 40, (1,), generator=g))
        m = torch.randint(0, 2, (b, L), generator=g).float()
        d = torch.randn(b, L, generator=g, dtype=torch.float64) * 0.7 + 0.5
        assert bit_accuracy(m, d) == pytest.approx(brute_bit_accuracy(m, d), rel=1e-9)
        x = torch.rand(b, 3, 4, 4, generator=g, dtype=torch.float64)
        y = (x + 0.05 * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
        assert psnr(x, y).tolist() == pytest.approx(brute_psnr(x, y), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), L=st.integers(1, 40))
def test_bit_accuracy_permutation_invariant(seed, L):
    g = torch.Generator().manual_seed(seed)
    m = torch.randint(0, 2, (3, L), generator=g).float()
    d = torch.rand(3, L, generator=g)
    perm = torch.randperm(L, generator=g)
    assert bit_accuracy(m, d) == bit_accuracy(m[:, perm], d[:, perm])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), a1=st.floats(0.001, 0.05), a2=st.floats(0.001, 0.05))
def test_psnr_symmetric_and_decreasing(seed, a1, a2):
    g = torch.Generator().manual_seed(seed)
    x = 0.2 + 0.6 * torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    noise = torch.randn(x.shape, generator=g, dtype=torch.float64).clamp(-3, 3)
    y1 = x + a1 * noise / 3
    assert torch.allclose(psnr(x, y1), psnr(y1, x))
    if abs(a1 - a2) > 1e-6:
        y2 = x + a2 * noise / 3
        lo, hi = (y1, y2) if a1 < a2 else (y2, y1)
        assert (psnr(x, lo) > psnr(x, hi)).all()


# --- sweeps -----------------------------------------------------------------------

def dataset(n=6, size=64):
    g = torch.Generator().manual_seed(3)
    return ImageDataset(tuple(map(str, range(n))), torch.rand(n, 3, size, size, generator=g), "test", (size, size))


def test_sweep_rows_and_determinism():
    bundle = init_models(MICRO_ARCH, make_rng(0))
    crop = AttackSpec("crop", TRAINING_GRIDS["crop"])
    a = severity_sweep(bundle, dataset(), [crop], seed=5, batch_size=4)
    b = severity_sweep(bundle, dataset(), [crop], seed=5, batch_size=4)
    assert [r.attack for r in a.rows] == ["identity"] + ["crop"] * 8
    assert [r.severity for r in a.rows[1:]] == TRAINING_GRIDS["crop"].values()
    assert format_sweep_table(a) == format_sweep_table(b)
    assert all(0 <= r.mean <= 1 and r.n == 6 for r in a.rows)


def test_sweep_with_codec_jpeg():
    bundle = init_models(MICRO_ARCH, make_rng(0))
    jpeg = AttackSpec("jpeg", TRAINING_GRIDS["jpeg"])
    t = severity_sweep(bundle, dataset(n=2, size=32), [jpeg], seed=1, true_jpeg=True)
    assert t.attacks() == ["identity", "jpeg", "jpeg_codec"]
    assert len(t.rows_for("jpeg_codec")) == 6


def test_sweep_rejects_empty_dataset():
    bundle = init_models(MICRO_ARCH, make_rng(0))
    empty = ImageDataset((), torch.zeros(0, 3, 32, 32), "test", (32, 32))
    with pytest.raises(ContractError):
        severity_sweep(bundle, empty, [], seed=0)


def table(model_id, accs, trained=None):
    rows = [SweepRow("identity", None, 1.0, 0.0, 10)]
    rows += [SweepRow("crop", s, a, 0.1, 10) for s, a in zip([0.1, 0.2, 0.3], accs)]
    return SweepTable(model_id, 0, rows, 30.0, trained or {})


def test_sweep_file_round_trip(tmp_path):
    t = table("m", [0.6, 0.7, 0.8])
    write_sweep_table(t, tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text()
    assert text.splitlines()[0] == "model_id,attack,severity,bit_acc_mean,bit_acc_std,n"
    back = read_sweep_table(tmp_path / "t.csv")
    assert back.rows == t.rows


def test_compare_to_self_is_zero():
    t = table("a", [0.6, 0.7, 0.8])
    report = compare_models([t, t])
    for p in report["points"]:
        assert all(v == 0 for v in p["delta_vs_a"].values())


def test_compare_worst_case_and_overfitting():
    robust = table("robust", [0.7, 0.72, 0.75], {"crop": [0.1, 0.2, 0.3]})
    baseline = table("baseline", [0.55, 0.7, 0.9], {"crop": [0.3]})
    report = compare_models([baseline, robust])
    assert report["worst_case"]["crop"]["min_accuracy"] == {"baseline": 0.55, "robust": 0.7}
    assert report["worst_case"]["crop"]["most_robust"] == ["robust"]
    gap = report["overfitting"]["baseline"]["crop"]
    assert gap["trained_mean"] == 0.9
    assert gap["held_out_mean"] == pytest.approx(0.625)
    assert "robust" not in report["overfitting"]  # no held-out severities


def test_compare_mismatched_grids():
    a = table("a", [0.6, 0.7, 0.8])
    b = SweepTable("b", 0, a.rows[:-1], 30.0)
    with pytest.raises(ContractError):
        compare_models([a, b])


def test_plots_one_file_per_attack(tmp_path):
    files = plot_sweeps([table("a", [0.6, 0.7, 0.8]), table("b", [0.5, 0.7, 0.9])], tmp_path)
    assert [f.name for f in files] == ["sweep_crop.png"]
    assert files[0].stat().st_size > 0
