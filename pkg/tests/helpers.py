import numpy as np
import torch

from robustmark import attacks as atk
from robustmark.config import ArchConfig

MICRO_ARCH = ArchConfig(
    message_length=4,
    channels=6,
    encoder_blocks=2,
    encoder_post_blocks=1,
    decoder_blocks=3,
    decoder_downsample=0,
    discriminator_blocks=2,
)


def max_relative_error(analytic, numeric, mask=None, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.max()) if err.size else 0.0


def input_fd_gradient(fn, x, eps=1e-3):
    """Central finite differences of scalar ``fn`` with respect to every entry of ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn(x).item()
            flat[i] = old - eps
            down = fn(x).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def parameter_fd_check(module, loss_fn, n_params=20, eps=1e-6, seed=0):
    """Compare autograd and central differences at ``n_params`` random scalar parameters."""
    params = [p for p in module.parameters()]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    gen = np.random.default_rng(seed)
    picks = gen.choice(total, size=min(n_params, total), replace=False)
    analytic, numeric = [], []
    offsets = np.cumsum([0] + sizes)
    for flat_idx in picks:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p, local = params[k], int(flat_idx - offsets[k])
        analytic.append(p.grad.view(-1)[local].item())
        with torch.no_grad():
            old = p.view(-1)[local].item()
            p.view(-1)[local] = old + eps
            up = loss_fn().item()
            p.view(-1)[local] = old - eps
            down = loss_fn().item()
            p.view(-1)[local] = old
        numeric.append((up - down) / (2 * eps))
    return max_relative_error(analytic, numeric, floor=1e-7), analytic, numeric


# (kind, image side, severities); crop needs 16x16 since its smallest output side is 8
GRAD_CASES = [
    ("cropout", 8, [0.3, 0.6, 0.9]),
    ("dropout", 8, [0.3, 0.6, 0.9]),
    ("gaussian_blur", 8, [1.0, 2.0, 3.0]),
    ("jpeg", 8, [50.0, 70.0, 90.0]),
    ("crop", 16, [0.3, 0.5, 0.8]),
]


def clamp_safe_mask(kind, x, s, margin=1e-2):
    """Input pixels whose 8x8 block has no JPEG output near the clamp boundary."""
    if kind != "jpeg":
        return torch.ones_like(x, dtype=torch.bool)
    b, c, h, w = x.shape
    d = torch.as_tensor(atk.dct_matrix(8), dtype=x.dtype)
    keep = torch.as_tensor(atk.zigzag_indices(8) < atk.jpeg_kept_coefficients(s), dtype=x.dtype)
    blocks = x.reshape(b, c, h // 8, 8, w // 8, 8)
    coef = torch.einsum("ui,bchiwj,vj->bchuwv", d, blocks, d) * keep.view(1, 1, 1, 8, 1, 8)
    raw = torch.einsum("ui,bchuwv,vj->bchiwj", d, coef, d)
    near = ((raw < margin) | (raw > 1 - margin)).any(dim=3, keepdim=True).any(dim=5, keepdim=True)
    return (~near).expand_as(raw).reshape(x.shape)


# one "PASS/FAIL <criterion>: <detail>" line per acceptance criterion, printed at session end
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} [{number}] {name}: {detail}")
    return passed
