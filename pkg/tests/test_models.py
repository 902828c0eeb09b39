import dataclasses

import numpy as np
import pytest
import torch

from helpers import MICRO_ARCH, parameter_fd_check
from robustmark.config import ArchConfig
from robustmark.core import CheckpointFormatError, ContractError, make_rng
from robustmark.models import (
    init_models,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)


def block(cin, cout):
    return cin * cout * 9 + cout + 2 * cout  # conv weight + bias + BN scale/shift


def parameter_count_formula(a: ArchConfig) -> dict:
    c, L = a.channels, a.message_length
    enc = block(3, c) + (a.encoder_blocks - 1) * block(c, c)
    cin = c + L + 3
    for _ in range(a.encoder_post_blocks):
        enc += block(cin, c)
        cin = c
    enc += cin * 3 + 3
    dec = block(3, c) + (a.decoder_blocks - 1) * block(c, c) + c * L + L
    disc = block(3, c) + (a.discriminator_blocks - 1) * block(c, c) + c + 1
    return {"encoder": enc, "decoder": dec, "discriminator": disc}


def test_same_seed_same_parameters():
    a = init_models(MICRO_ARCH, make_rng(3))
    b = init_models(MICRO_ARCH, make_rng(3))
    c = init_models(MICRO_ARCH, make_rng(4))
    for name, net in a.networks().items():
        for (k, p), q, r in zip(net.state_dict().items(), b.networks()[name].state_dict().values(),
                                c.networks()[name].state_dict().values()):
            assert torch.equal(p, q), k
    assert not torch.equal(a.encoder.to_image.weight, c.encoder.to_image.weight)


@pytest.mark.parametrize("arch", [ArchConfig(), MICRO_ARCH])
def test_parameter_count_matches_formula(arch):
    assert init_models(arch, make_rng(0)).parameter_count() == parameter_count_formula(arch)


def test_default_decoder_width_is_message_length():
    bundle = init_models(ArchConfig(), make_rng(0))
    assert bundle.decoder.linear.out_features == 30


def test_encoder_contract():
    bundle = init_models(MICRO_ARCH, make_rng(0))
    x = torch.rand(3, 3, 16, 24)
    m = torch.randint(0, 2, (3, 4)).float()
    out = bundle.encoder(x, m)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ContractError):
        bundle.encoder(x, torch.zeros(3, 5))
    with pytest.raises(ContractError):
        bundle.encoder(x, torch.zeros(2, 4))


def test_different_messages_give_different_images():
    bundle = init_models(ArchConfig(message_length=30, channels=16), make_rng(0)).eval()
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    m1 = torch.zeros(1, 30)
    m2 = torch.ones(1, 30)
    with torch.no_grad():
        diff = (bundle.encoder(x, m1) - bundle.encoder(x, m2)).norm()
    assert diff > 0


def test_decoder_accepts_variable_sizes():
    bundle = init_models(ArchConfig(channels=8), make_rng(0)).eval()
    with torch.no_grad():
        assert bundle.decoder(torch.rand(2, 3, 128, 128)).shape == (2, 30)
        assert bundle.decoder(torch.rand(2, 3, 64, 64)).shape == (2, 30)
        assert torch.isfinite(bundle.decoder(torch.zeros(1, 3, 32, 32))).all()
    with pytest.raises(ContractError):
        bundle.decoder(torch.rand(1, 3, 4, 4))


def test_discriminator_range_and_determinism():
    bundle = init_models(MICRO_ARCH, make_rng(0)).eval()
    x = torch.rand(4, 3, 16, 16)
    with torch.no_grad():
        a, b = bundle.discriminator(x), bundle.discriminator(x)
    assert a.shape == (4,)
    assert ((a > 0) & (a < 1)).all()
    assert torch.equal(a, b)


def test_forward_is_deterministic():
    outs = []
    for _ in range(2):
        bundle = init_models(MICRO_ARCH, make_rng(9))
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        m = torch.tensor([[0.0, 1, 1, 0], [1, 0, 0, 1]])
        outs.append(bundle.decoder(bundle.encoder(x, m)).detach())
    assert torch.equal(outs[0], outs[1])


# --- parameter gradients vs finite differences (8x8 images, L=4) --------------------

def micro_instance():
    bundle = init_models(MICRO_ARCH, make_rng(21)).to(torch.float64).train()
    g = torch.Generator().manual_seed(5)
    x = 0.3 + 0.4 * torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    m = torch.tensor([[0.0, 1, 1, 0], [1, 0, 1, 1]], dtype=torch.float64)
    return bundle, x, m, g


def test_encoder_parameter_gradients():
    bundle, x, m, g = micro_instance()
    with torch.no_grad():
        base = bundle.encoder(x, m, clamp=False)
    # pixels near the clamp boundary use the pass-through gradient; keep them out of the loss
    interior = ((base > 0.02) & (base < 0.98)).to(x.dtype)
    assert interior.mean() > 0.5
    w = torch.randn(base.shape, generator=g, dtype=x.dtype) * interior
    err, a, n = parameter_fd_check(bundle.encoder, lambda: (w * bundle.encoder(x, m)).sum())
    assert err <= 1e-2, (a, n)


def test_decoder_parameter_gradients():
    bundle, x, m, g = micro_instance()
    w = torch.randn(2, 4, generator=g, dtype=x.dtype)
    err, a, n = parameter_fd_check(bundle.decoder, lambda: (w * bundle.decoder(x)).sum())
    assert err <= 1e-2, (a, n)


def test_discriminator_parameter_gradients():
    bundle, x, m, g = micro_instance()
    w = torch.randn(2, generator=g, dtype=x.dtype)
    err, a, n = parameter_fd_check(bundle.discriminator, lambda: (w * bundle.discriminator(x)).sum())
    assert err <= 1e-2, (a, n)


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    bundle = init_models(MICRO_ARCH, make_rng(2), seed=2)
    bundle.step = 17
    bundle.config_snapshot = {"training": {"seed": 2}}
    # move running statistics off their defaults
    bundle.train()
    bundle.decoder(torch.rand(4, 3, 16, 16))
    bundle.eval()
    path = tmp_path / "ck.npz"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert loaded.step == 17 and loaded.seed == 2
    assert loaded.arch == MICRO_ARCH
    x = torch.rand(2, 3, 16, 16)
    m = torch.tensor([[0.0, 1, 0, 1], [1, 1, 0, 0]])
    with torch.no_grad():
        assert torch.equal(bundle.encoder(x, m), loaded.encoder(x, m))
        assert torch.equal(bundle.decoder(x), loaded.decoder(x))
        assert torch.equal(bundle.discriminator(x), loaded.discriminator(x))
    manifest = read_manifest(path)
    assert manifest["version"] == 1
    assert manifest["arch"] == dataclasses.asdict(MICRO_ARCH)
    assert manifest["config"] == {"training": {"seed": 2}}


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_wrong_version(tmp_path):
    import json
    bundle = init_models(MICRO_ARCH, make_rng(0))
    p = tmp_path / "ck.npz"
    save_checkpoint(bundle, p)
    data = dict(np.load(p))
    manifest = json.loads(data["__manifest__"].tobytes())
    manifest["version"] = 99
    data["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    np.savez(p, **data)
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(p)
