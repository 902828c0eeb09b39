import numpy as np
import pytest
import torch
from PIL import Image

from helpers import ACCEPTANCE_LINES

torch.set_num_threads(1)


@pytest.fixture
def image_dir(tmp_path):
    """Ten small random RGB files named img00.png .. img09.png."""
    gen = np.random.default_rng(0)
    d = tmp_path / "images"
    d.mkdir()
    for i in range(10):
        arr = gen.integers(0, 256, size=(40 + i, 48, 3), dtype=np.uint8)
        Image.fromarray(arr).save(d / f"img{i:02d}.png")
    return d


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
