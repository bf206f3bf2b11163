import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from hazegan.networks import VGGFeatureExtractor, write_random_vgg16  # noqa: E402
from hazegan.training import TrainConfig  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vgg_path(tmp_path_factory):
    return write_random_vgg16(tmp_path_factory.mktemp("vgg") / "vgg16.pth", seed=0)


@pytest.fixture(scope="session")
def fx(vgg_path):
    return VGGFeatureExtractor(vgg_path)


@pytest.fixture(scope="session")
def fx64(vgg_path):
    return VGGFeatureExtractor(vgg_path).double()


@pytest.fixture
def tiny_cfg(vgg_path):
    """Small enough for a train step in well under a second."""
    return TrainConfig(
        epochs_total=4,
        epochs_constant=2,
        crop=64,
        local_patches=2,
        local_patch_size=32,
        gen_width=4,
        disc_width=4,
        n_res_blocks=2,
        pool_size=3,
        vgg_weights=str(vgg_path),
        seed=3,
    )


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {detail}")
