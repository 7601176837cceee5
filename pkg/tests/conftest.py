import numpy as np
import pytest
import torch
from hypothesis import settings

from dpmkit.backbone import BackboneConfig, VisionBackbone
from dpmkit.config import Config
from dpmkit.data import SyntheticSpec, render_synthetic

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def small_bc():
    return BackboneConfig(image_height=16, image_width=16, patch_size=8, patch_stride=8,
                          embed_dim=16, projected_dim=8, num_layers=2, num_heads=2, num_cameras=3)


@pytest.fixture
def small_backbone(small_bc):
    torch.manual_seed(0)
    return VisionBackbone(small_bc).double()


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(num_identities=6, images_per_identity=4, num_test_identities=3, seed=3)
    return render_synthetic(spec)


@pytest.fixture
def tiny_config():
    cfg = Config.toy()
    t = cfg.train
    t.prompt_epochs, t.sps_epochs, t.dpm_epochs = 2, 2, 2
    return cfg


def rand_images(n, h=16, w=16, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, h, w, generator=g, dtype=dtype) * 2 - 1)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
