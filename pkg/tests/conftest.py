import numpy as np
import pytest
import torch

from awnet.model import ModelConfig
from awnet.synthetic import write_synthetic_dataset


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory):
    """Phantom DRIVE tree with 2 training and 2 test images."""
    root = tmp_path_factory.mktemp("data")
    write_synthetic_dataset(root, "DRIVE", n_train=2, n_test=2, seed=0)
    return root


@pytest.fixture(scope="session")
def chase_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("chase")
    write_synthetic_dataset(root, "CHASE", n_train=1, n_test=1, seed=3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(levels=3, base_channels=2, dropout_rate=0.0)


def randomize_batchnorm(model, seed=0):
    """Give every BatchNorm non-trivial running statistics and affine terms."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.running_mean.copy_(torch.randn(m.num_features, generator=g) * 0.1)
                m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
                m.weight.copy_(torch.rand(m.num_features, generator=g) + 0.5)
                m.bias.copy_(torch.randn(m.num_features, generator=g) * 0.1)
    return model


# acceptance criteria record one line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
