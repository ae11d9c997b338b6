from __future__ import annotations

import numpy as np
import pytest
import torch

from cxrpy.backend import stub_backend
from cxrpy.head import HeadConfig, build_head
from cxrpy.imaging import XrayDataset
from cxrpy.synthetic import make_fixture
from cxrpy.testsuite.helpers import two_class_toy

np.seterr(all="warn")


@pytest.fixture
def backend():
    return stub_backend(seed=7, embed_dim=32, n_blocks=4)


@pytest.fixture
def head(backend):
    return build_head(HeadConfig(in_dim=backend.embed_dim), init_seed=7)


@pytest.fixture
def toy_sets():
    train, source = two_class_toy(24, seed=0)
    val, val_source = two_class_toy(12, seed=1)
    return XrayDataset(train, source), XrayDataset(val, val_source)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    make_fixture(root, n_images=64, seed=7)
    return root


@pytest.fixture
def images():
    gen = torch.Generator().manual_seed(3)
    return torch.randn(4, 3, 224, 224, generator=gen)
