import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from volblend import fitting as vf
from volblend import lhm as vl


@pytest.fixture(scope="session")
def template_level0():
    return vl.generate_synthetic_template(vl.TemplateSpec(level=0))


@pytest.fixture(scope="session")
def massaged_level0(template_level0):
    return vl.massage_layers(template_level0)


@pytest.fixture(scope="session")
def tissue_level0(massaged_level0):
    return vl.build_tissue_meshes(massaged_level0)


@pytest.fixture(scope="session")
def paired_data_level0(tissue_level0):
    rng = np.random.default_rng(77)
    return vf.synthetic_paired_dataset(tissue_level0, 12, rng, level=0)


@pytest.fixture(scope="session")
def regressor_level0(paired_data_level0):
    wraps, dists = paired_data_level0
    return vf.train_distance_regressor(wraps, dists, k_in=8, k_out=8)
