import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from distilldet import data, nets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_student_cfg():
    """Small student for fast net-level tests."""
    return nets.NetConfig(
        widths=(4, 8, 8, 16), blocks=(1, 1, 1, 1), pyramid_width=8,
        role="student", head_hidden=16, logit_width=16,
        pre_nms_k=60, post_nms_k=12,
    )


@pytest.fixture(scope="session")
def tiny_teacher_cfg():
    return nets.NetConfig(
        widths=(8, 16, 16, 32), blocks=(2, 2, 2, 2), pyramid_width=8,
        role="teacher", head_hidden=32, logit_width=16,
        pre_nms_k=60, post_nms_k=12,
    )


@pytest.fixture(scope="session")
def tiny_scenes():
    """A handful of 64x96 scenes shared across training tests."""
    params = data.SceneParams(n_train=6, n_test=3, image_height=64, image_width=96)
    return data.generate_dataset(params, seed=7)
