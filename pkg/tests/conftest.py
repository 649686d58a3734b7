import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from repsf.backbone import BackboneConfig
from repsf.fusion import FusionConfig
from repsf.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


def tiny_model_config(seed: int = 3) -> ModelConfig:
    """Small model used wherever the full default would be wasteful."""
    return ModelConfig(
        backbone=BackboneConfig(
            stem_out_ch=8,
            stage_channels=(8, 8, 16, 16),
            stage_depths=(1, 1, 1, 1),
            seed=seed,
        ),
        fusion=FusionConfig(aspp_branch_ch=8, aspp_out_ch=16, head_ch=8, can_reduction=8),
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()
