from pathlib import Path

import pytest

from gccpm.augment import AugmentConfig
from gccpm.codec import CodecConfig
from gccpm.data import SynthConfig
from gccpm.model import AsppConfig, ContextConfig, ModelConfig, PyramidPoolingConfig, UShapedConfig
from gccpm.tensor import precision

TEST_DIR = Path(__file__).parent.resolve()
STATIC_DIR = TEST_DIR / "static"

TINY_INPUT = 64


def tiny_context(kind: str = "none", placement: str = "stage_input") -> ContextConfig:
    """Context settings sized for the 8×8 heatmaps of the tiny model."""
    return ContextConfig(
        kind=kind,
        placement=placement,
        aspp=AsppConfig(mid_channels=16, rates=[1, 2]),
        ppm=PyramidPoolingConfig(level_divisors=[2, 4, 8], branch_channels=8),
        u_shaped=UShapedConfig(depth=2, channels=[16, 16, 24]),
    )


def tiny_model_config(kind: str = "none", stages: int = 1, **kwargs) -> ModelConfig:
    """A network small enough to train in a test."""
    params = dict(
        input_size=TINY_INPUT,
        output_stride=8,
        backbone_width=0.25,
        feature_channels=16,
        head_channels=32,
        num_refinement_stages=stages,
        context=tiny_context(kind),
    )
    params.update(kwargs)
    return ModelConfig(**params)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_codec():
    return CodecConfig(heatmap_size=8, output_stride=8)


@pytest.fixture
def tiny_augment():
    return AugmentConfig(input_size=TINY_INPUT)


@pytest.fixture
def tiny_synth():
    return SynthConfig(image_size=TINY_INPUT, limb_thickness=[2, 3])


@pytest.fixture
def float64():
    with precision("float64"):
        yield
