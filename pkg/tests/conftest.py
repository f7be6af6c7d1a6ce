import numpy as np
import pytest
from hypothesis import settings

from maskmix.core import Image, LabeledSample, RandomSource, SoftLabel

# property tests share the box with training runs; wall-clock deadlines flake
settings.register_profile("maskmix", deadline=None)
settings.load_profile("maskmix")


def make_samples(rng: RandomSource, count: int, num_classes: int = 4, size: int = 16,
                 channels: int = 1) -> list[LabeledSample]:
    """Random labeled samples cycling through the classes."""
    out = []
    for i in range(count):
        img = rng.uniform(size=(size, size, channels)).astype(np.float32)
        out.append(LabeledSample(Image(img), SoftLabel.one_hot(i % num_classes, num_classes), f"s{i}"))
    return out


@pytest.fixture
def rng():
    return RandomSource(1234)
