import numpy as np
import pytest
import torch

from diffinspect.data import synth_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """15 images, 3 per class, 64px, with a 5-image validation split."""
    return synth_dataset({
        "count": 15, "class_mix": [0.2] * 5, "image_size": 64,
        "seed": 99, "val_fraction": 1 / 3,
    })


@pytest.fixture(scope="session")
def table1_dataset():
    """Synthetic stand-in with the reference per-class training counts
    (240, 240, 80, 160, 200), one annotation per image, all in train."""
    mix = np.array([240, 240, 80, 160, 200], dtype=float) / 920
    return synth_dataset({
        "count": 920, "class_mix": mix.tolist(), "image_size": 32, "seed": 5,
    })
