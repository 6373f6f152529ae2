import numpy as np
import pytest
import torch

from flavars.datapipe.records import Dataset, DatasetManifest, write_dataset
from flavars.datapipe.selection import generate_splits
from flavars.datapipe.synthetic import make_synthetic_records
from flavars.encoders import FusionConfig, LocationConfig, TextConfig, VisionConfig
from flavars.model import ModelConfig

torch.set_num_threads(1)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        vision=VisionConfig(image_size=32, patch_size=8, width=16, depth=1, heads=2, proj_dim=8, mlp_ratio=2),
        text=TextConfig(vocab_size=40, max_len=10, width=16, depth=1, heads=2, proj_dim=8, mlp_ratio=2),
        fusion=FusionConfig(width=16, depth=1, heads=2, mlp_ratio=2),
        location=LocationConfig(max_degree=2, hidden_width=16, hidden_depth=1, proj_dim=8),
        codebook_size=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def synth_records():
    return make_synthetic_records(48, seed=3)


@pytest.fixture(scope="session")
def synth_dataset(synth_records):
    return Dataset(DatasetManifest(1, (32, 32, 3), len(synth_records)), synth_records)


@pytest.fixture(scope="session")
def synth_split(synth_records):
    return generate_splits([r.id for r in synth_records], 0, (0.5, 0.25, 0.25))


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, synth_records):
    root = tmp_path_factory.mktemp("synth")
    write_dataset(root, synth_records)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
