import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fsnet.config import ArchitectureConfig, Config, PrepareConfig, TrainConfig  # noqa: E402
from fsnet.dataset_prep import load_dataset, prepare_dataset  # noqa: E402
from fsnet.synthetic import generate_synthetic_corpus  # noqa: E402

torch.set_num_threads(1)


def micro_arch(image_size=8, **kw) -> ArchitectureConfig:
    """Smallest legal network: 2-4 channels per layer, three resolution levels."""
    base = dict(
        image_size=image_size,
        d_f=4,
        d_l=2,
        encoder_channels=(2, 4, 4),
        decoder_channels=(4, 4, 2),
        generator_channels=(2, 4, 4, 4),
        global_disc_channels=(2, 4, 4),
        patch_disc_channels=(2, 4, 4),
        identity_channels=(2, 4, 4),
        identity_dim=4,
        classifier_hidden=(4,),
    )
    base.update(kw)
    return ArchitectureConfig(**base)


def small_arch(image_size=32) -> ArchitectureConfig:
    return ArchitectureConfig.desk(image_size)


@pytest.fixture(scope="session")
def raw_corpus(tmp_path_factory):
    """5 identities x 4 images plus one faceless image, source resolution."""
    out = tmp_path_factory.mktemp("raw")
    generate_synthetic_corpus(5, 4, seed=7, out_dir=out, n_faceless=1)
    return out


@pytest.fixture(scope="session")
def prepared32(raw_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep32")
    prepare_dataset(raw_corpus, out, PrepareConfig(image_size=32, test_fraction=0.0))
    return load_dataset(out)


@pytest.fixture(scope="session")
def toy4(tmp_path_factory):
    """The 4-image, 2-identity overfit corpus at 64x64."""
    from fsnet.experiments import toy_records

    return toy_records(tmp_path_factory.mktemp("toy4"))


def random_records(n_ids, per_id, size, seed=0):
    from fsnet.dataset_prep import FaceRecord

    rng = np.random.default_rng(seed)
    recs = []
    for k in range(n_ids):
        for j in range(per_id):
            face = np.zeros((size, size), np.float32)
            face[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
            recs.append(
                FaceRecord(
                    image=rng.random((size, size, 3)).astype(np.float32),
                    face_mask=face,
                    landmark_image=(rng.random((size, size)) > 0.8).astype(np.float32),
                    foreground_mask=(rng.random((size, size)) > 0.3).astype(np.float32),
                    identity_label=k,
                    name=f"r{k}_{j}",
                )
            )
    return recs


def train_config(arch, **train_kw) -> Config:
    kw = dict(per_role_batch=1, checkpoint_interval=10**6)
    kw.update(train_kw)
    return Config(arch=arch, train=TrainConfig(**kw))
