import numpy as np
import pytest

from aloop.config import parse_run_config
from aloop.simlab import SyntheticSpec, generate_synthetic

SMALL_CFG = """
ACTIVE_LEARNING:
  strategy: {strategy}
  seed_size: {seed_size}
  query_size: {query_size}
  rounds: {rounds}
  mc_passes: 4
  rng_seed: {rng_seed}
MODEL:
  TRUNK:
    NAME: unet
    UNET:
      n_channels: 1
      base_channels: 8
      dropout: 0.5
DATA:
  TRAIN:
    BATCHSIZE_PER_REPLICA: 8
    TRANSFORMS:
      - name: ToTensor
      - name: Normalize
        mean: [0.5]
        std: [0.5]
OPTIMIZER:
  name: sgd
  momentum: 0.9
  lr: 0.15
  num_epochs: {num_epochs}
LOSS:
  name: dice_loss
  dice_loss:
    softmax: True
    ignore_index: -1
"""


def make_cfg(strategy="ENT", seed_size=3, query_size=2, rounds=2, num_epochs=4, rng_seed=0,
             extra_yaml=""):
    text = SMALL_CFG.format(strategy=strategy, seed_size=seed_size, query_size=query_size,
                            rounds=rounds, num_epochs=num_epochs, rng_seed=rng_seed)
    return parse_run_config(text + extra_yaml)


@pytest.fixture
def small_cfg():
    return make_cfg()


@pytest.fixture
def tiny_workspace(tmp_path):
    """3 volumes x 4 slices, 64x64, K=4; fast to annotate and train on."""
    spec = SyntheticSpec(volumes=3, slices_per_volume=4, rng_seed=11)
    generate_synthetic(spec, tmp_path / "ws")
    return tmp_path / "ws"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
