import json

import pytest

from synthdata import base_config, make_bids_dataset

from voxseg.config import ExperimentConfig
from voxseg.training import run_training


@pytest.fixture(scope="session")
def small_bids(tmp_path_factory):
    """(root, n_subjects) for a 10-subject 32x32x8 dataset with site
    metadata and sidecars."""
    root = tmp_path_factory.mktemp("bids_small")
    make_bids_dataset(root, 10, shape=(32, 32, 8), seed=1,
                      metadata_values=["A", "B"], sidecars=True)
    return root, 10


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, small_bids):
    """A quick 2-epoch training run shared by the engine-level tests.

    Returns (config, output directory); the directory holds checkpoints,
    best_model/, final_model/, and history.csv.
    """
    out_dir = tmp_path_factory.mktemp("trained_run")
    cfg = base_config(small_bids[0], out_dir, **{"model.dropout_rate": 0.3})
    config = ExperimentConfig(cfg)
    run_training(config)
    (out_dir / "base_config.json").write_text(json.dumps(cfg))
    return config, out_dir
