"""Session-scoped artifacts shared by CLI and acceptance tests."""
from __future__ import annotations

import pytest

from helpers import chain_log, log_to_csv


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small learnable dataset preprocessed to the on-disk format."""
    from qrseq.cli import main

    root = tmp_path_factory.mktemp("smalldata")
    raw = root / "raw.csv"
    log_to_csv(raw, chain_log(num_users=30, num_items=40, seq_len=12, seed=77))
    data = root / "dataset.json"
    assert main(["preprocess", "--input", str(raw), "--out", str(data)]) == 0
    return data


@pytest.fixture()
def base_config(tmp_path):
    """A fast training config file for CLI runs."""
    path = tmp_path / "run.ini"
    path.write_text(
        "\n".join([
            "# fast functional-test settings",
            "seed = 9",
            "latent_dim = 8",
            "seq_len = 5",
            "scales = 1,2",
            "base_epochs = 2",
            "patience = 2",
            "batch_size = 64",
            "lr = 0.01",
            "dropout = 0.2",
            "eval_num_negatives = 20",
        ]) + "\n",
        encoding="utf-8",
    )
    return path
