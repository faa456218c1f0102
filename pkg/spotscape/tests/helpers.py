import os

import numpy as np

from spotscape.data import MultiSliceDataset, Slice, load_dataset, preprocess
from spotscape.services import TrainConfig, load_run_config

FIXTURES = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "..", "fixtures"))
SLICE_A = os.path.join(FIXTURES, "slice_a")
SLICE_B = os.path.join(FIXTURES, "slice_b")
SMALL_CONFIG = os.path.join(FIXTURES, "train_small.toml")

SLOW_TESTS = os.environ.get("SPOTSCAPE_SLOW_TESTS") == "1"


def error_codes(exc):
    return {error.code for error in exc.error_list}


def small_config(**changes):
    return TrainConfig.from_mapping(load_run_config(SMALL_CONFIG), **changes)


def fixture_dataset(*directories):
    dataset = load_dataset(directories or (SLICE_A,))
    return preprocess(dataset, hvg_n=dataset.n_genes)


def random_slice(n_spots=12, n_genes=8, seed=0, slice_id="slice_0", labels=None):
    rng = np.random.default_rng(seed)
    return Slice(
        expression=rng.poisson(5.0, size=(n_spots, n_genes)).astype(float) + 1.0,
        coords=rng.uniform(0, 10, size=(n_spots, 2)),
        gene_names=[f"gene_{g}" for g in range(n_genes)],
        labels=labels,
        slice_id=slice_id,
    )


def random_dataset(n_slices=1, n_spots=12, n_genes=8, seed=0):
    return MultiSliceDataset([
        random_slice(n_spots, n_genes, seed=seed + s, slice_id=f"slice_{s}") for s in range(n_slices)
    ])
