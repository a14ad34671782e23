import os
import sys
from pathlib import Path

import numpy as np
import pytest

from toporeformer.dataio import write_idx_images, write_idx_labels

TINY_PIPELINE = {
    "classifier_epochs": 2, "topoae_epochs": 1, "reformer_epochs": 2, "warmup_epochs": 1,
    "batch_size": 16, "clf_conv1": 2, "clf_conv2": 3, "clf_hidden": 8,
    "ae_conv1": 2, "ae_conv2": 3, "aux_hidden": 4, "d_topo": 4, "d_vae": 4, "d_aux": 2,
}


def striped_digits(n, num_classes, seed):
    """Class k lights up rows 2k..2k+2 plus noise: learnable, tiny, deterministic."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    imgs = rng.integers(0, 40, size=(n, 28, 28))
    for i, k in enumerate(labels):
        imgs[i, 2 * k:2 * k + 3, 4:24] = 230
    return imgs.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("idx")
    for split, n, seed in (("train", 64, 0), ("test", 30, 1)):
        imgs, labels = striped_digits(n, 10, seed)
        prefix = "t10k" if split == "test" else "train"
        write_idx_images(root / f"{prefix}-images-idx3-ubyte", imgs)
        write_idx_labels(root / f"{prefix}-labels-idx1-ubyte", labels)
    return root


MNIST_DIR = Path(os.environ.get("TOPOREFORM_DATA_DIR") or Path(__file__).resolve().parents[1] / "data" / "mnist5k")


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip(f"no MNIST IDX files in {MNIST_DIR}; run demos/prepare_mnist5k.py")
    return MNIST_DIR


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
