"""Write the 5k-image MNIST sample bundled with mlxtend as IDX files.

Tests, demos and the CLI read MNIST from ``data/mnist5k`` by default
(or from ``$TOPOREFORM_DATA_DIR``).

    python demos/prepare_mnist5k.py [out_dir]
"""
import sys

from toporeformer.dataio import load_mnist_dir, prepare_mnist_subset

out = prepare_mnist_subset(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
sizes = {split: len(load_mnist_dir(out, split, num_classes=10).labels) for split in ("train", "test")}
print(f"{sizes['train']} train / {sizes['test']} test images in {out}")
