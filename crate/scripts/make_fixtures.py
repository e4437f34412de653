"""Regenerate the small datasets committed under crates/lab/fixtures.

mnist-desk: 2,000 train / 500 test digits in IDX format (gzipped), drawn
from the 10,000 digits bundled with the `mnist` npm package
(`npm pack mnist`, unpacked to MNIST_NPM_DIR).

natural32: 32x32 RGB patches in CIFAR-10 binary record format, cropped from
the public-domain sample photographs shipped with scikit-image and
scikit-learn. The label is the index of the source photograph.
"""

import gzip
import json
import os
import struct
import sys

import numpy as np

ROOT = os.path.join(os.path.dirname(__file__), "..", "crates", "lab", "fixtures")


def write_idx_images(path, images):
    n, h, w = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def mnist(npm_dir):
    rng = np.random.default_rng(20240607)
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(npm_dir, "src", "digits", f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        flat = flat.reshape(-1, 784)
        images.append(np.rint(flat * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(flat), digit, dtype=np.uint8))
    images = np.concatenate(images).reshape(-1, 28, 28)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    train, test = order[:2000], order[2000:2500]
    out = os.path.join(ROOT, "mnist-desk")
    os.makedirs(out, exist_ok=True)
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte.gz"), images[train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), labels[train])
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte.gz"), images[test])
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), labels[test])


def natural(per_source=24):
    import skimage.data as data
    from skimage.transform import resize
    from sklearn.datasets import load_sample_images

    sources = [
        data.astronaut(), data.coffee(), data.chelsea(), data.rocket(),
        data.hubble_deep_field(), data.immunohistochemistry(), data.retina(),
        data.colorwheel(),
    ] + list(load_sample_images().images)
    rng = np.random.default_rng(3)
    records = []
    for label, img in enumerate(sources):
        img = img[..., :3]
        short = min(img.shape[:2])
        scale = 96.0 / short
        small = resize(img, (round(img.shape[0] * scale), round(img.shape[1] * scale)),
                       anti_aliasing=True, preserve_range=True)
        small = np.rint(small).clip(0, 255).astype(np.uint8)
        for _ in range(per_source):
            i = rng.integers(0, small.shape[0] - 32 + 1)
            j = rng.integers(0, small.shape[1] - 32 + 1)
            patch = small[i:i + 32, j:j + 32]
            rec = bytes([label]) + patch.transpose(2, 0, 1).tobytes()
            records.append(rec)
    order = rng.permutation(len(records))
    out = os.path.join(ROOT, "natural32")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "data_batch_1.bin"), "wb") as f:
        for k in order:
            f.write(records[k])


if __name__ == "__main__":
    mnist(sys.argv[1] if len(sys.argv) > 1 else os.environ["MNIST_NPM_DIR"])
    natural()
