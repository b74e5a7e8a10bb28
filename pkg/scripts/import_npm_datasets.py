"""Populate the fastnn dataset cache from npm package tarballs.

For hosts where the canonical dataset servers are unreachable but an npm
registry is. ``mnist-loader`` ships the raw IDX files; ``tfjs-cifar10``
ships each CIFAR-10 batch as a 10000x1024 RGB PNG (one image per row, HWC)
plus JSON label lists, which are rewritten here as 3073-byte records.

    python3 scripts/import_npm_datasets.py            # runs `npm pack` itself
    python3 scripts/import_npm_datasets.py --mnist mnist-loader-1.0.0.tgz \
        --cifar tfjs-cifar10-1.1.1.tgz
"""

import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from fastnn import config, data

Image.MAX_IMAGE_PIXELS = None


def npm_pack(name, workdir):
    out = subprocess.run(["npm", "pack", name, "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.split()[-1]
    return Path(workdir) / out


def members(tgz):
    with tarfile.open(tgz) as tar:
        for m in tar.getmembers():
            if m.isfile():
                yield Path(m.name).name, tar.extractfile(m).read()


def import_mnist(tgz, root):
    dest = root / "mnist"
    dest.mkdir(parents=True, exist_ok=True)
    wanted = {f for pair in data.MNIST_FILES.values() for f in pair}
    for name, raw in members(tgz):
        if name in wanted:
            (dest / name).write_bytes(raw)
            wanted.discard(name)
    if wanted:
        sys.exit(f"missing from {tgz}: {sorted(wanted)}")
    for split in ("train", "test"):
        print(f"mnist {split}: {len(data.mnist(split, root))} samples")


def import_cifar(tgz, root):
    dest = root / "cifar-10-batches-bin"
    dest.mkdir(parents=True, exist_ok=True)
    files = dict(members(tgz))
    train_labels = np.array(json.loads(files["train_lables.json"]))
    test_labels = np.array(json.loads(files["test_lables.json"]))
    with tempfile.TemporaryDirectory() as tmp:
        for i, name in enumerate(data.CIFAR_FILES["train"] + data.CIFAR_FILES["test"]):
            png = Path(tmp) / "batch.png"
            png.write_bytes(files[name.replace(".bin", ".png")])
            rows = np.asarray(Image.open(png).convert("RGB"))       # 10000 x 1024 x 3
            images = rows.reshape(-1, 32, 32, 3).transpose(0, 3, 1, 2)
            labels = test_labels if name == "test_batch.bin" else train_labels[i * 10000:(i + 1) * 10000]
            data.write_cifar10(images, labels, dest / name)
    for split in ("train", "test"):
        print(f"cifar10 {split}: {len(data.cifar10(split, root))} samples")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mnist", type=Path, help="mnist-loader tarball")
    p.add_argument("--cifar", type=Path, help="tfjs-cifar10 tarball")
    p.add_argument("--out", type=Path, default=None, help="cache dir (default $FASTNN_DATA_DIR)")
    args = p.parse_args(argv)
    root = args.out or config.data_dir()
    with tempfile.TemporaryDirectory() as work:
        import_mnist(args.mnist or npm_pack("mnist-loader@1.0.0", work), root)
        import_cifar(args.cifar or npm_pack("tfjs-cifar10@1.1.1", work), root)


if __name__ == "__main__":
    main()
