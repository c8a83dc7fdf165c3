"""Write the 5000-digit MNIST subset bundled with mlxtend as IDX files.

The sandbox has no route to the original MNIST mirrors, but the mlxtend wheel
on PyPI ships 500 digits per class as a gzipped CSV (784 pixels + label per
row). This script pulls that wheel with pip and splits it into a 400/100
per-class train/validation pair under data/mnist5k/.

    python scripts/make_mnist_subset.py [outdir] [--wheel path/to/mlxtend.whl]
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from freeadv.data import write_idx  # noqa: E402

TRAIN_PER_CLASS = 400


def read_csv(wheel: Path) -> bytes:
    with zipfile.ZipFile(wheel) as zf:
        return gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))


def fetch_csv() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        return read_csv(next(Path(tmp).glob("mlxtend-*.whl")))


def main(outdir: Path, wheel: Path | None = None) -> None:
    csv = read_csv(wheel) if wheel else fetch_csv()
    table = np.loadtxt(io.BytesIO(csv), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    train_idx, val_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:TRAIN_PER_CLASS])
        val_idx.extend(idx[TRAIN_PER_CLASS:])
    outdir.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.sort(train_idx)), ("val", np.sort(val_idx))):
        write_idx(outdir / f"{split}-images-idx3-ubyte.gz", images[idx])
        write_idx(outdir / f"{split}-labels-idx1-ubyte.gz", labels[idx])
        print(f"{split}: {len(idx)} examples")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("outdir", nargs="?", type=Path, default=Path("data/mnist5k"))
    parser.add_argument("--wheel", type=Path, help="use an already downloaded mlxtend wheel")
    args = parser.parse_args()
    main(args.outdir, args.wheel)
