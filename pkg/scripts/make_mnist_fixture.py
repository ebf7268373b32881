"""Build the bundled 5000-image MNIST subset as gzipped IDX files.

The source is the ``mnist_5k.csv.gz`` table shipped inside the mlxtend
wheel (784 pixel columns then the label). The wheel is fetched with
``pip download`` unless ``--wheel`` points at a local copy. The split is a
seeded, class-stratified 4000/1000 train/test partition.

    python3 scripts/make_mnist_fixture.py --out data
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
from okdph.data import write_idx  # noqa: E402

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps",
                    "-d", str(dest), "-q"], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def read_table(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(test_fraction * members.size))
        test.append(rng.choice(members, size=k, replace=False))
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(labels.size), test)
    return train, test


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path, help="local mlxtend wheel (downloaded if omitted)")
    ap.add_argument("--out", type=Path, default=Path("data"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(Path(tmp))
        images, labels = read_table(wheel)
    train, test = stratified_split(labels, 0.2, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        write_idx(args.out / f"mnist5k-{split}-images.idx3.gz", images[idx])
        write_idx(args.out / f"mnist5k-{split}-labels.idx1.gz", labels[idx])
        print(f"{split}: {idx.size} images, per class {np.bincount(labels[idx]).tolist()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
