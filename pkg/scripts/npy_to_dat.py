#!/usr/bin/env python3
"""Convert a .npy 3D array into the raw .dat + JSON sidecar pair.

Public seismic benchmarks usually ship plain numpy volumes; this packs one
into the package's on-disk format. Pass the axis order the file was written
in; the loader transposes to canonical (inline, crossline, depth).

Example (amplitude volume, then labels):
    python scripts/npy_to_dat.py train_seismic.npy data/f3.dat \
        --axes inline crossline depth
    python scripts/npy_to_dat.py train_labels.npy data/f3_labels.dat \
        --axes inline crossline depth --labels --classes 6
"""

import argparse
import json
from pathlib import Path

import numpy as np


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("src", help=".npy input file")
    parser.add_argument("dst", help=".dat output path")
    parser.add_argument(
        "--axes", nargs=3, default=["inline", "crossline", "depth"],
        help="axis order of the source array",
    )
    parser.add_argument("--labels", action="store_true", help="write int32 labels")
    parser.add_argument("--classes", type=int, default=None)
    args = parser.parse_args()

    arr = np.load(args.src)
    if arr.ndim != 3:
        raise SystemExit(f"expected a 3D array, got shape {arr.shape}")
    dst = Path(args.dst)
    dst.parent.mkdir(parents=True, exist_ok=True)

    if args.labels:
        classes = args.classes or int(arr.max()) + 1
        arr.astype("<i4").tofile(dst)
        header = {
            "shape": list(arr.shape),
            "dtype": "int32",
            "axes": list(args.axes),
            "classes": classes,
            "class_names": [f"class_{c}" for c in range(classes)],
        }
    else:
        arr.astype("<f4").tofile(dst)
        header = {"shape": list(arr.shape), "dtype": "float32", "axes": list(args.axes)}

    dst.with_suffix(".json").write_text(json.dumps(header, indent=2))
    print(f"wrote {dst} ({arr.shape}, {'labels' if args.labels else 'amplitudes'})")


if __name__ == "__main__":
    main()
