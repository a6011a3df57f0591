#!/usr/bin/env python3
"""Convert a PeMS .npz archive (key "data", shape [T, N, F]) into a CDVG file."""

import argparse
import struct
import sys

import numpy as np

MAGIC = b"CDVG"
VERSION = 1


def convert(src, dst, key="data"):
    with np.load(src) as archive:
        if key not in archive:
            raise SystemExit(f"{src}: no array named '{key}' (found {', '.join(archive.files)})")
        values = np.asarray(archive[key], dtype="<f8")
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise SystemExit(f"{src}: expected [T, N, F], got shape {values.shape}")
    if not np.isfinite(values).all():
        raise SystemExit(f"{src}: non-finite entries")
    if (values < -1e-9).any():
        raise SystemExit(f"{src}: negative entries")
    values = np.maximum(values, 0.0)
    steps, nodes, features = values.shape
    with open(dst, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<HIII", VERSION, steps, nodes, features))
        out.write(np.ascontiguousarray(values).tobytes())
    return values.shape


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("input", help="PeMS .npz file")
    parser.add_argument("output", help="CDVG dataset to write")
    parser.add_argument("--key", default="data", help="array name inside the archive")
    args = parser.parse_args(argv)
    shape = convert(args.input, args.output, args.key)
    print(f"wrote {args.output}: T={shape[0]} N={shape[1]} F={shape[2]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
