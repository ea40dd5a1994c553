#!/usr/bin/env python3
"""Convert LASA handwriting `.mat` files into the JSON corpus format.

Usage:
    lasa_to_json.py <DataSet dir> <out dir> [--scale 0.01] [--stride 1] SHAPE [SHAPE ...]

Positions are multiplied by `--scale` (the raw files are in millimetres; the
default maps them to decimetres so kernel lengths of a few hundredths are
meaningful). `--stride` keeps every k-th sample and scales dt accordingly.
"""
import argparse
import json
import os

import scipy.io as sio


def convert(path, scale, stride):
    mat = sio.loadmat(path, squeeze_me=True, struct_as_record=False)
    demos = []
    for i, demo in enumerate(mat["demos"]):
        pos = demo.pos.T[::stride] * scale
        demos.append(
            {
                "id": f"demo{i}",
                "dt": float(demo.dt) * stride,
                "positions": [[float(v) for v in row] for row in pos],
                "contexts": None,
            }
        )
    return {"version": 1, "dims": {"context": 0, "position": 2}, "demonstrations": demos}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dataset_dir")
    ap.add_argument("out_dir")
    ap.add_argument("shapes", nargs="+")
    ap.add_argument("--scale", type=float, default=0.01)
    ap.add_argument("--stride", type=int, default=1)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    for shape in args.shapes:
        corpus = convert(os.path.join(args.dataset_dir, shape + ".mat"), args.scale, args.stride)
        out = os.path.join(args.out_dir, shape + ".json")
        with open(out, "w") as f:
            json.dump(corpus, f, separators=(",", ":"))
        print(f"{shape}: {len(corpus['demonstrations'])} demonstrations -> {out}")


if __name__ == "__main__":
    main()
