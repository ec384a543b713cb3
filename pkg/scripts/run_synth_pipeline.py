#!/usr/bin/env python3
"""End-to-end demo: synthesize a world, pair it, train, evaluate, map.

Drives the `graft` CLI exactly as a user would, with a held-out split for the
evaluation stages. Outputs land under --out (default: runs/pipeline).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from graft import corpus  # noqa: E402
from graft.cli import main as graft  # noqa: E402


def run(argv: list[str]) -> None:
    rc = graft(argv)
    if rc != 0:
        raise SystemExit(f"`graft {' '.join(argv)}` exited with {rc}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-ground", type=int, default=1200)
    parser.add_argument("--extent-km", type=float, default=18.0)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--loss", default="image", choices=["image", "pixel", "sum_prob",
                                                            "avg_rep", "l2"])
    parser.add_argument("--holdout", type=int, default=200,
                        help="tiles reserved for evaluation")
    args = parser.parse_args()

    out = Path(args.out)
    world_dir = out / "world"
    overrides = [
        "--set", f"world.n_ground={args.n_ground}",
        "--set", f"world.extent_km={args.extent_km}",
        "--seed", str(args.seed),
    ]

    run(["synth", "--out", str(world_dir), *overrides])
    run(["build", "--world", str(world_dir), "--out", str(out / "data"), *overrides])

    # split the built dataset into train/holdout containers
    ds = corpus.load_dataset(out / "data" / "dataset.grft")
    order = np.random.default_rng(args.seed + 777).permutation(len(ds.tiles))
    if len(ds.tiles) <= args.holdout + 2:
        raise SystemExit(f"only {len(ds.tiles)} tiles; lower --holdout")
    train_ds = corpus.subset_tiles(ds, order[: len(ds.tiles) - args.holdout])
    eval_ds = corpus.subset_tiles(ds, order[len(ds.tiles) - args.holdout :])
    corpus.save_dataset(train_ds, out / "data" / "train.grft")
    corpus.save_dataset(eval_ds, out / "data" / "holdout.grft")
    print(f"split: {len(train_ds.tiles)} train / {len(eval_ds.tiles)} holdout tiles")

    run([
        "train", "--world", str(world_dir), "--dataset", str(out / "data" / "train.grft"),
        "--out", str(out / "run"), "--loss", args.loss, "--epochs", str(args.epochs),
        "--seed", str(args.seed),
    ])
    ckpt = str(out / "run" / "checkpoint.grcp")

    # segmentation wants the pixel-level head; train it separately unless the
    # main checkpoint already used it
    seg_ckpt = ckpt
    if args.loss != "pixel":
        run([
            "train", "--world", str(world_dir),
            "--dataset", str(out / "data" / "train.grft"),
            "--out", str(out / "run_pixel"), "--loss", "pixel",
            "--epochs", str(args.epochs), "--seed", str(args.seed),
        ])
        seg_ckpt = str(out / "run_pixel" / "checkpoint.grcp")

    for task, task_ckpt in (("classify", ckpt), ("retrieve", ckpt),
                            ("segment", seg_ckpt)):
        run([
            "eval", task, "--world", str(world_dir),
            "--dataset", str(out / "data" / "holdout.grft"),
            "--checkpoint", task_ckpt, "--out", str(out / "eval"),
        ])
    run(["map", "water", "--world", str(world_dir), "--checkpoint", ckpt,
         "--out", str(out / "maps"), *overrides])
    print(f"\nall outputs under {out}/")


if __name__ == "__main__":
    main()
