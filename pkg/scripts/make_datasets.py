"""Regenerate the shipped synthetic datasets under data/."""
import argparse
from pathlib import Path

from edgekmeans.datasets import PROFILES, write_dataset

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-images", type=int, default=30)
    ap.add_argument("--rng-seed", type=int, default=0)
    ap.add_argument("--out", default=ROOT / "data")
    args = ap.parse_args()
    for profile in PROFILES:
        print(write_dataset(profile, args.n_images, Path(args.out) / profile, args.rng_seed))
