"""
Write a tiny paired RGB/IR dataset for smoke runs.

    python make_synthetic_dataset.py data/synthetic --n-train 8 --n-val 4
"""

import argparse

from rgbt_data import SyntheticSpec, write_synthetic_dataset


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write a synthetic paired dataset")
    parser.add_argument('root', help="output directory")
    parser.add_argument('--n-train', type=int, default=8)
    parser.add_argument('--n-val', type=int, default=4)
    parser.add_argument('--num-classes', type=int, default=2)
    parser.add_argument('--ir-channels', type=int, choices=(1, 3), default=1)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args(argv)

    spec = SyntheticSpec(num_classes=args.num_classes, ir_channels=args.ir_channels)
    manifest = write_synthetic_dataset(args.root, args.n_train, args.n_val, spec, args.seed)
    print(f"✓ Dataset written: {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
