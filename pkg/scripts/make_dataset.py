"""
make_dataset.py - generate the synthetic slide dataset and save it to disk.

Usage: python3 scripts/make_dataset.py [out_dir]   (default: data/synthetic)
"""
import sys
from collections import Counter
from pathlib import Path

from confbench import synthgen
from confbench.core import save_dataset


def main():
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/synthetic")
    cfg = synthgen.GenConfig(seed=0, pos_lesion_nucleus_area=(36.0, 8.0), noise_sigma=8.0)
    wsis = synthgen.generate_dataset(cfg)
    manifest = save_dataset(wsis, out_dir)

    by_split = Counter(w.split for w in wsis)
    positives = sum(w.label for w in wsis)
    tiles = sum(w.num_tiles for w in wsis)
    print(f"wrote {len(wsis)} WSIs ({positives} positive, {tiles} tiles) -> {manifest.parent}")
    for split in ("train", "val", "test"):
        print(f"  {split:5s} {by_split[split]}")


if __name__ == "__main__":
    main()
