"""Look inside the predictions: heatmaps, recovered modes and entropy along the rope.

Run 02_train_and_compare.py first; this script reuses its checkpoints and dataset.
For one test pair it renders the heatmap of an end vertex, a quarter-way vertex and the
middle vertex for each model, runs EM mode extraction, and prints the entropy of the
prediction for every vertex. For the distributional model the entropy usually rises
towards the middle of the rope, where the two symmetric matches sit close together and
the appearance cue is weakest.

    python demos/03_heatmaps_and_modes.py --out /tmp/symcorr_demo
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from symcorr import DescriptorNet, extract_modes, inference_path_for, load_dataset
from symcorr.evaluation import heatmap
from symcorr.inference import entropy


def to_rgb(grid, modes=(), truth=()):
    g = grid / grid.max()
    rgb = np.stack([g, g ** 0.5 * 0.6, 1 - g], axis=-1)
    rgb = (rgb * 255).astype(np.uint8)
    for (r, c), colour in [(p, (255, 255, 255)) for p in truth] + [(p, (0, 0, 0)) for p in modes]:
        r, c = int(round(r)), int(round(c))
        if 0 <= r < g.shape[0] and 0 <= c < g.shape[1]:
            rgb[r, c] = colour
    return rgb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("/tmp/symcorr_demo"))
    ap.add_argument("--pair", type=int, default=None, help="test pair id (default: first)")
    args = ap.parse_args()

    data = load_dataset(args.out / "rope_data")
    pair = data.load_pair(args.pair if args.pair is not None else data.ids("test")[0])
    V = len(pair.entries)
    picks = [pair.entries[i] for i in (0, V // 4, V // 2)]

    tiles = []
    for loss in ("spcl", "mmgsd"):
        model, _ = DescriptorNet.load(args.out / f"{loss}.sckp")
        path = inference_path_for(loss)
        desc_a, desc_b = model.describe(pair.image_a), model.describe(pair.image_b)
        row = []
        for e in picks:
            grid = heatmap(path, desc_a, e.src, desc_b)
            modes = extract_modes(grid, e.n, strict=False)
            print(f"{loss} vertex {e.vertex_id:2d}: truth {[tuple(map(int, d)) for d in e.dsts]} "
                  f"modes {[(round(m.u, 1), round(m.v, 1)) for m in modes.modes]} entropy {modes.entropy:.2f}")
            row.append(to_rgb(grid, modes.means, e.dsts))
        tiles.append(np.concatenate(row, axis=1))

        profile = [entropy(heatmap(path, desc_a, e.src, desc_b)) for e in pair.entries]
        print(f"{loss} entropy by vertex: " + " ".join(f"{h:.1f}" for h in profile))

    sheet = np.concatenate(tiles, axis=0)
    out = args.out / "heatmaps.png"
    Image.fromarray(sheet).resize((sheet.shape[1] * 4, sheet.shape[0] * 4), Image.NEAREST).save(out)
    print("rows: spcl, mmgsd; columns: end, quarter, middle vertex; wrote", out)


if __name__ == "__main__":
    main()
