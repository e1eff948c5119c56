"""Render a few rope and cloth pairs and show what "symmetric correspondence" means.

A rope looks the same read from either end, so a pixel on vertex i in image A has two
equally valid matches in image B: vertex i and vertex V-1-i. A square cloth has four
(one per quarter turn). The script writes a contact sheet with the source vertex marked
in image A and every member of its orbit marked in image B.

    python demos/01_symmetric_objects.py --out /tmp/symcorr_demo
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from symcorr.synthgen import MeshConfig, ObjectKind, generate_dataset, load_dataset


def mark(img, points, value):
    rgb = np.repeat((img * 255).astype(np.uint8)[..., None], 3, axis=2)
    for r, c in np.round(points).astype(int):
        rgb[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = value
    return rgb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("/tmp/symcorr_demo"))
    args = ap.parse_args()

    rows = []
    for kind, vertices in ((ObjectKind.ROPE, 32), (ObjectKind.CLOTH, 8)):
        root = args.out / f"{kind.value}_data"
        generate_dataset(root, MeshConfig(kind=kind, vertex_count=vertices), 3, 1, seed=7)
        for pair in load_dataset(root).load_split("train"):
            entry = pair.entries[len(pair.entries) // 5]
            print(f"{kind.value} pair {pair.pair_id}: vertex {entry.vertex_id} at {entry.src} "
                  f"-> {entry.n} valid matches {[tuple(map(float, d)) for d in entry.dsts]}")
            a = mark(pair.image_a, [entry.src], (255, 0, 0))
            b = mark(pair.image_b, entry.dsts, (0, 200, 255))
            rows.append(np.concatenate([a, np.zeros((a.shape[0], 4, 3), np.uint8), b], axis=1))

    sheet = np.concatenate([np.pad(r, ((2, 2), (0, 0), (0, 0))) for r in rows], axis=0)
    path = args.out / "contact_sheet.png"
    Image.fromarray(sheet).resize((sheet.shape[1] * 3, sheet.shape[0] * 3), Image.NEAREST).save(path)
    print("wrote", path)


if __name__ == "__main__":
    main()
