#!/usr/bin/env python3
"""Regenerate the bundled fixtures (deterministic).

The 4-pixel evaluation fixture pins AUPRC 0.833333 / FPR95 0.5; the
small logits/mask battery is shared by the CLI tests and the frontend
parity suite.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from oodseg.raster import LogitMap, ScoreMap, TriLabelMask, save_raster

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "fixtures")


def main():
    os.makedirs(os.path.join(OUT, "eval_4px", "scores"), exist_ok=True)
    os.makedirs(os.path.join(OUT, "eval_4px", "labels"), exist_ok=True)

    scores = np.array([[0.9, 0.8], [0.7, 0.6]])
    labels = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    save_raster(ScoreMap(scores), os.path.join(OUT, "eval_4px", "scores", "demo.npy"))
    save_raster(
        TriLabelMask(labels), os.path.join(OUT, "eval_4px", "labels", "demo.png")
    )

    rng = np.random.default_rng(20240817)
    logits = rng.uniform(-3.0, 3.0, size=(3, 4, 4))
    reference = rng.uniform(-3.0, 3.0, size=(3, 4, 4))
    mask = rng.choice([0, 1, 255], size=(4, 4), p=[0.6, 0.3, 0.1]).astype(np.uint8)
    save_raster(LogitMap(logits), os.path.join(OUT, "logits_small.npy"))
    save_raster(LogitMap(reference), os.path.join(OUT, "reference_small.npy"))
    save_raster(TriLabelMask(mask), os.path.join(OUT, "mask_small.png"))
    print(f"fixtures written to {os.path.abspath(OUT)}")


if __name__ == "__main__":
    main()
