"""Crop, resample and rescale a raw case onto the training grid.

Phantoms from generate_dataset are already grid-sized, so to make the step
visible this demo pads a phantom into a larger canvas with an offset (as if
it came from a scanner FOV), then preprocesses it back onto 16^3.
"""
import os
from pathlib import Path

import numpy as np

from itl.data import LabelMap, Taxonomy, Volume
from itl.phantoms import PhantomParams, generate_tissue_phantom
from itl.preprocess import nonzero_bbox, preprocess_case

os.environ.setdefault("ITL_DEMO_DIR", "demo-out")

vol, tissue = generate_tissue_phantom(PhantomParams(shape=(16, 16, 16), seed=9))

canvas = np.zeros((4, 40, 34, 40), dtype=np.float32)
canvas[:, 11:27, 3:19, 20:36] = vol.data
labels = np.zeros((40, 34, 40), dtype=np.int8)
labels[11:27, 3:19, 20:36] = tissue.data
raw = Volume(canvas, voxel_spacing=(1.0, 1.2, 1.0))
print("raw volume:", raw.data.shape, "spacing", raw.voxel_spacing)

bbox = nonzero_bbox(raw)
print("nonzero bbox:", bbox)

out_vol, out_lbl, used = preprocess_case(raw, LabelMap(labels, Taxonomy.TISSUE),
                                         target_shape=(16, 16, 16))
print("preprocessed:", out_vol.data.shape, "spacing",
      tuple(round(s, 3) for s in out_vol.voxel_spacing))
print("intensity range per channel:",
      [(round(float(c.min()), 3), round(float(c.max()), 3)) for c in out_vol.data])
print("label classes kept:", sorted(np.unique(out_lbl.data).tolist()))
