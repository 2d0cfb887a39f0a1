"""Generate a small two-domain phantom dataset and look at what came out.

Source cases are clean multi-channel rings with tissue labels; target cases
get a tumor implanted, an appearance shift, and tumor labels. Tissue truth
for targets is written to a hidden/ sidecar that training code never reads.
"""
import os
from pathlib import Path

import numpy as np

from itl.data import Taxonomy, case_stem, load_case, load_manifest
from itl.phantoms import (DomainShiftParams, PhantomParams, apply_domain_shift,
                          generate_dataset, load_hidden_tissue)

out = Path(os.environ.get("ITL_DEMO_DIR", "demo-out")) / "01_phantoms"

params = PhantomParams(shape=(24, 24, 24), seed=5,
                       wm_radius_jitter=0.10, gm_radius_jitter=0.04)
shift = DomainShiftParams(gamma=0.8, bias_field_amplitude=0.4,
                          extra_noise_sigma=0.08, seed=5)

manifest = generate_dataset(out, n_source=4, n_target=4, params=params, shift=shift)
print(f"wrote {len(manifest.cases)} cases under {out}")

vol, tissue = load_case(case_stem(manifest, "src_000"))
print("volume", vol.data.shape, vol.data.dtype, "labels", tissue.data.shape)
for k, name in enumerate(("background", "tissue-1", "tissue-2", "tissue-3")):
    mask = tissue.data == k
    print(f"  {name:10s} {int(mask.sum()):5d} voxels, "
          f"ch0 mean {vol.data[0][mask].mean():.3f}")

tvol, tumor = load_case(case_stem(manifest, "tgt_000"))
hidden = load_hidden_tissue(manifest, "tgt_000")
print("target tumor voxels:", int((tumor.data > 0).sum()),
      "(classes", sorted(np.unique(tumor.data).tolist()), ")")
print("hidden tissue sidecar:", hidden.data.shape, hidden.taxonomy)

# how big is the appearance shift, on a fresh clean phantom
clean, _ = load_case(case_stem(manifest, "src_001"))
moved = apply_domain_shift(clean, shift)
print(f"shift L1 on src_001: {np.abs(moved.data - clean.data).mean():.4f} per voxel")
