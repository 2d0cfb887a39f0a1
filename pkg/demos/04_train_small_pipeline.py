"""Run the whole three-step pipeline at toy scale, end to end.

Tissue segmentor on the source domain, appearance adaptation, induced tissue
maps for the targets, then two tumor segmentors: image-only and image plus
induced maps. A few dozen iterations each, so numbers are rough; the point is
the plumbing.
"""
import os
from pathlib import Path

import numpy as np

from itl.data import Domain, Taxonomy, case_stem, load_case, load_manifest
from itl.evalstats import evaluate_split, monte_carlo_splits, per_class_dice
from itl.nets import (DiscriminatorSpec, GeneratorSpec, SegmentorSpec,
                      load_checkpoint, segmentor_forward)
from itl.phantoms import (DomainShiftParams, PhantomParams, generate_dataset,
                          load_hidden_tissue)
from itl.pipeline import (Stage, TrainConfig, induce_for_manifest,
                          load_induced_maps, predict_tumor_labels,
                          train_sd_segmentor, train_td_segmentor, train_uda)

root = Path(os.environ.get("ITL_DEMO_DIR", "demo-out")) / "04_pipeline"
params = PhantomParams(shape=(16, 16, 16), seed=21,
                       wm_radius_jitter=0.10, gm_radius_jitter=0.04,
                       tumor_radius_range=(2.0, 3.5))
shift = DomainShiftParams(gamma=0.8, bias_field_amplitude=0.4,
                          extra_noise_sigma=0.08, seed=21)
manifest = generate_dataset(root / "data", 10, 10, params, shift)
src = manifest.case_ids(Domain.SOURCE)
tgt = manifest.case_ids(Domain.TARGET)

small_seg = SegmentorSpec(levels=2, base_width=4)

print("== step 1: source tissue segmentor")
sd_cfg = TrainConfig(stage=Stage.SD_SEG, manifest_path=str(root / "data"),
                     checkpoint_dir=str(root / "ckpt/sd"),
                     train_ids=src[:8], val_ids=src[8:],
                     iterations=60, batch_size=2, seed=1, val_interval=20,
                     segmentor=small_seg)
sd_ckpt = train_sd_segmentor(sd_cfg)
f_s, _, _ = load_checkpoint(sd_ckpt)

print("== step 2: appearance adaptation (short)")
uda_cfg = TrainConfig(stage=Stage.UDA, manifest_path=str(root / "data"),
                      checkpoint_dir=str(root / "ckpt/uda"),
                      train_ids=tgt, val_ids=[],
                      iterations=40, warmup_iterations=20,
                      batch_size=2, seed=2, disc_lr_scale=0.1,
                      generator=GeneratorSpec(down_stages=1, res_blocks=2, base_width=4),
                      discriminator=DiscriminatorSpec(down_stages=2, base_width=4),
                      segmentor=small_seg)
uda = train_uda(uda_cfg, sd_ckpt)
g_t2s, _, _ = load_checkpoint(uda.g_t2s)

print("== step 3: induce tissue maps for every target")
induce_for_manifest(manifest, g_t2s, f_s)
manifest = load_manifest(root / "data")

ref, ind = [], []
for cid in tgt:
    volume, _ = load_case(case_stem(manifest, cid))
    truth = load_hidden_tissue(manifest, cid)
    direct = segmentor_forward(f_s, volume).argmax_labels(Taxonomy.TISSUE)
    ref.append(np.mean(list(per_class_dice(direct, truth).values())))
    maps = load_induced_maps(manifest, [cid])[cid]
    ind.append(np.mean(list(per_class_dice(
        maps.argmax_labels(Taxonomy.TISSUE), truth).values())))
print(f"tissue dice on targets: direct {np.mean(ref):.3f}, induced {np.mean(ind):.3f}")

plan = monte_carlo_splits(tgt, seed=3, repeats=1)[0]
results = {}
for tag, with_maps in (("image-only", False), ("with-maps", True)):
    td_cfg = TrainConfig(stage=Stage.TD_SEG, manifest_path=str(root / "data"),
                         checkpoint_dir=str(root / f"ckpt/td_{tag}"),
                         train_ids=list(plan.train), val_ids=list(plan.val),
                         iterations=60, batch_size=2, seed=4, val_interval=20,
                         segmentor=SegmentorSpec(in_channels=8 if with_maps else 4,
                                                 levels=2, base_width=4))
    induced = load_induced_maps(manifest, td_cfg.train_ids + td_cfg.val_ids) \
        if with_maps else None
    model, _, _ = load_checkpoint(train_td_segmentor(td_cfg, induced))
    preds, truths = {}, {}
    for cid in plan.test:
        volume, labels = load_case(case_stem(manifest, cid))
        prob = load_induced_maps(manifest, [cid])[cid] if with_maps else None
        preds[cid] = predict_tumor_labels(model, volume, prob)
        truths[cid] = labels
    report = evaluate_split(preds, truths, plan)
    results[tag] = report.region_means
    print(f"tumor dice [{tag}]:",
          {k: round(v, 3) for k, v in report.region_means.items()})

print("done; artifacts under", root)
