"""Inductive transfer learning for volumetric segmentation.

A desk-scale pipeline that transfers tissue annotations from a labeled
source domain to a tumor segmentation task on a shifted target domain:

1. train a tissue segmentor on the source domain,
2. learn an unpaired target-to-source translation with a cycle-consistent
   adversarial model (plus a semantic-aware discriminator on the frozen
   tissue segmentor's outputs),
3. train the tumor segmentor with the induced tissue probability maps
   concatenated to the image channels.

Everything runs on synthetic two-domain phantoms so the transfer claim can
be measured end to end: generation, preprocessing, training, label
induction, Dice evaluation, Monte-Carlo cross-validation and exact paired
Wilcoxon statistics.
"""

from itl.data import (
    CaseRecord,
    DatasetManifest,
    Domain,
    LabelMap,
    ProbabilityMap,
    Taxonomy,
    ValidationReport,
    Volume,
    load_case,
    load_manifest,
    save_case,
    validate_manifest,
)

__all__ = [
    "CaseRecord",
    "DatasetManifest",
    "Domain",
    "LabelMap",
    "ProbabilityMap",
    "Taxonomy",
    "ValidationReport",
    "Volume",
    "load_case",
    "load_manifest",
    "save_case",
    "validate_manifest",
]

__version__ = "0.1.0"
