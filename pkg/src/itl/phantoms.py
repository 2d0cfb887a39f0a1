"""Deterministic synthetic two-domain dataset generator.

Source-domain cases are tissue-labeled brain-like phantoms: nested deformed
ellipsoids (CSF shell around a GM ribbon around a WM core) with per-class,
per-channel base intensities plus Gaussian noise. Target-domain cases take
the same tissue geometry, implant a concentric-sphere tumor whose center is
attracted to the WM/GM interface, then pass the image through a parametric
appearance shift (gamma, per-channel contrast, smooth bias field, extra
noise). Tumors therefore correlate with tissue geometry while the two
domains disagree in appearance, which is exactly the situation the
adaptation pipeline is meant to bridge.

All outputs are pure functions of (params, seed). Intensities are clamped
to [0, 1]; geometry is never touched by the appearance shift.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from itl.data import (
    DatasetManifest,
    CaseRecord,
    Domain,
    LabelMap,
    Taxonomy,
    Volume,
    save_case,
    save_manifest,
    validate_manifest,
)

# one RNG stream index per generation stage, so stages stay independent
_STREAM_TISSUE = 0
_STREAM_TUMOR = 1
_STREAM_SHIFT = 2


class GeometryError(ValueError):
    """Requested geometry does not fit the voxel grid."""


# rows: background, WM, GM, CSF; columns: the 4 image channels
_DEFAULT_BASE_INTENSITIES = (
    (0.00, 0.00, 0.00, 0.00),
    (0.78, 0.38, 0.72, 0.42),
    (0.52, 0.62, 0.45, 0.68),
    (0.22, 0.88, 0.18, 0.30),
)

# rows: edema, non-enhancing, enhancing; columns: channel offsets
_DEFAULT_TUMOR_OFFSETS = (
    (0.02, 0.28, -0.10, 0.26),
    (-0.14, 0.12, 0.12, 0.14),
    (0.34, 0.06, 0.30, -0.08),
)


@dataclass
class PhantomParams:
    """Controls for one phantom case; ``seed`` makes every draw reproducible."""

    shape: tuple[int, int, int] = (24, 24, 24)
    brain_radius_frac: tuple[float, float] = (0.70, 0.82)
    center_jitter_frac: float = 0.04
    wm_radius_frac: float = 0.69
    gm_radius_frac: float = 0.87
    wm_radius_jitter: float = 0.0
    gm_radius_jitter: float = 0.0
    deformation_amplitude: float = 0.07
    base_intensities: tuple = _DEFAULT_BASE_INTENSITIES
    noise_sigma: float = 0.03
    tumor_radius_range: tuple[float, float] = (3.0, 5.0)
    tumor_mid_frac: float = 0.75
    tumor_core_frac: float = 0.45
    interface_affinity: float = 0.8
    tumor_intensity_offsets: tuple = _DEFAULT_TUMOR_OFFSETS
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ValueError(f"shape must be 3 axes of at least 8 voxels, got {self.shape}")
        lo, hi = self.brain_radius_frac
        if not (0 < lo <= hi < 1):
            raise ValueError(f"brain_radius_frac must satisfy 0 < lo <= hi < 1, got {lo}, {hi}")
        if hi * (1 + self.deformation_amplitude) + self.center_jitter_frac >= 1.0:
            raise GeometryError(
                "deformed brain ellipsoid does not fit the grid: "
                f"radius {hi} * (1 + {self.deformation_amplitude}) + jitter "
                f"{self.center_jitter_frac} >= 1"
            )
        if not (0 < self.wm_radius_frac < self.gm_radius_frac < 1):
            raise ValueError("need 0 < wm_radius_frac < gm_radius_frac < 1")
        if self.wm_radius_jitter < 0 or self.gm_radius_jitter < 0:
            raise ValueError("radius jitters must be >= 0")
        if self.wm_radius_frac - self.wm_radius_jitter <= 0.05:
            raise ValueError("wm_radius_jitter leaves no WM core at the low end")
        if self.gm_radius_frac + self.gm_radius_jitter >= 0.99:
            raise ValueError("gm_radius_jitter pushes the GM ribbon out of the brain")
        if (self.wm_radius_frac + self.wm_radius_jitter
                >= self.gm_radius_frac - self.gm_radius_jitter):
            raise ValueError("radius jitters allow the WM core to cross the GM ribbon")
        if not (0.0 <= self.interface_affinity <= 1.0):
            raise ValueError(f"interface_affinity must lie in [0,1], got {self.interface_affinity}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        base = np.asarray(self.base_intensities, dtype=np.float64)
        if base.shape != (4, 4):
            raise ValueError("base_intensities must be 4 classes x 4 channels")
        if base.min() < 0 or base.max() > 1:
            raise ValueError("base intensities must lie in [0, 1]")
        if np.asarray(self.tumor_intensity_offsets).shape != (3, 4):
            raise ValueError("tumor_intensity_offsets must be 3 classes x 4 channels")
        rlo, rhi = self.tumor_radius_range
        if not (0 < rlo <= rhi):
            raise ValueError("tumor_radius_range must be positive and ordered")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class DomainShiftParams:
    """Appearance-only shift: v' = clamp(scale_c * v**gamma * bias(x) + noise)."""

    gamma: float = 1.0
    bias_field_amplitude: float = 0.0
    contrast_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    extra_noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if len(self.contrast_scale) != 4 or any(s < 0 for s in self.contrast_scale):
            raise ValueError("contrast_scale must be 4 non-negative floats")
        if not (0 <= self.bias_field_amplitude < 1):
            raise ValueError("bias_field_amplitude must lie in [0, 1)")
        if self.extra_noise_sigma < 0:
            raise ValueError("extra_noise_sigma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "DomainShiftParams":
        return cls(gamma=1.0, bias_field_amplitude=0.0,
                   contrast_scale=(1.0, 1.0, 1.0, 1.0), extra_noise_sigma=0.0, seed=seed)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _smooth_field(shape: tuple[int, int, int], rng: np.random.Generator,
                  n_modes: int = 4, max_freq: float = 2.0) -> np.ndarray:
    """Low-frequency random field normalized to [-1, 1]."""
    grids = np.meshgrid(*(np.linspace(0.0, 1.0, s) for s in shape), indexing="ij")
    field = np.zeros(shape, dtype=np.float64)
    for _ in range(n_modes):
        freq = rng.uniform(0.5, max_freq, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        arg = 2.0 * np.pi * sum(f * g for f, g in zip(freq, grids)) + phase
        field += np.cos(arg)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _interface_mask(labels: np.ndarray, class_a: int, class_b: int) -> np.ndarray:
    """Voxels of class_a or class_b that 6-touch the other class."""
    a = labels == class_a
    b = labels == class_b
    iface = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        touch = (a[lo] & b[hi]) | (b[lo] & a[hi])
        iface[lo] |= touch
        iface[hi] |= touch
    return iface


def generate_tissue_phantom(params: PhantomParams) -> tuple[Volume, LabelMap]:
    """Brain-like tissue phantom: WM core inside a GM ribbon inside a CSF shell."""
    params.validate()
    rng = _rng(params.seed, _STREAM_TISSUE)
    shape = params.shape
    half = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0

    center = half + rng.uniform(-1.0, 1.0, size=3) * params.center_jitter_frac * half
    radii = rng.uniform(*params.brain_radius_frac, size=3) * half

    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    rho = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))
    rho = rho + params.deformation_amplitude * _smooth_field(shape, rng)

    # optional per-case ring variation, so radius alone cannot identify tissue
    wm_frac, gm_frac = params.wm_radius_frac, params.gm_radius_frac
    if params.wm_radius_jitter > 0:
        wm_frac += rng.uniform(-params.wm_radius_jitter, params.wm_radius_jitter)
    if params.gm_radius_jitter > 0:
        gm_frac += rng.uniform(-params.gm_radius_jitter, params.gm_radius_jitter)

    labels = np.zeros(shape, dtype=np.int8)
    labels[rho <= 1.0] = 3                       # CSF shell fills the brain ...
    labels[rho <= gm_frac] = 2                   # ... GM ribbon carved inside it
    labels[rho <= wm_frac] = 1                   # ... WM core innermost

    base = np.asarray(params.base_intensities, dtype=np.float64)
    data = np.moveaxis(base[labels], -1, 0)      # (C, D, H, W)
    if params.noise_sigma > 0:
        data = data + rng.normal(0.0, params.noise_sigma, size=data.shape)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return Volume(data), LabelMap(labels, Taxonomy.TISSUE)


def sample_tumor_center(tissue: LabelMap, interface_affinity: float,
                        rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw a tumor center from (1-w) * uniform(brain) + w * uniform(WM/GM interface)."""
    brain = tissue.data > 0
    if not brain.any():
        raise GeometryError("tissue map has no brain voxels")
    iface = _interface_mask(tissue.data, 1, 2)
    use_iface = iface.any() and rng.random() < interface_affinity
    pool = np.argwhere(iface if use_iface else brain)
    return tuple(int(v) for v in pool[rng.integers(len(pool))])


def implant_tumor(volume: Volume, tissue: LabelMap,
                  params: PhantomParams) -> tuple[Volume, LabelMap]:
    """Add a concentric-sphere tumor (enhancing core in non-enhancing in edema).

    The center is sampled with probability proportional to
    (1-w) * uniform over the brain mask + w * uniform over the WM/GM
    interface, w = ``params.interface_affinity``. Spheres are intersected
    with the brain mask, so the nesting ET within TC within WT holds by
    construction. Intensity offsets are added per tumor class and channel,
    then clamped to [0, 1].
    """
    params.validate()
    if tissue.taxonomy != Taxonomy.TISSUE:
        raise ValueError("implant_tumor needs a tissue label map")
    rng = _rng(params.seed, _STREAM_TUMOR)

    brain = tissue.data > 0
    if not brain.any():
        raise GeometryError("tissue map has no brain voxels")
    extents = [int(idx.max() - idx.min() + 1) for idx in np.nonzero(brain)]
    radius = float(rng.uniform(*params.tumor_radius_range))
    if 2.0 * radius > min(extents):
        raise GeometryError(
            f"tumor diameter {2 * radius:.1f} exceeds brain extent {min(extents)}"
        )

    center = sample_tumor_center(tissue, params.interface_affinity, rng)
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in tissue.data.shape),
                        indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))

    labels = np.zeros(tissue.data.shape, dtype=np.int8)
    labels[(dist <= radius) & brain] = 1
    labels[(dist <= params.tumor_mid_frac * radius) & brain] = 2
    labels[(dist <= params.tumor_core_frac * radius) & brain] = 3

    data = volume.data.astype(np.float64)
    offsets = np.asarray(params.tumor_intensity_offsets, dtype=np.float64)
    for k in (1, 2, 3):
        mask = labels == k
        if mask.any():
            data[:, mask] += offsets[k - 1][:, None]
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return Volume(data, volume.voxel_spacing, volume.channel_names), \
        LabelMap(labels, Taxonomy.TUMOR)


def apply_domain_shift(volume: Volume, shift: DomainShiftParams) -> Volume:
    """Intensity-only domain shift; label geometry is untouched by design."""
    shift.validate()
    rng = _rng(shift.seed, _STREAM_SHIFT)
    spatial = volume.spatial_shape
    data = volume.data.astype(np.float64)

    out = np.power(data, shift.gamma)
    if shift.bias_field_amplitude > 0:
        bias = 1.0 + shift.bias_field_amplitude * _smooth_field(spatial, rng)
        out = out * bias[None, ...]
    scale = np.asarray(shift.contrast_scale, dtype=np.float64)
    out = out * scale[:, None, None, None]
    if shift.extra_noise_sigma > 0:
        out = out + rng.normal(0.0, shift.extra_noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Volume(out, volume.voxel_spacing, volume.channel_names)


def _case_seed(dataset_seed: int, case_index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, case_index]).generate_state(1)[0])


def hidden_tissue_path(root: Path, case_id: str) -> Path:
    return Path(root) / "hidden" / f"{case_id}.tissue.bin"


def load_hidden_tissue(manifest: DatasetManifest, case_id: str) -> LabelMap:
    """Quarantined target-domain tissue truth; evaluation-only, never trained on."""
    path = hidden_tissue_path(manifest.root, case_id)
    if not path.exists():
        raise FileNotFoundError(f"no hidden tissue labels for case {case_id}")
    raw = np.frombuffer(path.read_bytes(), dtype="<i1")
    return LabelMap(raw.reshape(manifest.shape).copy(), Taxonomy.TISSUE)


def generate_dataset(out_dir: str | Path, n_source: int, n_target: int,
                     params: PhantomParams,
                     shift: DomainShiftParams) -> DatasetManifest:
    """Write a two-domain phantom dataset and its manifest under ``out_dir``.

    Source cases keep tissue labels and native appearance. Target cases get
    a tumor, the appearance shift, and tumor labels; their tissue labels go
    to a hidden sidecar (``hidden/<case_id>.tissue.bin``) that only the
    induction-quality audit may read. Per-case seeds derive from
    (dataset seed, case index), so regeneration is byte-identical.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError(f"need at least one case per domain, got {n_source}, {n_target}")
    params.validate()
    shift.validate()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[CaseRecord] = []

    for i in range(n_source):
        case_id = f"src_{i:03d}"
        case_params = replace(params, seed=_case_seed(params.seed, i))
        volume, tissue = generate_tissue_phantom(case_params)
        save_case(volume, tissue, out_dir / case_id)
        records.append(CaseRecord(case_id, Domain.SOURCE,
                                  f"{case_id}.img.bin", f"{case_id}.lbl.bin"))

    for j in range(n_target):
        idx = n_source + j
        case_id = f"tgt_{j:03d}"
        case_params = replace(params, seed=_case_seed(params.seed, idx))
        case_shift = replace(shift, seed=_case_seed(shift.seed, idx))
        volume, tissue = generate_tissue_phantom(case_params)
        volume, tumor = implant_tumor(volume, tissue, case_params)
        volume = apply_domain_shift(volume, case_shift)
        save_case(volume, tumor, out_dir / case_id)
        hp = hidden_tissue_path(out_dir, case_id)
        hp.parent.mkdir(exist_ok=True)
        hp.write_bytes(np.ascontiguousarray(tissue.data, dtype="<i1").tobytes())
        records.append(CaseRecord(case_id, Domain.TARGET,
                                  f"{case_id}.img.bin", f"{case_id}.lbl.bin"))

    manifest = DatasetManifest(cases=records, shape=params.shape, seed=params.seed)
    save_manifest(manifest, out_dir)
    report = validate_manifest(manifest)
    if not report.ok:
        raise RuntimeError(f"generated dataset failed validation:\n{report}")
    return manifest
