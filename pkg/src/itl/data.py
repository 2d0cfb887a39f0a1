"""Canonical data types, the on-disk container format, and dataset manifests.

Container layout for a case with id ``case_id`` inside a dataset directory::

    <case_id>.json      header: shapes, dtypes, channel names, taxonomy
    <case_id>.img.bin   raw little-endian float32 voxels, C-order (C, D, H, W)
    <case_id>.lbl.bin   raw little-endian int8 labels, C-order (D, H, W)
    <case_id>.prob.bin  optional raw float32 probabilities (K, D, H, W)
    manifest.json       dataset root: case records, shape, seed

The format is deliberately trivial (JSON header + raw payload) so that
save/load round-trips are bit-exact and any language can read it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

N_TISSUE_CLASSES = 4
N_TUMOR_CLASSES = 4

DEFAULT_CHANNEL_NAMES = ("chan0", "chan1", "chan2", "chan3")

TISSUE_CLASS_NAMES = ("background", "white_matter", "gray_matter", "csf")
TUMOR_CLASS_NAMES = ("background", "edema", "non_enhancing", "enhancing")


class Taxonomy(str, Enum):
    TISSUE = "tissue"
    TUMOR = "tumor"


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class DataFormatError(ValueError):
    """Raised for malformed containers: bad headers, payload size mismatches,
    unknown format versions."""


@dataclass
class Volume:
    """A multi-channel volumetric image, stored as float32 (C, D, H, W)."""

    data: np.ndarray
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_names: tuple[str, ...] = DEFAULT_CHANNEL_NAMES

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        self.channel_names = tuple(str(n) for n in self.channel_names)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def validate(self) -> None:
        """Raise ValueError on any violated invariant."""
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-D (C,D,H,W), got ndim={self.data.ndim}")
        if len(self.channel_names) != self.n_channels:
            raise ValueError(
                f"{len(self.channel_names)} channel names for {self.n_channels} channels"
            )
        if len(self.voxel_spacing) != 3:
            raise ValueError("voxel_spacing must have 3 entries")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


@dataclass
class LabelMap:
    """Per-voxel categorical labels (D, H, W) under a tissue or tumor taxonomy.

    Both taxonomies use values {0, 1, 2, 3}: background plus three
    foreground classes (tissue: WM/GM/CSF; tumor: edema/non-enhancing/
    enhancing).
    """

    data: np.ndarray
    taxonomy: Taxonomy

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.int8)
        self.taxonomy = Taxonomy(self.taxonomy)

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"label map must be 3-D (D,H,W), got ndim={self.data.ndim}")
        lo, hi = int(self.data.min(initial=0)), int(self.data.max(initial=0))
        if lo < 0 or hi > 3:
            raise ValueError(
                f"label values outside {{0..3}} for taxonomy {self.taxonomy.value}: "
                f"range [{lo}, {hi}]"
            )


@dataclass
class ProbabilityMap:
    """Per-voxel class probabilities (K, D, H, W); sums to 1 over K."""

    data: np.ndarray

    NORMALIZATION_TOL = 1e-5

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    def validate(self) -> None:
        if self.data.ndim != 4:
            raise ValueError("probability map must be 4-D (K,D,H,W)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("probability map contains non-finite values")
        if self.data.min() < -self.NORMALIZATION_TOL or self.data.max() > 1 + self.NORMALIZATION_TOL:
            raise ValueError("probabilities outside [0, 1]")
        sums = self.data.sum(axis=0, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > self.NORMALIZATION_TOL:
            raise ValueError(f"per-voxel probabilities sum to 1 +/- {err:.2e}, tol 1e-5")

    def argmax_labels(self, taxonomy: Taxonomy = Taxonomy.TISSUE) -> LabelMap:
        """Hard labels by per-voxel argmax; ties break toward the lower class."""
        return LabelMap(np.argmax(self.data, axis=0).astype(np.int8), taxonomy)


@dataclass
class CaseRecord:
    case_id: str
    domain: Domain
    volume_path: str
    label_path: str | None = None
    induced_prob_path: str | None = None

    def __post_init__(self) -> None:
        self.domain = Domain(self.domain)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "domain": self.domain.value,
            "volume_path": self.volume_path,
            "label_path": self.label_path,
            "induced_prob_path": self.induced_prob_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseRecord":
        return cls(
            case_id=d["case_id"],
            domain=Domain(d["domain"]),
            volume_path=d["volume_path"],
            label_path=d.get("label_path"),
            induced_prob_path=d.get("induced_prob_path"),
        )


@dataclass
class DatasetManifest:
    """Index of a dataset directory; all paths are relative to ``root``."""

    cases: list[CaseRecord]
    shape: tuple[int, int, int]
    seed: int
    format_version: int = FORMAT_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)

    def case_ids(self, domain: Domain | None = None) -> list[str]:
        return [c.case_id for c in self.cases if domain is None or c.domain == domain]

    def record(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(f"no case {case_id!r} in manifest")

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "shape": list(self.shape),
            "seed": self.seed,
            "cases": [c.to_dict() for c in self.cases],
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise DataFormatError(f"unknown manifest format_version {d.get('format_version')!r}")
        return cls(
            cases=[CaseRecord.from_dict(c) for c in d["cases"]],
            shape=tuple(d["shape"]),
            seed=int(d["seed"]),
            root=root,
        )


@dataclass
class Violation:
    case_id: str | None
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, case_id: str | None, kind: str, message: str) -> None:
        self.violations.append(Violation(case_id, kind, message))

    def __str__(self) -> str:
        if self.ok:
            return "dataset OK (no violations)"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  [{v.kind}] {v.case_id or '<manifest>'}: {v.message}" for v in self.violations]
        return "\n".join(lines)


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a sibling temp file + rename, so readers never see partials."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _header_path(stem: Path) -> Path:
    return stem.with_name(stem.name + ".json")


def _img_path(stem: Path) -> Path:
    return stem.with_name(stem.name + ".img.bin")


def _lbl_path(stem: Path) -> Path:
    return stem.with_name(stem.name + ".lbl.bin")


def _prob_path(stem: Path) -> Path:
    return stem.with_name(stem.name + ".prob.bin")


def save_case(volume: Volume, labels: LabelMap | None, path: str | Path) -> None:
    """Write one case to ``<path>.json`` / ``<path>.img.bin`` [/ ``<path>.lbl.bin``].

    ``path`` is the case stem (directory + case id, no extension).
    Invariant violations are rejected, never clamped or repaired.
    """
    volume.validate()
    if volume.n_channels != 4:
        raise ValueError(f"domain images carry 4 channels, got {volume.n_channels}")
    if labels is not None:
        labels.validate()
        if labels.data.shape != volume.spatial_shape:
            raise ValueError(
                f"label shape {labels.data.shape} != volume spatial shape {volume.spatial_shape}"
            )

    stem = Path(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "shape": list(volume.data.shape),
        "dtype": "float32",
        "voxel_spacing": list(volume.voxel_spacing),
        "channel_names": list(volume.channel_names),
        "labels": None if labels is None else {"taxonomy": labels.taxonomy.value, "dtype": "int8"},
    }
    atomic_write_text(_header_path(stem), json.dumps(header, indent=1) + "\n")
    atomic_write_bytes(_img_path(stem), np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    if labels is not None:
        atomic_write_bytes(_lbl_path(stem), np.ascontiguousarray(labels.data, dtype="<i1").tobytes())


def load_case(path: str | Path) -> tuple[Volume, LabelMap | None]:
    """Read a case written by :func:`save_case`; round-trips bit-exactly."""
    stem = Path(path)
    hp = _header_path(stem)
    if not hp.exists():
        raise FileNotFoundError(f"missing case header {hp}")
    header = json.loads(hp.read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unknown format_version {header.get('format_version')!r} in {hp}")
    shape = tuple(header["shape"])
    raw = _img_path(stem).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataFormatError(
            f"{_img_path(stem)}: payload is {len(raw)} bytes, header declares {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    volume = Volume(
        data=data.copy(),
        voxel_spacing=tuple(header["voxel_spacing"]),
        channel_names=tuple(header["channel_names"]),
    )
    labels = None
    if header["labels"] is not None:
        lraw = _lbl_path(stem).read_bytes()
        if len(lraw) != int(np.prod(shape[1:])):
            raise DataFormatError(
                f"{_lbl_path(stem)}: payload is {len(lraw)} bytes, "
                f"header declares {int(np.prod(shape[1:]))}"
            )
        ldata = np.frombuffer(lraw, dtype="<i1").reshape(shape[1:])
        labels = LabelMap(ldata.copy(), Taxonomy(header["labels"]["taxonomy"]))
    return volume, labels


def save_probability_map(prob: ProbabilityMap, path: str | Path) -> None:
    """Write a probability map next to its case as ``<path>.prob.bin``."""
    prob.validate()
    stem = Path(path)
    atomic_write_bytes(_prob_path(stem), np.ascontiguousarray(prob.data, dtype="<f4").tobytes())


def load_probability_map(path: str | Path, spatial_shape: tuple[int, int, int],
                          n_classes: int = 4) -> ProbabilityMap:
    stem = Path(path)
    pp = _prob_path(stem)
    if not pp.exists():
        raise FileNotFoundError(f"missing probability map {pp}")
    raw = pp.read_bytes()
    shape = (n_classes,) + tuple(spatial_shape)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataFormatError(f"{pp}: payload is {len(raw)} bytes, expected {expected}")
    return ProbabilityMap(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())


def save_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = root / "manifest.json"
    atomic_write_text(out, json.dumps(manifest.to_dict(), indent=1) + "\n")
    manifest.root = root
    return out


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    mp = root / "manifest.json"
    if not mp.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return DatasetManifest.from_dict(json.loads(mp.read_text()), root=root)


def case_stem(manifest: DatasetManifest, case_id: str) -> Path:
    if manifest.root is None:
        raise ValueError("manifest has no root directory; load it with load_manifest()")
    return manifest.root / case_id


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    """Check every dataset invariant; violations are report entries, not errors.

    An empty report means the dataset is usable for training/evaluation.
    """
    report = ValidationReport()
    seen: set[str] = set()
    for rec in manifest.cases:
        if rec.case_id in seen:
            report.add(rec.case_id, "duplicate-id", "case_id appears more than once")
            continue
        seen.add(rec.case_id)

        if manifest.root is None:
            report.add(rec.case_id, "no-root", "manifest not bound to a directory")
            continue
        stem = manifest.root / rec.case_id
        try:
            volume, labels = load_case(stem)
        except (FileNotFoundError, DataFormatError, ValueError) as exc:
            report.add(rec.case_id, "unreadable", str(exc))
            continue

        if volume.spatial_shape != manifest.shape:
            report.add(
                rec.case_id, "shape",
                f"volume spatial shape {volume.spatial_shape} != manifest {manifest.shape}",
            )
        if volume.n_channels != 4:
            report.add(rec.case_id, "channels", f"expected 4 channels, got {volume.n_channels}")
        if not np.all(np.isfinite(volume.data)):
            report.add(rec.case_id, "finite", "volume contains non-finite values")
        elif volume.data.min() < 0.0 or volume.data.max() > 1.0:
            report.add(
                rec.case_id, "range",
                f"intensities outside [0,1]: [{volume.data.min():.4g}, {volume.data.max():.4g}]",
            )

        expected_tax = Taxonomy.TISSUE if rec.domain == Domain.SOURCE else Taxonomy.TUMOR
        if labels is None:
            report.add(
                rec.case_id, "missing-labels",
                f"{rec.domain.value} case must carry {expected_tax.value} labels",
            )
        else:
            if labels.taxonomy != expected_tax:
                report.add(
                    rec.case_id, "taxonomy",
                    f"{rec.domain.value} case has {labels.taxonomy.value} labels, "
                    f"expected {expected_tax.value}",
                )
            try:
                labels.validate()
            except ValueError as exc:
                report.add(rec.case_id, "labels", str(exc))

        if rec.induced_prob_path is not None:
            try:
                prob = load_probability_map(stem, manifest.shape)
                prob.validate()
            except (FileNotFoundError, DataFormatError, ValueError) as exc:
                report.add(rec.case_id, "induced", str(exc))
    return report
