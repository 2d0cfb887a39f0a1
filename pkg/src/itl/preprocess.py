"""Crop, resample, and rescale volumes onto a fixed training grid.

Images are cropped to a bounding box (default: the nonzero extent across
all channels), trilinear-resampled with the align-corners convention, and
min-max rescaled per channel to [0, 1]. Label maps follow the same crop and
grid but are resampled nearest-neighbor only, so class ids survive intact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from itl.data import (
    DatasetManifest,
    LabelMap,
    Taxonomy,
    Volume,
    case_stem,
    load_case,
    load_manifest,
    save_case,
    save_manifest,
    validate_manifest,
)
from itl.phantoms import hidden_tissue_path

Bbox = tuple[int, int, int, int, int, int]


def nonzero_bbox(volume: Volume) -> Bbox:
    """Half-open (d0,d1,h0,h1,w0,w1) bounds of voxels nonzero in any channel."""
    hit = np.any(volume.data != 0, axis=0)
    if not hit.any():
        raise ValueError("volume is identically zero; no nonzero bounding box")
    bounds = []
    for ax in range(3):
        axes = tuple(a for a in range(3) if a != ax)
        line = hit.any(axis=axes)
        idx = np.nonzero(line)[0]
        bounds += [int(idx[0]), int(idx[-1]) + 1]
    return tuple(bounds)


def _check_bbox(bbox: Bbox, spatial_shape: tuple[int, int, int]) -> None:
    if len(bbox) != 6:
        raise ValueError(f"bbox must have 6 entries, got {len(bbox)}")
    for ax in range(3):
        lo, hi = bbox[2 * ax], bbox[2 * ax + 1]
        if not (0 <= lo < hi <= spatial_shape[ax]):
            raise ValueError(f"bbox {bbox} out of bounds for shape {spatial_shape}")


def _target_coords(bbox: Bbox, target_shape: tuple[int, int, int]) -> np.ndarray:
    """Sampling grid mapping output corner voxels onto cropped-input corners."""
    axes = []
    for ax in range(3):
        lo, hi = bbox[2 * ax], bbox[2 * ax + 1]
        axes.append(np.linspace(lo, hi - 1, target_shape[ax]))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack(grids)


def _validated(volume: Volume, target_shape, bbox) -> tuple[Bbox, tuple[int, int, int]]:
    volume.validate()
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or any(t < 2 for t in target_shape):
        raise ValueError(f"target_shape needs 3 axes of at least 2, got {target_shape}")
    if bbox is None:
        bbox = nonzero_bbox(volume)
    else:
        bbox = tuple(int(b) for b in bbox)
        _check_bbox(bbox, volume.spatial_shape)
    return bbox, target_shape


def _rescaled_spacing(volume: Volume, bbox: Bbox, target_shape) -> tuple[float, ...]:
    spacing = []
    for ax in range(3):
        span = bbox[2 * ax + 1] - bbox[2 * ax]
        spacing.append(volume.voxel_spacing[ax] * (span - 1) / (target_shape[ax] - 1))
    return tuple(spacing)


def resample_and_crop(volume: Volume, target_shape: tuple[int, int, int],
                      bbox: Bbox | None = None) -> Volume:
    """Crop to ``bbox`` (default: nonzero extent) and trilinear-resample.

    Align-corners convention: output corner voxel centers coincide with the
    corner voxel centers of the cropped input, so constants are exact and
    linear fields are reproduced to float rounding.
    """
    bbox, target_shape = _validated(volume, target_shape, bbox)
    coords = _target_coords(bbox, target_shape)
    out = np.empty((volume.data.shape[0], *target_shape), dtype=np.float64)
    for c in range(volume.data.shape[0]):
        out[c] = ndimage.map_coordinates(volume.data[c].astype(np.float64),
                                         coords, order=1, mode="nearest")
    return Volume(out.astype(np.float32),
                  _rescaled_spacing(volume, bbox, target_shape),
                  volume.channel_names)


def resample_labels(labels: LabelMap, target_shape: tuple[int, int, int],
                    bbox: Bbox) -> LabelMap:
    """Nearest-neighbor crop-and-resample; class ids are never blended."""
    target_shape = tuple(int(t) for t in target_shape)
    _check_bbox(bbox, labels.data.shape)
    coords = _target_coords(bbox, target_shape)
    out = ndimage.map_coordinates(labels.data, coords, order=0, mode="nearest")
    return LabelMap(out.astype(np.int8), labels.taxonomy)


def rescale_intensity(volume: Volume) -> Volume:
    """Per-channel min-max rescale to [0, 1]; a constant channel becomes zeros."""
    volume.validate()
    data = volume.data.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        lo, hi = data[c].min(), data[c].max()
        if hi > lo:
            out[c] = (data[c] - lo) / (hi - lo)
    return Volume(out.astype(np.float32), volume.voxel_spacing, volume.channel_names)


def apply_brain_mask(volume: Volume, mask: np.ndarray) -> Volume:
    """Zero every channel outside ``mask`` (a 3-D boolean array)."""
    volume.validate()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.spatial_shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match volume {volume.spatial_shape}"
        )
    out = volume.data * mask[None, ...].astype(np.float32)
    return Volume(out, volume.voxel_spacing, volume.channel_names)


def preprocess_case(volume: Volume, labels: LabelMap | None,
                    target_shape: tuple[int, int, int],
                    bbox: Bbox | None = None) -> tuple[Volume, LabelMap | None, Bbox]:
    """Crop + resample + rescale one case; labels ride along nearest-neighbor."""
    bbox, target_shape = _validated(volume, target_shape, bbox)
    out_vol = rescale_intensity(resample_and_crop(volume, target_shape, bbox))
    out_lbl = None
    if labels is not None:
        if labels.data.shape != volume.spatial_shape:
            raise ValueError("labels do not match volume shape")
        out_lbl = resample_labels(labels, target_shape, bbox)
    return out_vol, out_lbl, bbox


def preprocess_dataset(in_dir: str | Path, out_dir: str | Path,
                       target_shape: tuple[int, int, int]) -> DatasetManifest:
    """Preprocess every case of a dataset onto ``target_shape``.

    Each case is cropped to its own nonzero bounding box, resampled, and
    rescaled. Hidden tissue sidecars (when present) are carried through with
    the same crop so they stay aligned with the images.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    manifest = load_manifest(in_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_shape = tuple(int(t) for t in target_shape)

    for rec in manifest.cases:
        volume, labels = load_case(case_stem(manifest, rec.case_id))
        out_vol, out_lbl, bbox = preprocess_case(volume, labels, target_shape)
        save_case(out_vol, out_lbl, out_dir / rec.case_id)

        hidden_in = hidden_tissue_path(in_dir, rec.case_id)
        if hidden_in.exists():
            raw = np.frombuffer(hidden_in.read_bytes(), dtype="<i1")
            tissue = LabelMap(raw.reshape(manifest.shape).copy(), Taxonomy.TISSUE)
            tissue = resample_labels(tissue, target_shape, bbox)
            hidden_out = hidden_tissue_path(out_dir, rec.case_id)
            hidden_out.parent.mkdir(exist_ok=True)
            hidden_out.write_bytes(
                np.ascontiguousarray(tissue.data, dtype="<i1").tobytes())

    out_manifest = DatasetManifest(cases=list(manifest.cases), shape=target_shape,
                                   seed=manifest.seed)
    save_manifest(out_manifest, out_dir)
    report = validate_manifest(out_manifest)
    if not report.ok:
        raise RuntimeError(f"preprocessed dataset failed validation:\n{report}")
    return out_manifest
