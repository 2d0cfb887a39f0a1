"""3-D networks: U-Net segmentor, residual translator, patch discriminator.

All convolutions are 3x3x3. Normalization defaults to instance norm without
affine parameters, the standard choice for unpaired translation. Forward
passes are deterministic given (parameters, input); there is no dropout.

Checkpoints are a JSON header (kind, architecture fields, training step,
optional RNG state) plus a raw little-endian parameter blob, so a reload
reproduces bit-identical forward outputs and any language can parse them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from itl.data import (
    DataFormatError,
    ProbabilityMap,
    Volume,
    atomic_write_bytes,
    atomic_write_text,
)

CHECKPOINT_VERSION = 1

_NORM_KINDS = ("instance", "batch", "none")


class _SafeNorm(nn.Module):
    """Wraps a norm layer; single-voxel feature maps pass through unchanged,
    since normalizing one element is degenerate (and torch rejects it)."""

    def __init__(self, norm: nn.Module):
        super().__init__()
        self.norm = norm

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] * x.shape[3] * x.shape[4] == 1:
            return x
        return self.norm(x)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return _SafeNorm(nn.InstanceNorm3d(channels, affine=False))
    if kind == "batch":
        return _SafeNorm(nn.BatchNorm3d(channels))
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}, expected one of {_NORM_KINDS}")


@dataclass
class SegmentorSpec:
    """U-Net shape: ``levels`` resolutions, width doubling per level."""

    in_channels: int = 4
    n_classes: int = 4
    levels: int = 3
    base_width: int = 8
    norm: str = "instance"

    def validate(self) -> None:
        if self.in_channels not in (4, 8):
            raise ValueError(f"in_channels must be 4 or 8, got {self.in_channels}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.norm not in _NORM_KINDS:
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def divisor(self) -> int:
        """Spatial dims must be divisible by this (one halving per extra level)."""
        return 2 ** (self.levels - 1)


@dataclass
class GeneratorSpec:
    """Residual image translator; output stays in [0,1]."""

    channels: int = 4
    down_stages: int = 2
    res_blocks: int = 4
    base_width: int = 8
    norm: str = "instance"

    def validate(self) -> None:
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.down_stages < 1:
            raise ValueError("down_stages must be >= 1")
        if self.res_blocks < 1:
            raise ValueError("res_blocks must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.norm not in _NORM_KINDS:
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def divisor(self) -> int:
        return 2 ** self.down_stages


@dataclass
class DiscriminatorSpec:
    """Patch discriminator: ``down_stages`` stride-2 convs, sigmoid scores."""

    in_channels: int = 4
    down_stages: int = 3
    base_width: int = 8
    norm: str = "instance"

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.down_stages < 1:
            raise ValueError("down_stages must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.norm not in _NORM_KINDS:
            raise ValueError(f"unknown norm {self.norm!r}")

    def output_shape(self, spatial_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        """Patch-score grid: each stride-2 stage takes the ceiling half."""
        out = spatial_shape
        for _ in range(self.down_stages):
            out = tuple(math.ceil(s / 2) for s in out)
        return out


def _conv_block(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        _norm(norm, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        _norm(norm, out_ch),
        nn.ReLU(inplace=True),
    )


def _down(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=2, padding=1),
        _norm(norm, out_ch),
        nn.ReLU(inplace=True),
    )


def _check_input(x: torch.Tensor, expect_channels: int, divisor: int, who: str) -> None:
    if x.dim() != 5:
        raise ValueError(f"{who} expects (B,C,D,H,W) input, got {x.dim()}-D")
    if x.shape[1] != expect_channels:
        raise ValueError(f"{who} expects {expect_channels} channels, got {x.shape[1]}")
    bad = [s for s in x.shape[2:] if s % divisor]
    if bad:
        raise ValueError(
            f"{who} needs spatial dims divisible by {divisor}, got {tuple(x.shape[2:])}"
        )


class Segmentor3d(nn.Module):
    """Encoder-decoder with skip concatenation and a per-voxel softmax head."""

    def __init__(self, spec: SegmentorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        widths = [spec.base_width * 2 ** i for i in range(spec.levels)]

        self.enc0 = _conv_block(spec.in_channels, widths[0], spec.norm)
        self.downs = nn.ModuleList()
        self.encs = nn.ModuleList()
        for i in range(1, spec.levels):
            self.downs.append(_down(widths[i - 1], widths[i], spec.norm))
            self.encs.append(_conv_block(widths[i], widths[i], spec.norm))

        self.up_projs = nn.ModuleList()
        self.decs = nn.ModuleList()
        for i in range(spec.levels - 1, 0, -1):
            self.up_projs.append(nn.Sequential(
                nn.Conv3d(widths[i], widths[i - 1], 3, padding=1),
                _norm(spec.norm, widths[i - 1]),
                nn.ReLU(inplace=True),
            ))
            self.decs.append(_conv_block(2 * widths[i - 1], widths[i - 1], spec.norm))

        self.head = nn.Conv3d(widths[0], spec.n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.in_channels, self.spec.divisor, "segmentor")
        skips = [self.enc0(x)]
        h = skips[0]
        for down, enc in zip(self.downs, self.encs):
            h = enc(down(h))
            skips.append(h)
        for up, dec, skip in zip(self.up_projs, self.decs, reversed(skips[:-1])):
            h = nn.functional.interpolate(h, scale_factor=2, mode="trilinear",
                                          align_corners=True)
            h = dec(torch.cat([up(h), skip], dim=1))
        return torch.softmax(self.head(h), dim=1)


class _ResBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            _norm(norm, channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            _norm(norm, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Generator3d(nn.Module):
    """Down-residual-up translator with a gated global skip.

    Output is a per-voxel convex mix of the input and a sigmoid-bounded
    candidate, so values stay in [0,1] without clamping. The gate bias starts
    at -4 (gate ~0.02), so an untrained translator is close to identity and
    training only has to learn the appearance correction, not reconstruction.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.Conv3d(spec.channels, w, 3, padding=1),
            _norm(spec.norm, w),
            nn.ReLU(inplace=True),
        ]
        for _ in range(spec.down_stages):
            layers.append(_down(w, 2 * w, spec.norm))
            w *= 2
        layers += [_ResBlock(w, spec.norm) for _ in range(spec.res_blocks)]
        self.encoder = nn.Sequential(*layers)

        up: list[nn.Module] = []
        for _ in range(spec.down_stages):
            up.append(_Upsample(w, w // 2, spec.norm))
            w //= 2
        self.decoder = nn.Sequential(*up)
        self.head = nn.Conv3d(w, spec.channels, 3, padding=1)
        self.gate = nn.Conv3d(w, spec.channels, 3, padding=1)
        with torch.no_grad():
            self.gate.bias.fill_(-4.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.channels, self.spec.divisor, "generator")
        h = self.decoder(self.encoder(x))
        candidate = torch.sigmoid(self.head(h))
        t = torch.sigmoid(self.gate(h))
        return x + t * (candidate - x)


class _Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm: str):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="trilinear",
                                      align_corners=True)
        return self.conv(x)


class PatchDiscriminator3d(nn.Module):
    """Stack of stride-2 convs with LeakyReLU; sigmoid patch scores in (0,1)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        layers: list[nn.Module] = []
        in_ch, w = spec.in_channels, spec.base_width
        for stage in range(spec.down_stages):
            layers.append(nn.Conv3d(in_ch, w, 3, stride=2, padding=1))
            if stage > 0:  # first stage stays norm-free, PatchGAN-style
                layers.append(_norm(spec.norm, w))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch, w = w, min(2 * w, 8 * spec.base_width)
        layers.append(nn.Conv3d(in_ch, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.in_channels, 1, "discriminator")
        return torch.sigmoid(self.body(x))


_KINDS: dict[str, tuple[type, type]] = {
    "segmentor": (SegmentorSpec, Segmentor3d),
    "generator": (GeneratorSpec, Generator3d),
    "discriminator": (DiscriminatorSpec, PatchDiscriminator3d),
}


def _kind_of(model: nn.Module) -> str:
    for kind, (_, cls) in _KINDS.items():
        if type(model) is cls:
            return kind
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _build(kind: str, spec, seed: int | None) -> nn.Module:
    cls = _KINDS[kind][1]
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return cls(spec)


def build_segmentor(spec: SegmentorSpec | None = None, seed: int = 0) -> Segmentor3d:
    return _build("segmentor", spec or SegmentorSpec(), seed)


def build_generator(spec: GeneratorSpec | None = None, seed: int = 0) -> Generator3d:
    return _build("generator", spec or GeneratorSpec(), seed)


def build_discriminator(spec: DiscriminatorSpec | None = None,
                        seed: int = 0) -> PatchDiscriminator3d:
    return _build("discriminator", spec or DiscriminatorSpec(), seed)


_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_NP_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


def params_blob(model: nn.Module) -> bytes:
    """All state tensors concatenated in state_dict order, little-endian."""
    chunks = []
    for tensor in model.state_dict().values():
        dtype = _DTYPES[tensor.dtype]
        chunks.append(np.ascontiguousarray(tensor.detach().numpy(), dtype=dtype).tobytes())
    return b"".join(chunks)


def save_checkpoint(model: nn.Module, path: str | Path, step: int = 0,
                    rng_state: bytes | None = None) -> None:
    """Write ``<path>.json`` (header) + ``<path>.params.bin`` (raw blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = _kind_of(model)
    tensors = [
        {"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype]}
        for name, t in model.state_dict().items()
    ]
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": asdict(model.spec),
        "step": int(step),
        "rng_state": rng_state.hex() if rng_state is not None else None,
        "tensors": tensors,
    }
    atomic_write_text(path.with_name(path.name + ".json"),
                      json.dumps(header, indent=1) + "\n")
    atomic_write_bytes(path.with_name(path.name + ".params.bin"), params_blob(model))


def load_checkpoint(path: str | Path) -> tuple[nn.Module, int, bytes | None]:
    """Rebuild (model, step, rng_state) bit-exactly from :func:`save_checkpoint`."""
    path = Path(path)
    hp = path.with_name(path.name + ".json")
    if not hp.exists():
        raise FileNotFoundError(f"missing checkpoint header {hp}")
    header = json.loads(hp.read_text())
    if header.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"unknown checkpoint_version {header.get('checkpoint_version')!r} in {hp}"
        )
    kind = header["kind"]
    if kind not in _KINDS:
        raise DataFormatError(f"unknown checkpoint kind {kind!r}")
    spec_cls = _KINDS[kind][0]
    spec = spec_cls(**{k: tuple(v) if isinstance(v, list) else v
                       for k, v in header["spec"].items()})
    model = _build(kind, spec, seed=None)

    raw = path.with_name(path.name + ".params.bin").read_bytes()
    state = {}
    offset = 0
    for entry in header["tensors"]:
        np_dtype = _NP_DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(raw):
            raise DataFormatError(f"checkpoint blob too small for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(
            f"checkpoint blob has {len(raw) - offset} trailing bytes"
        )
    model.load_state_dict(state)
    rng_hex = header.get("rng_state")
    return model, int(header["step"]), bytes.fromhex(rng_hex) if rng_hex else None


def _to_batch(data: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data)).to(dtype).unsqueeze(0)


def segmentor_forward(model: Segmentor3d, volume: Volume) -> ProbabilityMap:
    """Inference wrapper: Volume in, per-voxel class probabilities out."""
    volume.validate()
    param = next(model.parameters())
    with torch.no_grad():
        probs = model(_to_batch(volume.data, param.dtype))
    return ProbabilityMap(probs.squeeze(0).numpy().astype(np.float32))


def generator_forward(model: Generator3d, volume: Volume) -> Volume:
    """Inference wrapper: translated Volume with spacing and names preserved."""
    volume.validate()
    param = next(model.parameters())
    with torch.no_grad():
        out = model(_to_batch(volume.data, param.dtype))
    return Volume(out.squeeze(0).numpy().astype(np.float32),
                  volume.voxel_spacing, volume.channel_names)


def discriminator_forward(model: PatchDiscriminator3d,
                          x: Volume | ProbabilityMap) -> np.ndarray:
    """Inference wrapper: patch-score array (D', H', W'), values in (0, 1)."""
    x.validate()
    param = next(model.parameters())
    with torch.no_grad():
        scores = model(_to_batch(x.data, param.dtype))
    return scores.squeeze(0).squeeze(0).numpy().astype(np.float32)
