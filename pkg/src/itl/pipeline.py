"""Three-step training pipeline.

Step 1 trains a tissue segmentor on labeled source cases. Step 2 adapts
the target domain to it with a cycle-consistent translator pair and three
discriminators, keeping the tissue segmentor frozen. Step 3 trains a tumor
segmentor on target cases, optionally concatenating the tissue probability
maps induced by composing the trained translator with the frozen segmentor.

All loops are plain full-volume iterations at desk scale: cases are small
enough to keep in memory, batches are sampled with replacement from a
seeded stream, and checkpoints/logs land in the configured directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from itl.data import (
    DatasetManifest,
    Domain,
    LabelMap,
    ProbabilityMap,
    Taxonomy,
    Volume,
    case_stem,
    load_case,
    load_manifest,
    load_probability_map,
    save_manifest,
    save_probability_map,
)
from itl.evalstats import per_class_dice
from itl.losses import (
    LossWeights,
    UdaBatch,
    UdaModels,
    cycle_consistency_loss,
    identity_loss,
    multiclass_dice_loss,
    one_hot_labels,
    uda_discriminator_objective,
    uda_generator_objective,
)
from itl.nets import (
    DiscriminatorSpec,
    Generator3d,
    GeneratorSpec,
    Segmentor3d,
    SegmentorSpec,
    build_discriminator,
    build_generator,
    build_segmentor,
    generator_forward,
    load_checkpoint,
    params_blob,
    save_checkpoint,
    segmentor_forward,
)


class Stage(str, Enum):
    SD_SEG = "sd_seg"
    UDA = "uda"
    TD_SEG = "td_seg"


@dataclass
class TrainConfig:
    """One training stage: data assignment, optimizer, nets, output dir."""

    stage: Stage
    manifest_path: str
    checkpoint_dir: str
    train_ids: list[str]
    val_ids: list[str] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)  # UDA source pool
    iterations: int = 100
    batch_size: int = 2
    seed: int = 0
    lr: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    val_interval: int = 25
    disc_steps: int = 1
    warmup_iterations: int = 0  # UDA: reconstruction-only lead-in
    disc_lr_scale: float = 1.0  # UDA: discriminator lr = lr * this
    use_fake_pool: bool = False
    onehot_induced: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    segmentor: SegmentorSpec | None = None
    generator: GeneratorSpec | None = None
    discriminator: DiscriminatorSpec | None = None

    def __post_init__(self) -> None:
        self.stage = Stage(self.stage)
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be >= 1")
        if not (0 <= self.warmup_iterations <= self.iterations):
            raise ValueError("warmup_iterations must lie in [0, iterations]")
        if self.disc_lr_scale <= 0:
            raise ValueError("disc_lr_scale must be positive")
        if not self.train_ids:
            raise ValueError("train_ids is empty")
        self.loss_weights.validate()
        for spec in (self.segmentor, self.generator, self.discriminator):
            if spec is not None:
                spec.validate()

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage.value,
            "manifest_path": str(self.manifest_path),
            "checkpoint_dir": str(self.checkpoint_dir),
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "source_ids": list(self.source_ids),
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lr": self.lr,
            "betas": list(self.betas),
            "val_interval": self.val_interval,
            "disc_steps": self.disc_steps,
            "warmup_iterations": self.warmup_iterations,
            "disc_lr_scale": self.disc_lr_scale,
            "use_fake_pool": self.use_fake_pool,
            "onehot_induced": self.onehot_induced,
            "loss_weights": asdict(self.loss_weights),
        }
        for name, spec in (("segmentor", self.segmentor), ("generator", self.generator),
                           ("discriminator", self.discriminator)):
            d[name] = None if spec is None else asdict(spec)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        spec_types = {"segmentor": SegmentorSpec, "generator": GeneratorSpec,
                      "discriminator": DiscriminatorSpec}
        kwargs = dict(d)
        for name, spec_cls in spec_types.items():
            if kwargs.get(name) is not None:
                kwargs[name] = spec_cls(**kwargs[name])
        if kwargs.get("loss_weights") is not None:
            kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
        kwargs["betas"] = tuple(kwargs.get("betas", (0.9, 0.999)))
        return cls(**kwargs)


# ------------------------------------------------------------- data loading

@dataclass
class LoadedCase:
    """One case held in memory: network input plus optional integer labels."""

    case_id: str
    inputs: np.ndarray  # (C, D, H, W) float32, image or image ++ induced
    labels: np.ndarray | None  # (D, H, W) int8


def _induced_channels(prob: ProbabilityMap, onehot: bool) -> np.ndarray:
    if not onehot:
        return prob.data
    hard = np.argmax(prob.data, axis=0)
    eye = np.eye(prob.n_classes, dtype=np.float32)
    return np.moveaxis(eye[hard], -1, 0)


def load_training_cases(manifest: DatasetManifest, ids: Sequence[str],
                        taxonomy: Taxonomy | None,
                        induced: Mapping[str, ProbabilityMap] | None = None,
                        onehot_induced: bool = False) -> list[LoadedCase]:
    """Materialize cases; demands labels of the given taxonomy when asked."""
    cases = []
    for cid in ids:
        volume, labels = load_case(case_stem(manifest, cid))
        if taxonomy is not None:
            if labels is None or labels.taxonomy != taxonomy:
                raise ValueError(f"case {cid!r} lacks {taxonomy.value} labels")
        inputs = volume.data
        if induced is not None:
            if cid not in induced:
                raise ValueError(f"induced map missing for case {cid!r}")
            inputs = np.concatenate(
                [inputs, _induced_channels(induced[cid], onehot_induced)])
        cases.append(LoadedCase(case_id=cid, inputs=inputs,
                                labels=None if labels is None else labels.data))
    if not cases:
        raise ValueError("no cases to load")
    return cases


def load_induced_maps(manifest: DatasetManifest,
                      ids: Sequence[str]) -> dict[str, ProbabilityMap]:
    """Read cached induced tissue probabilities recorded in the manifest."""
    out = {}
    for cid in ids:
        rec = manifest.record(cid)
        if rec.induced_prob_path is None:
            raise ValueError(f"no induced map recorded for case {cid!r}")
        out[cid] = load_probability_map(case_stem(manifest, cid), manifest.shape)
    return out


def _batch(cases: Sequence[LoadedCase], idx: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.stack([cases[i].inputs for i in idx]))


def _label_batch(cases: Sequence[LoadedCase], idx: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(
        np.stack([cases[i].labels for i in idx]).astype(np.int64))


# --------------------------------------------------------- segmentor stages

def _predict_labels(model: Segmentor3d, inputs: np.ndarray,
                    taxonomy: Taxonomy) -> LabelMap:
    with torch.no_grad():
        probs = model(torch.from_numpy(inputs).unsqueeze(0)).squeeze(0).numpy()
    # np.argmax keeps the first maximum: ties resolve toward lower class index
    return LabelMap(np.argmax(probs, axis=0).astype(np.int8), taxonomy)


def _mean_foreground_dice(model: Segmentor3d, cases: Sequence[LoadedCase],
                          taxonomy: Taxonomy) -> float:
    model.eval()
    scores = []
    for case in cases:
        pred = _predict_labels(model, case.inputs, taxonomy)
        truth = LabelMap(case.labels, taxonomy)
        scores.append(float(np.mean(list(per_class_dice(pred, truth).values()))))
    model.train()
    return float(np.mean(scores))


def _train_segmentor_loop(model: Segmentor3d, train_cases: list[LoadedCase],
                          val_cases: list[LoadedCase], config: TrainConfig,
                          taxonomy: Taxonomy, ckpt_path: Path,
                          log_path: Path, stage_name: str) -> float:
    """Dice-loss training with periodic validation; best-val model is kept."""
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    best = -1.0
    with open(log_path, "w") as log:
        for it in range(1, config.iterations + 1):
            idx = rng.integers(0, len(train_cases), size=config.batch_size)
            probs = model(_batch(train_cases, idx))
            loss = multiclass_dice_loss(probs, one_hot_labels(_label_batch(train_cases, idx)))
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise FloatingPointError(
                    f"{stage_name} training diverged at iteration {it}: loss={loss_value}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            entry = {"iteration": it, "loss": loss_value}
            if it % config.val_interval == 0 or it == config.iterations:
                val_dice = _mean_foreground_dice(model, val_cases, taxonomy)
                entry["val_dice"] = val_dice
                if val_dice > best:
                    best = val_dice
                    save_checkpoint(model, ckpt_path, step=it)
            log.write(json.dumps(entry) + "\n")
    return best


def train_sd_segmentor(config: TrainConfig) -> Path:
    """Step 1: tissue segmentor on labeled source cases; returns best checkpoint."""
    config.validate()
    if config.stage != Stage.SD_SEG:
        raise ValueError(f"config stage is {config.stage.value}, expected sd_seg")
    spec = config.segmentor or SegmentorSpec()
    if spec.in_channels != 4:
        raise ValueError("tissue segmentor consumes the 4 image channels")
    manifest = load_manifest(config.manifest_path)
    train_cases = load_training_cases(manifest, config.train_ids, Taxonomy.TISSUE)
    val_cases = (load_training_cases(manifest, config.val_ids, Taxonomy.TISSUE)
                 if config.val_ids else train_cases)
    model = build_segmentor(spec, seed=config.seed)
    out_dir = Path(config.checkpoint_dir)
    ckpt_path = out_dir / "sd_segmentor.ckpt"
    _train_segmentor_loop(model, train_cases, val_cases, config, Taxonomy.TISSUE,
                          ckpt_path, out_dir / "train_sd.log.jsonl", "sd segmentor")
    return ckpt_path


def train_td_segmentor(config: TrainConfig,
                       induced: Mapping[str, ProbabilityMap] | None = None) -> Path:
    """Step 3: tumor segmentor on target cases, 8-channel when induced maps given."""
    config.validate()
    if config.stage != Stage.TD_SEG:
        raise ValueError(f"config stage is {config.stage.value}, expected td_seg")
    expected_channels = 4 if induced is None else 8
    spec = config.segmentor or SegmentorSpec(in_channels=expected_channels)
    if spec.in_channels != expected_channels:
        raise ValueError(
            f"segmentor in_channels must be {expected_channels} for this run, "
            f"got {spec.in_channels}")
    manifest = load_manifest(config.manifest_path)
    train_cases = load_training_cases(manifest, config.train_ids, Taxonomy.TUMOR,
                                      induced, config.onehot_induced)
    val_cases = (load_training_cases(manifest, config.val_ids, Taxonomy.TUMOR,
                                     induced, config.onehot_induced)
                 if config.val_ids else train_cases)
    model = build_segmentor(spec, seed=config.seed)
    out_dir = Path(config.checkpoint_dir)
    ckpt_path = out_dir / "td_segmentor.ckpt"
    _train_segmentor_loop(model, train_cases, val_cases, config, Taxonomy.TUMOR,
                          ckpt_path, out_dir / "train_td.log.jsonl", "td segmentor")
    return ckpt_path


def predict_tumor_labels(segmentor: Segmentor3d, volume: Volume,
                         induced: ProbabilityMap | None = None) -> LabelMap:
    """Per-voxel argmax of the tumor segmentor; ties go to the lower index."""
    volume.validate()
    inputs = volume.data
    if induced is not None:
        induced.validate()
        inputs = np.concatenate([inputs, induced.data])
    if inputs.shape[0] != segmentor.spec.in_channels:
        raise ValueError(
            f"segmentor expects {segmentor.spec.in_channels} input channels, "
            f"got {inputs.shape[0]}; pass induced maps iff trained with them")
    return _predict_labels(segmentor, inputs, Taxonomy.TUMOR)


# ------------------------------------------------------------------ step 2

@dataclass
class UdaCheckpoints:
    """Paths of everything train_uda writes."""

    g_t2s: Path
    g_s2t: Path
    d_s: Path
    d_t: Path
    d_m: Path
    log_path: Path


class _FakePool:
    """History buffer of detached fakes shown to a discriminator (optional)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.items: list[torch.Tensor] = []

    def query(self, fake: torch.Tensor) -> torch.Tensor:
        fake = fake.detach()
        if len(self.items) < self.capacity:
            self.items.append(fake)
            return fake
        if self.rng.random() < 0.5:
            return fake
        slot = int(self.rng.integers(len(self.items)))
        old = self.items[slot]
        self.items[slot] = fake
        return old


def _disc_fake(which: str, batch: UdaBatch, models: UdaModels) -> torch.Tensor:
    if which == "d_s":
        return models.g_t2s(batch.x_t)
    if which == "d_t":
        return models.g_s2t(batch.x_s)
    if which == "d_m":
        return models.f_s(models.g_t2s(batch.x_t))
    raise ValueError(f"unknown discriminator {which!r}")


def _warmup_objective(batch: UdaBatch, models: UdaModels,
                      weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Reconstruction-only generator objective for the adversarial lead-in.

    Untrained generators first have to learn to reproduce their input at all;
    training cycle and identity terms alone for a while gives the adversarial
    phase a sane starting point instead of fighting random reconstructions.
    """
    fake_t = models.g_s2t(batch.x_s)
    fake_s = models.g_t2s(batch.x_t)
    raw_cycle = cycle_consistency_loss(batch.x_t, models.g_s2t(fake_s),
                                       batch.x_s, models.g_t2s(fake_t))
    raw_identity = identity_loss(batch.x_s, fake_t, batch.x_t, fake_s)
    total = weights.beta * raw_cycle + weights.gamma * raw_identity
    breakdown = {
        "cycle": float((weights.beta * raw_cycle).detach()),
        "identity": float((weights.gamma * raw_identity).detach()),
        "raw_cycle": float(raw_cycle.detach()),
        "raw_identity": float(raw_identity.detach()),
    }
    breakdown["total"] = breakdown["cycle"] + breakdown["identity"]
    return total, breakdown


def train_uda(config: TrainConfig, sd_ckpt: str | Path) -> UdaCheckpoints:
    """Step 2: adversarial translation training against the frozen segmentor.

    Each iteration updates D_s, D_t, D_m first (one step each, ``disc_steps``
    rounds), then both generators jointly on the combined objective.
    """
    config.validate()
    if config.stage != Stage.UDA:
        raise ValueError(f"config stage is {config.stage.value}, expected uda")
    f_s, _, _ = load_checkpoint(Path(sd_ckpt))
    if not isinstance(f_s, Segmentor3d):
        raise ValueError(f"{sd_ckpt} does not hold a segmentor checkpoint")
    f_s.eval()
    for p in f_s.parameters():
        p.requires_grad_(False)
    fs_blob_before = params_blob(f_s)

    manifest = load_manifest(config.manifest_path)
    source_ids = config.source_ids or manifest.case_ids(Domain.SOURCE)
    src_cases = load_training_cases(manifest, source_ids, Taxonomy.TISSUE)
    tgt_cases = load_training_cases(manifest, config.train_ids, None)

    g_spec = config.generator or GeneratorSpec()
    d_spec = config.discriminator or DiscriminatorSpec()
    g_t2s = build_generator(g_spec, seed=config.seed + 11)
    g_s2t = build_generator(g_spec, seed=config.seed + 12)
    d_s = build_discriminator(d_spec, seed=config.seed + 13)
    d_t = build_discriminator(d_spec, seed=config.seed + 14)
    d_m = build_discriminator(d_spec, seed=config.seed + 15)
    models = UdaModels(g_t2s=g_t2s, g_s2t=g_s2t, d_s=d_s, d_t=d_t, d_m=d_m, f_s=f_s)

    opt_g = torch.optim.Adam(
        list(g_t2s.parameters()) + list(g_s2t.parameters()),
        lr=config.lr, betas=config.betas)
    disc_lr = config.lr * config.disc_lr_scale
    disc_opts = {
        "d_s": torch.optim.Adam(d_s.parameters(), lr=disc_lr, betas=config.betas),
        "d_t": torch.optim.Adam(d_t.parameters(), lr=disc_lr, betas=config.betas),
        "d_m": torch.optim.Adam(d_m.parameters(), lr=disc_lr, betas=config.betas),
    }
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))
    pools = None
    if config.use_fake_pool:
        pool_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 203]))
        pools = {name: _FakePool(16, pool_rng) for name in disc_opts}

    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_uda.log.jsonl"
    with open(log_path, "w") as log:
        for it in range(1, config.iterations + 1):
            idx_s = rng.integers(0, len(src_cases), size=config.batch_size)
            idx_t = rng.integers(0, len(tgt_cases), size=config.batch_size)
            batch = UdaBatch(
                x_s=_batch(src_cases, idx_s),
                x_t=_batch(tgt_cases, idx_t),
                y_s=one_hot_labels(_label_batch(src_cases, idx_s)),
            )
            warming_up = it <= config.warmup_iterations
            entry: dict = {"iteration": it,
                           "phase": "warmup" if warming_up else "adversarial"}
            try:
                if not warming_up:
                    for _ in range(config.disc_steps):
                        for which, opt in disc_opts.items():
                            fake_override = None
                            if pools is not None:
                                with torch.no_grad():
                                    fake_override = pools[which].query(
                                        _disc_fake(which, batch, models))
                            loss = uda_discriminator_objective(
                                which, batch, models, fake_override=fake_override)
                            opt.zero_grad()
                            loss.backward()
                            opt.step()
                            entry[which] = float(loss.detach())
                if warming_up:
                    total, breakdown = _warmup_objective(
                        batch, models, config.loss_weights)
                else:
                    total, breakdown = uda_generator_objective(
                        batch, models, config.loss_weights)
                opt_g.zero_grad()
                total.backward()
                opt_g.step()
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"uda training diverged at iteration {it}: {exc}") from exc
            entry.update(breakdown)
            log.write(json.dumps(entry) + "\n")

    if params_blob(f_s) != fs_blob_before:
        raise RuntimeError("frozen tissue segmentor drifted during adaptation")

    paths = UdaCheckpoints(
        g_t2s=out_dir / "uda_g_t2s.ckpt",
        g_s2t=out_dir / "uda_g_s2t.ckpt",
        d_s=out_dir / "uda_d_s.ckpt",
        d_t=out_dir / "uda_d_t.ckpt",
        d_m=out_dir / "uda_d_m.ckpt",
        log_path=log_path,
    )
    save_checkpoint(g_t2s, paths.g_t2s, step=config.iterations)
    save_checkpoint(g_s2t, paths.g_s2t, step=config.iterations)
    save_checkpoint(d_s, paths.d_s, step=config.iterations)
    save_checkpoint(d_t, paths.d_t, step=config.iterations)
    save_checkpoint(d_m, paths.d_m, step=config.iterations)
    return paths


# ------------------------------------------------------------- label induction

def induce_tissue_probabilities(volume: Volume, g_t2s: Generator3d,
                                f_s: Segmentor3d) -> ProbabilityMap:
    """Tissue probabilities for a target volume: segment its translation."""
    return segmentor_forward(f_s, generator_forward(g_t2s, volume))


def induce_for_manifest(manifest: DatasetManifest, g_t2s: Generator3d,
                        f_s: Segmentor3d,
                        ids: Sequence[str] | None = None) -> dict[str, Path]:
    """Cache induced maps beside each target case and record them in the manifest.

    The translator and segmentor are frozen after step 2, so the maps are
    computed once here rather than per training epoch.
    """
    if ids is None:
        ids = manifest.case_ids(Domain.TARGET)
    written = {}
    for cid in ids:
        stem = case_stem(manifest, cid)
        volume, _ = load_case(stem)
        prob = induce_tissue_probabilities(volume, g_t2s, f_s)
        save_probability_map(prob, stem)
        manifest.record(cid).induced_prob_path = f"{cid}.prob.bin"
        written[cid] = stem.with_name(stem.name + ".prob.bin")
    save_manifest(manifest, manifest.root)
    return written
