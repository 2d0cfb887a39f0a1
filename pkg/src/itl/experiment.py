"""End-to-end experiment runner: dataset, three training steps, evaluation.

One JSON config drives everything; its canonical hash identifies the
experiment and is stamped into every report. Stages write their artifacts
under a single output directory and record completion stamps, so an
interrupted run resumes after the last finished stage and a finished run is
a no-op to re-invoke. With a fixed seed the emitted reports are
byte-identical across runs.

Layout under the output directory:

    config.json              resolved config (the hashed document)
    data/                    generated two-domain phantom dataset
    ckpt/sd, ckpt/uda        step 1 and step 2 checkpoints + logs
    ckpt/td_r<k>_<method>    step 3 checkpoints, one per repeat and method
    reports/                 per-repeat metrics, comparison, audit
    experiment.json          summary of everything above
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from itl.data import (
    DatasetManifest,
    Domain,
    LabelMap,
    Taxonomy,
    atomic_write_text,
    case_stem,
    load_case,
    load_manifest,
    load_probability_map,
)
from itl.evalstats import (
    MetricsReport,
    SplitPlan,
    compare_methods,
    evaluate_split,
    monte_carlo_splits,
    per_class_dice,
)
from itl.losses import LossWeights
from itl.nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    SegmentorSpec,
    load_checkpoint,
    segmentor_forward,
)
from itl.phantoms import DomainShiftParams, PhantomParams, generate_dataset, load_hidden_tissue
from itl.pipeline import (
    Stage,
    TrainConfig,
    induce_for_manifest,
    load_induced_maps,
    predict_tumor_labels,
    train_sd_segmentor,
    train_td_segmentor,
    train_uda,
)

# sub-seed stream tags, one per consumer of the master seed
_SEED_SD_SPLIT = 1
_SEED_TD_SPLITS = 2
_SEED_SD_TRAIN = 3
_SEED_UDA_TRAIN = 4
_SEED_TD_TRAIN = 5

DEFAULT_CONFIG: dict = {
    "seed": 7,
    "data": {
        "n_source": 40,
        "n_target": 40,
        "shape": [24, 24, 24],
        "phantom": {
            "brain_radius_frac": [0.62, 0.84],
            "center_jitter_frac": 0.04,
            "wm_radius_frac": 0.69,
            "gm_radius_frac": 0.87,
            "wm_radius_jitter": 0.10,
            "gm_radius_jitter": 0.04,
            "deformation_amplitude": 0.12,
            "noise_sigma": 0.03,
            "base_intensities": [
                [0.00, 0.00, 0.00, 0.00],
                [0.78, 0.38, 0.72, 0.42],
                [0.52, 0.62, 0.45, 0.68],
                [0.22, 0.88, 0.18, 0.30],
            ],
            "tumor_radius_range": [3.0, 5.0],
            "tumor_mid_frac": 0.75,
            "tumor_core_frac": 0.45,
            "interface_affinity": 0.8,
            "tumor_intensity_offsets": [
                [0.02, 0.28, -0.10, 0.26],
                [-0.14, 0.12, 0.12, 0.14],
                [0.34, 0.06, 0.30, -0.08],
            ],
        },
        "shift": {
            "gamma": 0.35,
            "bias_field_amplitude": 0.25,
            "contrast_scale": [0.75, 0.8, 0.7, 0.85],
            "extra_noise_sigma": 0.05,
        },
    },
    "splits": {"ratios": [7, 1, 2], "repeats": 5},
    "sd": {
        "iterations": 300,
        "batch_size": 2,
        "lr": 0.002,
        "val_interval": 25,
        "segmentor": None,
    },
    "uda": {
        "iterations": 600,
        "warmup_iterations": 150,
        "batch_size": 2,
        "lr": 0.002,
        "disc_lr_scale": 0.1,
        "disc_steps": 1,
        "use_fake_pool": False,
        "loss_weights": None,
        "generator": None,
        "discriminator": None,
    },
    "td": {
        "iterations": 300,
        "batch_size": 2,
        "lr": 0.002,
        "val_interval": 25,
        "onehot_induced": False,
        "segmentor": None,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into ``defaults``; unknown keys are errors."""
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise KeyError(f"unknown config key {here!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(overrides: dict | None = None, seed: int | None = None) -> dict:
    """Fill an experiment config from defaults; optional seed override."""
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def load_config_file(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return doc


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _stage_seed(master: int, tag: int, repeat: int = 0) -> int:
    return int(np.random.SeedSequence([master, tag, repeat]).generate_state(1)[0] % 2**31)


def _phantom_params(cfg: dict) -> PhantomParams:
    d = dict(cfg["data"]["phantom"])
    for key in ("brain_radius_frac", "tumor_radius_range"):
        if key in d:
            d[key] = tuple(d[key])
    for key in ("base_intensities", "tumor_intensity_offsets"):
        if key in d:
            d[key] = tuple(tuple(row) for row in d[key])
    return PhantomParams(shape=tuple(cfg["data"]["shape"]), seed=cfg["seed"], **d)


def _shift_params(cfg: dict) -> DomainShiftParams:
    d = dict(cfg["data"]["shift"])
    if "contrast_scale" in d:
        d["contrast_scale"] = tuple(d["contrast_scale"])
    return DomainShiftParams(seed=cfg["seed"], **d)


def _weights(section: dict) -> LossWeights:
    if section.get("loss_weights") is None:
        return LossWeights()
    return LossWeights(**section["loss_weights"])


def _spec(d: dict | None, cls, **overrides):
    return cls(**{**(d or {}), **overrides})


def _stamp_path(out_dir: Path, name: str) -> Path:
    return out_dir / "stamps" / f"{name}.json"


def _is_done(out_dir: Path, name: str, h: str) -> bool:
    p = _stamp_path(out_dir, name)
    if not p.exists():
        return False
    try:
        return json.loads(p.read_text()).get("config_hash") == h
    except json.JSONDecodeError:
        return False


def _mark_done(out_dir: Path, name: str, h: str) -> None:
    p = _stamp_path(out_dir, name)
    p.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(p, json.dumps({"config_hash": h}, sort_keys=True) + "\n")


def _write_report(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _tissue_prediction(model, volume) -> LabelMap:
    return segmentor_forward(model, volume).argmax_labels(Taxonomy.TISSUE)


def _mean_tissue_dice(pred: LabelMap, truth: LabelMap) -> float:
    return float(np.mean(list(per_class_dice(pred, truth).values())))


def _evaluate_sd(ckpt: Path, manifest: DatasetManifest, plan: SplitPlan) -> dict:
    model, _, _ = load_checkpoint(ckpt)
    per_case = {}
    for cid in plan.test:
        volume, labels = load_case(case_stem(manifest, cid))
        pred = _tissue_prediction(model, volume)
        per_case[cid] = _mean_tissue_dice(pred, labels)
    return {
        "test_cases": list(plan.test),
        "per_case_mean_dice": per_case,
        "test_dice": float(np.mean(list(per_case.values()))),
    }


def _induction_audit(manifest: DatasetManifest, sd_ckpt: Path) -> dict:
    """Quantify what adaptation buys: tissue Dice of induced maps versus the
    frozen segmentor applied to raw target volumes, against quarantined truth.

    This is the only place outside dataset generation that reads the hidden
    tissue sidecars; nothing here feeds back into training.
    """
    f_s, _, _ = load_checkpoint(sd_ckpt)
    ids = manifest.case_ids(Domain.TARGET)
    no_uda, induced = {}, {}
    for cid in ids:
        volume, _ = load_case(case_stem(manifest, cid))
        truth = load_hidden_tissue(manifest, cid)
        no_uda[cid] = _mean_tissue_dice(_tissue_prediction(f_s, volume), truth)
        prob = load_probability_map(case_stem(manifest, cid), manifest.shape)
        induced[cid] = _mean_tissue_dice(prob.argmax_labels(Taxonomy.TISSUE), truth)
    no_uda_mean = float(np.mean(list(no_uda.values())))
    induced_mean = float(np.mean(list(induced.values())))
    return {
        "cases": list(ids),
        "no_uda_per_case": no_uda,
        "induced_per_case": induced,
        "no_uda_mean_dice": no_uda_mean,
        "induced_mean_dice": induced_mean,
        "improvement": induced_mean - no_uda_mean,
    }


def _train_one_td(cfg: dict, manifest: DatasetManifest, plan: SplitPlan,
                  ckpt_dir: Path, with_induced: bool, h: str) -> MetricsReport:
    td = cfg["td"]
    base = dict(td["segmentor"] or {})
    spec = _spec(base, SegmentorSpec, in_channels=8 if with_induced else 4)
    train_cfg = TrainConfig(
        stage=Stage.TD_SEG,
        manifest_path=str(manifest.root),
        checkpoint_dir=str(ckpt_dir),
        train_ids=list(plan.train),
        val_ids=list(plan.val),
        iterations=td["iterations"],
        batch_size=td["batch_size"],
        seed=_stage_seed(cfg["seed"], _SEED_TD_TRAIN, plan.repeat_index),
        lr=td["lr"],
        val_interval=td["val_interval"],
        onehot_induced=td["onehot_induced"],
        segmentor=spec,
    )
    induced = None
    if with_induced:
        induced = load_induced_maps(manifest, list(plan.train) + list(plan.val))
    ckpt = train_td_segmentor(train_cfg, induced)
    model, _, _ = load_checkpoint(ckpt)

    predictions, truths = {}, {}
    for cid in plan.test:
        volume, labels = load_case(case_stem(manifest, cid))
        prob = None
        if with_induced:
            prob = load_probability_map(case_stem(manifest, cid), manifest.shape)
        predictions[cid] = predict_tumor_labels(model, volume, prob)
        truths[cid] = labels
    return evaluate_split(predictions, truths, plan, config_hash=h)


def run_experiment(cfg: dict, out_dir: str | Path) -> dict:
    """Execute the full pipeline plus baseline and comparison from one config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    _write_report(out_dir / "config.json", cfg)
    print(f"experiment {h[:12]} -> {out_dir}", flush=True)

    data_dir = out_dir / "data"
    reports = out_dir / "reports"
    master = cfg["seed"]

    def stage(name: str) -> bool:
        done = _is_done(out_dir, name, h)
        if done:
            print(f"[{name}] already complete, skipping", flush=True)
        return not done

    if stage("gen_data"):
        t0 = time.perf_counter()
        generate_dataset(data_dir, cfg["data"]["n_source"], cfg["data"]["n_target"],
                         _phantom_params(cfg), _shift_params(cfg))
        print(f"[gen_data] {time.perf_counter() - t0:.1f}s", flush=True)
        _mark_done(out_dir, "gen_data", h)

    manifest = load_manifest(data_dir)
    src_ids = manifest.case_ids(Domain.SOURCE)
    tgt_ids = manifest.case_ids(Domain.TARGET)
    ratios = tuple(cfg["splits"]["ratios"])
    sd_plan = monte_carlo_splits(src_ids, _stage_seed(master, _SEED_SD_SPLIT),
                                 ratios, repeats=1)[0]
    td_plans = monte_carlo_splits(tgt_ids, _stage_seed(master, _SEED_TD_SPLITS),
                                  ratios, repeats=cfg["splits"]["repeats"])

    sd_ckpt = out_dir / "ckpt" / "sd" / "sd_segmentor.ckpt"
    sd = cfg["sd"]
    if stage("train_sd"):
        t0 = time.perf_counter()
        train_sd_segmentor(TrainConfig(
            stage=Stage.SD_SEG,
            manifest_path=str(data_dir),
            checkpoint_dir=str(sd_ckpt.parent),
            train_ids=list(sd_plan.train),
            val_ids=list(sd_plan.val),
            iterations=sd["iterations"],
            batch_size=sd["batch_size"],
            seed=_stage_seed(master, _SEED_SD_TRAIN),
            lr=sd["lr"],
            val_interval=sd["val_interval"],
            segmentor=_spec(sd["segmentor"], SegmentorSpec) if sd["segmentor"] else None,
        ))
        sd_eval = _evaluate_sd(sd_ckpt, manifest, sd_plan)
        sd_eval["split"] = sd_plan.to_dict()
        _write_report(reports / "sd_eval.json", sd_eval)
        print(f"[train_sd] {time.perf_counter() - t0:.1f}s  "
              f"test dice {sd_eval['test_dice']:.4f}", flush=True)
        _mark_done(out_dir, "train_sd", h)

    uda = cfg["uda"]
    uda_dir = out_dir / "ckpt" / "uda"
    if stage("train_uda"):
        t0 = time.perf_counter()
        train_uda(TrainConfig(
            stage=Stage.UDA,
            manifest_path=str(data_dir),
            checkpoint_dir=str(uda_dir),
            train_ids=list(tgt_ids),
            source_ids=list(src_ids),
            iterations=uda["iterations"],
            warmup_iterations=uda["warmup_iterations"],
            batch_size=uda["batch_size"],
            seed=_stage_seed(master, _SEED_UDA_TRAIN),
            lr=uda["lr"],
            disc_lr_scale=uda["disc_lr_scale"],
            disc_steps=uda["disc_steps"],
            use_fake_pool=uda["use_fake_pool"],
            loss_weights=_weights(uda),
            generator=_spec(uda["generator"], GeneratorSpec) if uda["generator"] else None,
            discriminator=(_spec(uda["discriminator"], DiscriminatorSpec)
                           if uda["discriminator"] else None),
        ), sd_ckpt)
        print(f"[train_uda] {time.perf_counter() - t0:.1f}s", flush=True)
        _mark_done(out_dir, "train_uda", h)

    if stage("induce"):
        t0 = time.perf_counter()
        g_t2s, _, _ = load_checkpoint(uda_dir / "uda_g_t2s.ckpt")
        f_s, _, _ = load_checkpoint(sd_ckpt)
        induce_for_manifest(manifest, g_t2s, f_s)
        audit = _induction_audit(manifest, sd_ckpt)
        _write_report(reports / "induction_audit.json", audit)
        print(f"[induce] {time.perf_counter() - t0:.1f}s  "
              f"tissue dice no-uda {audit['no_uda_mean_dice']:.4f} -> "
              f"induced {audit['induced_mean_dice']:.4f}", flush=True)
        _mark_done(out_dir, "induce", h)
    manifest = load_manifest(data_dir)  # pick up induced map records

    if stage("td_eval"):
        t0 = time.perf_counter()
        baseline_reports, induced_reports = [], []
        for plan in td_plans:
            r = plan.repeat_index
            base_rep = _train_one_td(cfg, manifest, plan,
                                     out_dir / "ckpt" / f"td_r{r}_baseline",
                                     with_induced=False, h=h)
            ind_rep = _train_one_td(cfg, manifest, plan,
                                    out_dir / "ckpt" / f"td_r{r}_induced",
                                    with_induced=True, h=h)
            baseline_reports.append(base_rep)
            induced_reports.append(ind_rep)
            _write_report(reports / f"baseline_r{r}.json", base_rep.to_dict())
            _write_report(reports / f"induced_r{r}.json", ind_rep.to_dict())
            print(f"[td_eval] repeat {r}: baseline WT "
                  f"{base_rep.region_means['WT']:.4f}, induced WT "
                  f"{ind_rep.region_means['WT']:.4f}", flush=True)

        comparison = compare_methods(baseline_reports, induced_reports)
        _write_report(reports / "comparison.json", comparison.to_dict())
        atomic_write_text(reports / "comparison.txt", comparison.format_table() + "\n")

        audit = json.loads((reports / "induction_audit.json").read_text())
        sd_eval = json.loads((reports / "sd_eval.json").read_text())
        wt = comparison.regions["WT"]
        repeats_summary = [
            {
                "repeat_index": b.repeat_index,
                "baseline_wt": b.region_means["WT"],
                "induced_wt": p.region_means["WT"],
                "improved": p.region_means["WT"] >= b.region_means["WT"],
            }
            for b, p in zip(baseline_reports, induced_reports)
        ]
        summary = {
            "config_hash": h,
            "sd_test_dice": sd_eval["test_dice"],
            "induction_audit": {
                "no_uda_mean_dice": audit["no_uda_mean_dice"],
                "induced_mean_dice": audit["induced_mean_dice"],
                "improvement": audit["improvement"],
            },
            "repeats": repeats_summary,
            "wt_improved_repeats": sum(r["improved"] for r in repeats_summary),
            "n_repeats": len(repeats_summary),
            "wt_mean_improvement": wt["mean_diff"],
            "wt_p_value": wt["p_value"],
            "comparison": comparison.to_dict(),
        }
        _write_report(out_dir / "experiment.json", summary)
        print(f"[td_eval] {time.perf_counter() - t0:.1f}s", flush=True)
        _mark_done(out_dir, "td_eval", h)

    return json.loads((out_dir / "experiment.json").read_text())
