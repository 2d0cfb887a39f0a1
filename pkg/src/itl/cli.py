"""Command-line entry point wiring every workflow stage to flags and configs.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand
reads its inputs from disk and writes its outputs to disk, so any stage can
be re-run or resumed independently; there is no state outside the named
files. The env var ITL_DATA_DIR supplies a default dataset directory where
a --data/--out flag is omitted. Each subcommand prints a one-object JSON
summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from itl.data import Taxonomy, case_stem, load_case, load_manifest, load_probability_map
from itl.evalstats import MetricsReport, SplitPlan, compare_methods, evaluate_split
from itl.experiment import (
    config_hash,
    load_config_file,
    resolve_config,
    run_experiment,
)
from itl.nets import load_checkpoint
from itl.phantoms import DomainShiftParams, PhantomParams, generate_dataset
from itl.pipeline import (
    TrainConfig,
    induce_for_manifest,
    load_induced_maps,
    predict_tumor_labels,
    train_sd_segmentor,
    train_td_segmentor,
    train_uda,
)
from itl.preprocess import preprocess_dataset


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True))


def _data_dir(value: str | None, flag: str) -> Path:
    if value:
        return Path(value)
    env = os.environ.get("ITL_DATA_DIR")
    if env:
        return Path(env)
    raise _UsageError(f"{flag} not given and ITL_DATA_DIR is unset")


def _shape(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    return tuple(int(p) for p in parts)


def _floats4(text: str) -> tuple[float, float, float, float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated floats, got {text!r}")
    return tuple(float(p) for p in parts)


def _train_config(path: str, seed: int | None) -> tuple[TrainConfig, dict]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    extras = {k: doc.pop(k) for k in ("sd_ckpt",) if k in doc}
    cfg = TrainConfig.from_dict(doc)
    if seed is not None:
        cfg.seed = seed
    return cfg, extras


def _cmd_gen_data(args) -> int:
    out = _data_dir(args.out, "--out")
    params = PhantomParams(shape=args.shape, seed=args.seed,
                           interface_affinity=args.interface_affinity,
                           wm_radius_jitter=args.wm_radius_jitter,
                           gm_radius_jitter=args.gm_radius_jitter)
    shift = DomainShiftParams(gamma=args.shift_gamma,
                              bias_field_amplitude=args.shift_bias,
                              contrast_scale=args.shift_contrast,
                              extra_noise_sigma=args.shift_noise,
                              seed=args.seed)
    manifest = generate_dataset(out, args.n_source, args.n_target, params, shift)
    _emit({"out": str(out), "cases": len(manifest.cases),
           "n_source": args.n_source, "n_target": args.n_target,
           "shape": list(manifest.shape), "seed": args.seed})
    return 0


def _cmd_preprocess(args) -> int:
    manifest = preprocess_dataset(args.in_dir, args.out, args.target_shape)
    _emit({"out": str(args.out), "cases": len(manifest.cases),
           "shape": list(manifest.shape)})
    return 0


def _cmd_train_sd(args) -> int:
    cfg, _ = _train_config(args.config, args.seed)
    ckpt = train_sd_segmentor(cfg)
    _emit({"checkpoint": str(ckpt),
           "log": str(Path(cfg.checkpoint_dir) / "train_sd.log.jsonl")})
    return 0


def _cmd_train_uda(args) -> int:
    cfg, extras = _train_config(args.config, args.seed)
    sd_ckpt = args.sd_ckpt or extras.get("sd_ckpt")
    if not sd_ckpt:
        raise _UsageError("train-uda needs --sd-ckpt or an sd_ckpt config key")
    paths = train_uda(cfg, sd_ckpt)
    _emit({"g_t2s": str(paths.g_t2s), "g_s2t": str(paths.g_s2t),
           "d_s": str(paths.d_s), "d_t": str(paths.d_t), "d_m": str(paths.d_m),
           "log": str(paths.log_path)})
    return 0


def _cmd_induce(args) -> int:
    data = _data_dir(args.data, "--data")
    manifest = load_manifest(data)
    g_t2s, _, _ = load_checkpoint(args.g_ckpt)
    f_s, _, _ = load_checkpoint(args.sd_ckpt)
    written = induce_for_manifest(manifest, g_t2s, f_s,
                                  ids=args.ids if args.ids else None)
    _emit({"data": str(data), "written": {k: str(v) for k, v in written.items()}})
    return 0


def _cmd_train_td(args) -> int:
    cfg, _ = _train_config(args.config, args.seed)
    induced = None
    if args.induced:
        manifest = load_manifest(cfg.manifest_path)
        induced = load_induced_maps(manifest, list(cfg.train_ids) + list(cfg.val_ids))
    ckpt = train_td_segmentor(cfg, induced)
    _emit({"checkpoint": str(ckpt),
           "log": str(Path(cfg.checkpoint_dir) / "train_td.log.jsonl")})
    return 0


def _cmd_evaluate(args) -> int:
    data = _data_dir(args.data, "--data")
    manifest = load_manifest(data)
    plan = SplitPlan.from_dict(json.loads(Path(args.split_plan).read_text()))
    model, _, _ = load_checkpoint(args.ckpt)
    with_induced = model.spec.in_channels == 8
    predictions, truths = {}, {}
    for cid in plan.test:
        volume, labels = load_case(case_stem(manifest, cid))
        prob = None
        if with_induced:
            prob = load_probability_map(case_stem(manifest, cid), manifest.shape)
        predictions[cid] = predict_tumor_labels(model, volume, prob)
        truths[cid] = labels
    report = evaluate_split(predictions, truths, plan, config_hash=args.config_hash)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    _emit({"out": str(out), "repeat_index": plan.repeat_index,
           "region_means": report.region_means})
    return 0


def _cmd_compare(args) -> int:
    def reports(paths):
        return [MetricsReport.from_dict(json.loads(Path(p).read_text()))
                for p in paths]

    comparison = compare_methods(reports(args.baseline), reports(args.proposed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(comparison.to_dict(), indent=1, sort_keys=True) + "\n")
    print(comparison.format_table())
    _emit({"out": str(out), "n_repeats": comparison.n_repeats})
    return 0


def _cmd_run_experiment(args) -> int:
    overrides = load_config_file(args.config) if args.config else {}
    cfg = resolve_config(overrides, seed=args.seed)
    if args.out:
        out = Path(args.out)
    else:
        env = os.environ.get("ITL_DATA_DIR")
        out = Path(env) / "experiment" if env else Path("itl-experiment")
    summary = run_experiment(cfg, out)
    _emit({"out": str(out), "config_hash": config_hash(cfg),
           "sd_test_dice": summary["sd_test_dice"],
           "induction_improvement": summary["induction_audit"]["improvement"],
           "wt_improved_repeats": summary["wt_improved_repeats"],
           "n_repeats": summary["n_repeats"],
           "wt_mean_improvement": summary["wt_mean_improvement"],
           "wt_p_value": summary["wt_p_value"]})
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="itl",
                     description="tissue-to-tumor transfer pipeline: phantom data, "
                                 "training stages, evaluation, experiments")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a two-domain phantom dataset")
    p.add_argument("--out", help="output dataset dir (default: ITL_DATA_DIR)")
    p.add_argument("--n-source", type=int, default=40)
    p.add_argument("--n-target", type=int, default=40)
    p.add_argument("--shape", type=_shape, default=(24, 24, 24), metavar="D,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-gamma", type=float, default=1.0)
    p.add_argument("--shift-bias", type=float, default=0.0, metavar="AMPLITUDE")
    p.add_argument("--shift-contrast", type=_floats4, default=(1.0, 1.0, 1.0, 1.0),
                   metavar="C1,C2,C3,C4")
    p.add_argument("--shift-noise", type=float, default=0.0, metavar="SIGMA")
    p.add_argument("--interface-affinity", type=float, default=0.8)
    p.add_argument("--wm-radius-jitter", type=float, default=0.0)
    p.add_argument("--gm-radius-jitter", type=float, default=0.0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("preprocess", help="crop, resample, and rescale a dataset")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--target-shape", type=_shape, required=True, metavar="D,H,W")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train-sd", help="step 1: source-domain tissue segmentor")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train_sd)

    p = sub.add_parser("train-uda", help="step 2: adversarial domain adaptation")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sd-ckpt", metavar="CKPT",
                   help="frozen tissue segmentor (or sd_ckpt key in the config)")
    p.set_defaults(func=_cmd_train_uda)

    p = sub.add_parser("induce", help="cache induced tissue probability maps")
    p.add_argument("--data", help="dataset dir (default: ITL_DATA_DIR)")
    p.add_argument("--g-ckpt", required=True, metavar="CKPT",
                   help="target-to-source generator checkpoint")
    p.add_argument("--sd-ckpt", required=True, metavar="CKPT")
    p.add_argument("--ids", nargs="*", default=None, metavar="CASE")
    p.set_defaults(func=_cmd_induce)

    p = sub.add_parser("train-td", help="step 3: target-domain tumor segmentor")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--induced", action="store_true",
                   help="concatenate cached induced maps (8-channel input)")
    p.set_defaults(func=_cmd_train_td)

    p = sub.add_parser("evaluate", help="score a tumor segmentor on a split's test cases")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--split-plan", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--data", help="dataset dir (default: ITL_DATA_DIR)")
    p.add_argument("--config-hash", default="", metavar="HASH")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="paired comparison of two methods' reports")
    p.add_argument("--baseline", nargs="+", required=True, metavar="REPORT")
    p.add_argument("--proposed", nargs="+", required=True, metavar="REPORT")
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("run-experiment",
                       help="full pipeline, baseline, and comparison from one config")
    p.add_argument("--config", metavar="FILE",
                   help="overrides merged into the default experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", metavar="DIR",
                   help="artifact dir (default: ITL_DATA_DIR/experiment)")
    p.set_defaults(func=_cmd_run_experiment)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"itl: error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"itl: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"itl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
