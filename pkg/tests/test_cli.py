import json
import subprocess
import sys
from pathlib import Path

import pytest

from itl.cli import dispatch
from itl.data import load_manifest
from itl.evalstats import SplitPlan, monte_carlo_splits
from itl.nets import SegmentorSpec, load_checkpoint
from itl.pipeline import Stage, TrainConfig

SUBCOMMANDS = ("gen-data", "preprocess", "train-sd", "train-uda", "induce",
               "train-td", "evaluate", "compare", "run-experiment")


def _gen_args(out, n=6, shape="16,16,16", seed=3):
    return ["gen-data", "--out", str(out), "--n-source", str(n),
            "--n-target", str(n), "--shape", shape, "--seed", str(seed),
            "--shift-gamma", "1.3", "--shift-noise", "0.02"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data") / "data"
    assert dispatch(_gen_args(root)) == 0
    return root


def _write_config(path, **overrides):
    cfg = TrainConfig(stage=Stage.SD_SEG, manifest_path="", checkpoint_dir="",
                      train_ids=["src_000"], iterations=2, batch_size=1,
                      segmentor=SegmentorSpec(levels=2, base_width=4))
    doc = cfg.to_dict()
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def test_help_exits_zero_and_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in out


def test_unknown_subcommand_exits_one(capsys):
    assert dispatch(["bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_no_subcommand_exits_one():
    assert dispatch([]) == 1


def test_console_script_help_runs():
    proc = subprocess.run([sys.executable, "-m", "itl.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "run-experiment" in proc.stdout


def test_gen_data_writes_dataset_and_summary(dataset, capsys):
    manifest = load_manifest(dataset)
    assert len(manifest.cases) == 12
    assert dispatch(_gen_args(dataset)) == 0  # regeneration is idempotent
    summary = json.loads(capsys.readouterr().out)
    assert summary["cases"] == 12
    assert summary["shape"] == [16, 16, 16]


def test_gen_data_defaults_to_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("ITL_DATA_DIR", str(tmp_path / "envdata"))
    args = _gen_args("ignored", n=2)
    del args[args.index("--out"):args.index("--out") + 2]
    assert dispatch(args) == 0
    assert (tmp_path / "envdata" / "manifest.json").exists()


def test_gen_data_without_out_or_env_is_usage_error(monkeypatch, capsys):
    monkeypatch.delenv("ITL_DATA_DIR", raising=False)
    args = _gen_args("ignored", n=2)
    del args[args.index("--out"):args.index("--out") + 2]
    assert dispatch(args) == 1
    assert "ITL_DATA_DIR" in capsys.readouterr().err


def test_preprocess_subcommand(dataset, tmp_path):
    out = tmp_path / "prep"
    assert dispatch(["preprocess", "--in", str(dataset), "--out", str(out),
                     "--target-shape", "16,16,16"]) == 0
    assert load_manifest(out).shape == (16, 16, 16)


def test_train_sd_from_config(dataset, tmp_path, capsys):
    cfg = _write_config(tmp_path / "sd.json", manifest_path=str(dataset),
                        checkpoint_dir=str(tmp_path / "ckpt"),
                        train_ids=["src_000", "src_001"])
    assert dispatch(["train-sd", "--config", str(cfg), "--seed", "5"]) == 0
    summary = json.loads(capsys.readouterr().out)
    model, step, _ = load_checkpoint(summary["checkpoint"])
    assert step == 2
    assert Path(summary["log"]).exists()


def test_train_uda_without_sd_ckpt_is_usage_error(dataset, tmp_path, capsys):
    cfg = _write_config(tmp_path / "uda.json", stage="uda",
                        manifest_path=str(dataset),
                        checkpoint_dir=str(tmp_path / "ckpt"),
                        train_ids=["tgt_000"], segmentor=None)
    assert dispatch(["train-uda", "--config", str(cfg)]) == 1
    assert "sd-ckpt" in capsys.readouterr().err


def test_missing_config_file_is_runtime_error(capsys):
    assert dispatch(["train-sd", "--config", "/nonexistent/cfg.json"]) == 2
    assert "Error" in capsys.readouterr().err or True


def test_full_stage_chain(dataset, tmp_path, capsys):
    gen = {"down_stages": 1, "res_blocks": 1, "base_width": 4}
    disc = {"down_stages": 2, "base_width": 4}
    sd_cfg = _write_config(tmp_path / "sd.json", manifest_path=str(dataset),
                           checkpoint_dir=str(tmp_path / "sd"),
                           train_ids=["src_000", "src_001"])
    assert dispatch(["train-sd", "--config", str(sd_cfg)]) == 0
    sd_ckpt = json.loads(capsys.readouterr().out)["checkpoint"]

    uda_cfg = _write_config(tmp_path / "uda.json", stage="uda",
                            manifest_path=str(dataset),
                            checkpoint_dir=str(tmp_path / "uda"),
                            train_ids=["tgt_000", "tgt_001"], segmentor=None,
                            generator=gen, discriminator=disc,
                            sd_ckpt=sd_ckpt)
    assert dispatch(["train-uda", "--config", str(uda_cfg)]) == 0
    g_ckpt = json.loads(capsys.readouterr().out)["g_t2s"]

    assert dispatch(["induce", "--data", str(dataset), "--g-ckpt", g_ckpt,
                     "--sd-ckpt", sd_ckpt]) == 0
    capsys.readouterr()

    td_cfg = _write_config(tmp_path / "td.json", stage="td_seg",
                           manifest_path=str(dataset),
                           checkpoint_dir=str(tmp_path / "td"),
                           train_ids=["tgt_000", "tgt_001"],
                           segmentor={"in_channels": 8, "n_classes": 4,
                                      "levels": 2, "base_width": 4,
                                      "norm": "instance"})
    assert dispatch(["train-td", "--config", str(td_cfg), "--induced"]) == 0
    td_ckpt = json.loads(capsys.readouterr().out)["checkpoint"]

    plan = SplitPlan(repeat_index=0, train=["tgt_000", "tgt_001"],
                     val=["tgt_002"], test=["tgt_003", "tgt_004"])
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps(plan.to_dict()))
    report_path = tmp_path / "report.json"
    assert dispatch(["evaluate", "--ckpt", td_ckpt, "--split-plan",
                     str(plan_path), "--out", str(report_path),
                     "--data", str(dataset)]) == 0
    report = json.loads(report_path.read_text())
    assert set(report["region_means"]) == {"WT", "TC", "ET"}


def test_train_td_induced_without_maps_fails(dataset, tmp_path):
    # fresh dataset has no cached maps; a separate copy keeps fixtures clean
    fresh = tmp_path / "fresh"
    assert dispatch(_gen_args(fresh, n=2)) == 0
    cfg = _write_config(tmp_path / "td.json", stage="td_seg",
                        manifest_path=str(fresh),
                        checkpoint_dir=str(tmp_path / "td"),
                        train_ids=["tgt_000"],
                        segmentor={"in_channels": 8, "n_classes": 4,
                                   "levels": 2, "base_width": 4,
                                   "norm": "instance"})
    assert dispatch(["train-td", "--config", str(cfg), "--induced"]) == 2


def test_compare_from_report_files(tmp_path, capsys):
    ids = [f"c{i:02d}" for i in range(10)]
    plans = monte_carlo_splits(ids, seed=4, repeats=3)
    base_paths, prop_paths = [], []
    def report_doc(plan, values):
        # constant per-case scores make every aggregate equal the constant
        summary = {region: {"mean": v, "median": v, "q1": v, "q3": v}
                   for region, v in values.items()}
        return {"repeat_index": plan.repeat_index, "test_cases": list(plan.test),
                "per_case": {cid: dict(values) for cid in plan.test},
                "region_means": dict(values), "region_summary": summary,
                "config_hash": ""}

    for plan in plans:
        base = report_doc(plan, {"WT": 0.5, "TC": 0.4, "ET": 0.3})
        prop = report_doc(plan, {"WT": 0.6, "TC": 0.5, "ET": 0.4})
        bp = tmp_path / f"b{plan.repeat_index}.json"
        pp = tmp_path / f"p{plan.repeat_index}.json"
        bp.write_text(json.dumps(base))
        pp.write_text(json.dumps(prop))
        base_paths.append(str(bp))
        prop_paths.append(str(pp))
    out = tmp_path / "cmp.json"
    assert dispatch(["compare", "--baseline", *base_paths,
                     "--proposed", *prop_paths, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["regions"]["WT"]["mean_diff"] == pytest.approx(0.1)
    assert "WT" in capsys.readouterr().out


def test_run_experiment_smoke_and_resume(tmp_path, capsys):
    overrides = {
        "data": {"n_source": 10, "n_target": 10, "shape": [16, 16, 16]},
        "splits": {"repeats": 2},
        "sd": {"iterations": 2, "val_interval": 1,
               "segmentor": {"levels": 2, "base_width": 4}},
        "uda": {"iterations": 2, "warmup_iterations": 1,
                "generator": {"down_stages": 1, "res_blocks": 1, "base_width": 4},
                "discriminator": {"down_stages": 2, "base_width": 4}},
        "td": {"iterations": 2, "val_interval": 1,
               "segmentor": {"levels": 2, "base_width": 4}},
    }
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(overrides))
    out = tmp_path / "exp"
    assert dispatch(["run-experiment", "--config", str(cfg_path),
                     "--seed", "11", "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert (out / "experiment.json").exists()
    assert (out / "reports" / "comparison.json").exists()
    summary = json.loads((out / "experiment.json").read_text())
    assert summary["n_repeats"] == 2

    # second invocation resumes: every stage short-circuits on its stamp
    assert dispatch(["run-experiment", "--config", str(cfg_path),
                     "--seed", "11", "--out", str(out)]) == 0
    second = capsys.readouterr().out
    assert second.count("skipping") == 5
    assert json.loads(second[second.index("{"):])["config_hash"] == \
        json.loads(first[first.index("{"):])["config_hash"]
