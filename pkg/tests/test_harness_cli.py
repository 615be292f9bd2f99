import json
import os

import numpy as np
import pytest

from edgeopt import cli
from edgeopt.data import load_dataset
from edgeopt.errors import ConfigError, StageError
from edgeopt.exits import load_cascade
from edgeopt.harness import ExperimentConfig, load_config, run_experiment
from edgeopt.metrics import strip_timing
from edgeopt.modelio import load_model
from edgeopt.quant import QuantPlan

SOURCE = {"format": "synthetic", "num_classes": 4, "samples": 200, "shape": [3, 16, 16], "seed": 1,
          "separation": 6.0, "global_separation": 3.0, "difficulty": 1.0}


def make_cfg(tmp_path, technique, **extra):
    d = {"name": technique, "technique": technique, "seed": 0, "output_dir": str(tmp_path / "runs"),
         "model": {"arch": "residual", "fit_epochs": 5},
         "data": {"source": SOURCE, "split": [120, 20, 60]},
         "exits": {"attach_points": ["block0_0"], "epochs": 3, "grid": {"num": 8}}}
    d.update(extra)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("EDGEOPT_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("EDGEOPT_THREADS", raising=False)


def test_base_is_self_referential(tmp_path):
    res = run_experiment(make_cfg(tmp_path, "base"))
    s = res.summary
    assert s.speed_up == 1.0 and s.compression == 1.0 and s.label_loyalty == 100.0
    assert s.prob_loyalty == 100.0 and s.peak_rss_kb > 0
    assert load_model(res.artifacts["base_model"]).name == "resnet_toy"


def test_prune_zero_matches_base(tmp_path):
    res = run_experiment(make_cfg(tmp_path, "prune", prune={"pr": 0.0, "cg": 4}))
    base, pruned = res.rows
    assert pruned.compression == 1.0 and pruned.accuracy == base.accuracy
    assert res.extras["param_compression"] == 1.0
    load_model(res.artifacts["model"])


@pytest.mark.parametrize("technique", ["ptq", "dq"])
def test_quant_pipelines(tmp_path, technique):
    res = run_experiment(make_cfg(tmp_path, technique))
    assert 3.5 <= res.extras["covered_weight_bytes"]["ratio"] <= 4.0
    assert res.summary.compression > 2.0
    q = load_model(res.artifacts["model"])
    assert any(layer.quant is not None for layer in q.layers)
    plan = QuantPlan.load(res.artifacts["quant_plan"])
    assert plan.mode == technique.upper()


def test_ptq_ee_stage_order_and_artifacts(tmp_path):
    res = run_experiment(make_cfg(tmp_path, "ptq-ee"))
    with open(res.artifacts["experiment"]) as fh:
        manifest = json.load(fh)
    stages = manifest["stages"]
    order = [stages.index(s) for s in ("attach", "train-exits", "partition", "quantize", "sweep")]
    assert order == sorted(order)
    assert [r.model for r in res.rows] == ["base", "ptq-ee@acc_opt", "ptq-ee@inf_opt"]
    cascade = load_cascade(os.path.join(res.output_dir, manifest["artifacts"]["cascade"]))
    assert cascade.quantization["mode"] == "PTQ" and cascade.heads[0].trained
    assert cascade.thresholds == [res.sweep.inf_opt_point.threshold]
    with open(res.artifacts["plot_data"]) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("#") and len(lines[1].split()) == 4
    # closure: every artifact reloads with its own loader
    for key, path in res.artifacts.items():
        if path.endswith(".json"):
            json.load(open(path))
        elif path.endswith(".eom"):
            load_model(path)


def test_determinism(tmp_path):
    a = run_experiment(make_cfg(tmp_path / "a", "dq-ee"))
    b = run_experiment(make_cfg(tmp_path / "b", "dq-ee", threads=3))
    for key in ("summary_json", "sweep_json"):
        ja, jb = (strip_timing(json.load(open(r.artifacts[key]))) for r in (a, b))
        assert ja == jb
    assert open(a.artifacts["sweep_csv"]).read().split("\n")[0] == open(b.artifacts["sweep_csv"]).read().split("\n")[0]


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "int4")
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "ee", exits={"attach_points": []})
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "prune", prune={"pr": 1.5})
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "ptq", quant={"kinds": "Softmax"})
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "base", model="missing.eom")
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "base", colour="blue")
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "base", schema_version=2)
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "base", data={"train": "nope.json", "eval": "nope.json"})


def test_stage_errors_name_the_stage(tmp_path):
    cfg = make_cfg(tmp_path, "ee", exits={"attach_points": ["not_a_tensor"]})
    with pytest.raises(StageError) as e:
        run_experiment(cfg)
    assert e.value.stage == "attach"
    cfg = make_cfg(tmp_path, "base", data={"source": SOURCE, "split": [150, 30, 60]})
    with pytest.raises(StageError) as e:
        run_experiment(cfg)
    assert e.value.stage == "data"


def test_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("EDGEOPT_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    monkeypatch.setenv("EDGEOPT_THREADS", "2")
    cfg = make_cfg(tmp_path, "base")
    assert cfg.output_dir == str(tmp_path / "elsewhere") and cfg.threads == 2
    monkeypatch.setenv("EDGEOPT_THREADS", "zero")
    with pytest.raises(ConfigError):
        make_cfg(tmp_path, "base")


def test_yaml_config(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text("name: y\ntechnique: base\nmodel: {arch: chain, fit_epochs: 2}\n"
                 "data:\n  source: {format: synthetic, num_classes: 2, samples: 40, shape: [1, 16, 16]}\n"
                 "  split: [20, 5, 15]\n")
    cfg = load_config(p)
    assert cfg.technique == "base" and cfg.prune["cg"] == 1
    p.write_text("name: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


# --------------------------------------------------------------------------- CLI

def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run_cli(capsys, *argv, "--json")
    assert code == 0, err
    return json.loads(out)


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path
    r = run_json(capsys, "gen-data", "--samples", 120, "--seed", 3, "--global-separation", 3, "--difficulty", 1,
                 "--out", d / "data" / "train.csv")
    assert r["samples"] == 120
    run_json(capsys, "gen-data", "--samples", 40, "--seed", 4, "--global-separation", 3, "--difficulty", 1,
             "--out", d / "data" / "eval.csv")
    train, ev = d / "data" / "train.json", d / "data" / "eval.json"
    r = run_json(capsys, "build-model", "--fit-on", train, "--epochs", 5, "--out", d / "m" / "base.eom")
    base = r["model"]
    assert r["params"] > 0
    r = run_json(capsys, "prune", "--model", base, "--pr", 0.5, "--cg", 2, "--out", d / "m" / "p.eom",
                 "--report", d / "m" / "p.json")
    assert r["params_after"] < r["params_before"]
    r = run_json(capsys, "calibrate", "--model", base, "--calib", train, "--samples", 16, "--out", d / "plan.json")
    assert r["tensors"] > 10
    r = run_json(capsys, "quantize", "--model", base, "--mode", "ptq", "--plan", d / "plan.json",
                 "--out", d / "m" / "q.eom")
    assert r["quantized_layers"]
    run_json(capsys, "quantize", "--model", base, "--mode", "dq", "--out", d / "m" / "dq.eom")
    r = run_json(capsys, "train-exits", "--model", base, "--train", train, "--attach", "block0_0",
                 "--epochs", 3, "--out", d / "casc")
    assert r["heads"][0]["loss_last"] < r["heads"][0]["loss_first"]
    r = run_json(capsys, "quantize", "--cascade", d / "casc", "--mode", "ptq", "--calib", train,
                 "--kinds", "shufflenet-style", "--out", d / "qcasc")
    assert r["quantization"]["mode"] == "PTQ"
    r = run_json(capsys, "sweep", "--cascade", d / "qcasc", "--eval", ev, "--grid", "0:1.2:7",
                 "--out-json", d / "s.json", "--out-csv", d / "s.csv", "--plot", d / "s.dat", "--apply", "acc_opt")
    assert len(r["grid"]) == 8 and os.path.exists(d / "s.dat")
    assert load_cascade(d / "qcasc").thresholds == [r["acc_opt"]["threshold"]]
    r = run_json(capsys, "infer", "--cascade", d / "qcasc", "--data", ev, "--index", 2)
    assert r["true_label"] == int(load_dataset(ev).labels[2]) and r["exit_index"] in (0, 1)
    np.save(d / "x.npy", load_dataset(ev).images[0])
    r = run_json(capsys, "infer", "--model", base, "--input", d / "x.npy")
    assert abs(sum(r["probs"]) - 1) < 1e-6
    r = run_json(capsys, "eval", "--model", d / "m" / "q.eom", "--eval", ev, "--baseline", base,
                 "--out", d / "q_summary.json")
    assert r["compression"] > 2 and r["early_exit_rate"] == "n/a"
    r = run_json(capsys, "eval", "--cascade", d / "qcasc", "--eval", ev, "--baseline", base,
                 "--out", d / "c_summary.json")
    assert r["early_exit_rate"] != "n/a"
    r = run_json(capsys, "report", d / "q_summary.json", d / "c_summary.json", "--csv", d / "all.csv")
    assert len(r["rows"]) == 2
    code, out, _ = run_cli(capsys, "report", d / "q_summary.json")
    assert code == 0 and out.startswith("model")


def test_cli_run_subcommand(tmp_path, capsys):
    cfg = {"name": "cli", "technique": "ptq", "model": {"arch": "chain", "fit_epochs": 2},
           "data": {"source": {**SOURCE, "shape": [1, 16, 16]}, "split": [60, 10, 30]}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    r = run_json(capsys, "run", "--config", p, "--output-dir", tmp_path / "out")
    assert r["stages"][:3] == ["setup", "data", "model"] and "quantize" in r["stages"]
    assert os.path.exists(tmp_path / "out" / "cli" / "summary.csv")


def test_cli_failures(tmp_path, capsys):
    code, _, err = run_cli(capsys, "prune", "--model", tmp_path / "missing.eom", "--pr", 0.5, "--out",
                           tmp_path / "x.eom")
    assert code == 1 and err.startswith("error [prune]")
    bad = tmp_path / "bad.eom"
    bad.write_bytes(b"EOGM" + b"\0" * 30)
    code, _, err = run_cli(capsys, "infer", "--model", bad, "--input", tmp_path / "x.npy")
    assert code == 1 and "error [infer]" in err
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"name": "x", "technique": "ee", "model": {"arch": "residual", "fit_epochs": 1},
                             "data": {"source": SOURCE, "split": [40, 10, 20]},
                             "exits": {"attach_points": ["nowhere"]}}))
    code, _, err = run_cli(capsys, "run", "--config", p, "--output-dir", tmp_path / "o")
    assert code == 1 and err.startswith("error [attach]")
    with pytest.raises(SystemExit) as e:
        cli.main(["sweep"])
    assert e.value.code != 0
    code, _, err = run_cli(capsys, "gen-data", "--out", tmp_path / "d.csv", "--threads", 0)
    assert code == 1


def test_cli_json_on_every_subcommand():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    expected = {"gen-data", "train-exits", "prune", "quantize", "calibrate", "sweep", "infer", "eval", "report"}
    assert expected <= set(sub.choices)
    for name, sp in sub.choices.items():
        flags = {o for a in sp._actions for o in a.option_strings}
        assert {"--json", "--threads"} <= flags, name
