import csv
import io
import json

import numpy as np
import pytest
import torch
import yaml

from dualseg import cli
from dualseg.backbone import load_network
from dualseg.cli import ABLATION_ROWS, build_experiment, main, run_config
from dualseg.core import load_container

SMALL = ["--profile", "smoke", "--set", "n_labeled=2", "--set", "n_unlabeled=2",
         "--set", "n_validation=1", "--set", "n_test=2"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", *SMALL, "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", *SMALL, "--set", "train.steps=4", "--set", "train.val_every=2",
                 "--data", str(data_dir), "--out", str(d)]) == 0
    return d


def test_gen_data_counts_and_manifest(tmp_path, capsys):
    code, out, _ = _run(capsys, "gen-data", "--profile", "smoke", "--set", "n_labeled=4",
                        "--set", "n_unlabeled=16", "--set", "n_validation=0", "--set", "n_test=0",
                        "--out", str(tmp_path / "a"))
    assert code == 0
    report = json.loads(out)
    training = list((tmp_path / "a" / "labeled").iterdir()) + list((tmp_path / "a" / "unlabeled").iterdir())
    assert len(training) == 20 and report["counts"]["labeled"] == 4
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["manifest_hash"] == report["manifest_hash"]
    # unlabeled samples carry no mask on disk
    _, mask, _ = load_container(sorted((tmp_path / "a" / "unlabeled").iterdir())[0])
    assert mask is None


def test_gen_data_same_seed_same_hash(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "gen-data", *SMALL, "--out", str(tmp_path / name))
        assert code == 0
        hashes.append(json.loads(out)["manifest_hash"])
    assert hashes[0] == hashes[1]
    code, out, _ = _run(capsys, "gen-data", *SMALL, "--set", "data_seed=5", "--out", str(tmp_path / "c"))
    assert json.loads(out)["manifest_hash"] != hashes[0]


def test_small_shape_is_a_schema_error(tmp_path, capsys):
    code, _, err = _run(capsys, "gen-data", *SMALL, "--set", "phantom.shape=[32,32,32]",
                        "--out", str(tmp_path / "x"))
    assert code == cli.EXIT_CONFIG
    assert json.loads(err)["error"] == "config"


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"stepz": 3}}))
    code, _, err = _run(capsys, "gen-data", *SMALL, "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert code == cli.EXIT_CONFIG and "stepz" in json.loads(err)["message"]


def test_refuses_non_empty_out_dir(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("hi")
    code, _, err = _run(capsys, "gen-data", *SMALL, "--out", str(tmp_path / "x"))
    assert code == cli.EXIT_EXISTS and json.loads(err)["error"] == "output_exists"
    assert _run(capsys, "gen-data", *SMALL, "--force", "--out", str(tmp_path / "x"))[0] == 0


def test_missing_data_is_data_error(tmp_path, capsys):
    code, _, err = _run(capsys, "train", *SMALL, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_DATA and json.loads(err)["error"] == "data"


def test_profiles_and_seed_env():
    desk = build_experiment("desk", env={})
    assert desk.phantom.shape == (64, 64, 64) and desk.train.steps == 2000
    assert desk.train.loss.t_max == 800 and (desk.n_labeled, desk.n_unlabeled) == (4, 16)
    paper = build_experiment("paper", env={})
    assert paper.phantom.shape == (160, 160, 160) and paper.train.loss.t_max == 4000
    assert paper.train.steps == 10000
    exp = build_experiment("desk", overrides=["train.lr=0.001"], env={"DUALSEG_SEED": "9"})
    assert exp.data_seed == 9 and exp.seeds == (9,) and exp.train.lr == 0.001
    with pytest.raises(cli.CliError):
        build_experiment("nope", env={})


def test_run_config_seed_offsets_and_toggles():
    exp = build_experiment("desk", env={})
    a, b = run_config(exp, 0), run_config(exp, 1)
    assert (b.seed_net1 - a.seed_net1, b.seed_data - a.seed_data) == (100, 100)
    assert a.seed_net1 != a.seed_net2
    sup = run_config(exp, 0, ABLATION_ROWS["sup"])
    assert not sup.loss.any_semi
    forced = run_config(build_experiment("desk", overrides=["supervised_only=true"], env={}), 0)
    assert not forced.loss.any_semi
    # every row at a given seed shares the data stream
    assert len({run_config(exp, 2, t).seed_data for t in ABLATION_ROWS.values()}) == 1


def test_train_writes_bundle_figures_and_config(trained):
    for name in ("net1.pt", "net2.pt", "metrics.csv", "loss_curves.png", "param_distance.png",
                 "experiment.yaml", "manifest.json", "train_config.json"):
        assert (trained / name).exists(), name
    rows = list(csv.DictReader(io.StringIO((trained / "metrics.csv").read_text())))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3, 4]
    saved = yaml.safe_load((trained / "experiment.yaml").read_text())
    assert saved["train"]["steps"] == 4


def test_config_copied_verbatim(data_dir, tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    text = "# my run\ntrain:\n  steps: 2\n"
    cfg.write_text(text)
    code, _, _ = _run(capsys, "train", *SMALL, "--config", str(cfg), "--data", str(data_dir),
                      "--out", str(tmp_path / "r"))
    assert code == 0
    assert (tmp_path / "r" / "config_source.yaml").read_text() == text


def test_resume_continues_step_numbering(data_dir, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(capsys, "train", *SMALL, "--set", "train.steps=2", "--data", str(data_dir), "--out", str(out))[0] == 0
    code, stdout, _ = _run(capsys, "train", *SMALL, "--set", "train.steps=4", "--resume",
                           "--data", str(data_dir), "--out", str(out))
    assert code == 0 and json.loads(stdout)["step"] == 4
    steps = [int(r["step"]) for r in csv.DictReader(io.StringIO((out / "metrics.csv").read_text()))]
    assert steps == [0, 1, 2, 3, 4]


def test_supervised_only_matches_zero_weights(data_dir, tmp_path, capsys):
    common = ["train", *SMALL, "--set", "train.steps=3", "--data", str(data_dir)]
    assert _run(capsys, *common, "--set", "supervised_only=true", "--out", str(tmp_path / "a"))[0] == 0
    assert _run(capsys, *common, "--set", "train.loss.alpha=0", "--set", "train.loss.beta=0",
                "--set", "train.loss.gamma=0", "--out", str(tmp_path / "b"))[0] == 0
    for name in ("net1.pt", "net2.pt"):
        a = load_network(tmp_path / "a" / name).state_dict()
        b = load_network(tmp_path / "b" / name).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_truth_against_itself(data_dir, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", *SMALL, "--data", str(data_dir), "--predictions", str(data_dir / "test"),
                        "--method", "truth", "--out", str(tmp_path / "e"))
    assert code == 0
    rows = [r for r in csv.reader(io.StringIO(out)) if r and not r[0].startswith("#")]
    assert rows[0] == ["volume", "dsc", "hd95", "hd95_sentinel"] and rows[3][0] == "method"
    assert all(float(r[1]) == 1.0 and float(r[2]) == 0.0 for r in rows[1:3])
    summary = dict(zip(rows[3], rows[4]))
    assert float(summary["dsc_mean"]) == 1.0 and float(summary["hd95_mean"]) == 0.0 and len(rows) == 5
    assert (tmp_path / "e" / "eval.csv").exists() and len(list((tmp_path / "e" / "figures").glob("*.png"))) == 2


def test_eval_checkpoint_and_compare(data_dir, trained, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", *SMALL, "--data", str(data_dir), "--checkpoint", str(trained),
                        "--compare", str(trained), "--out", str(tmp_path / "e"))
    assert code == 0
    assert "paired t-test" in out
    report = json.loads((tmp_path / "e" / "ttest.json").read_text())
    # identical checkpoints: zero differences, flagged degenerate with p = 0.5 convention or nan
    assert report["degenerate"]


def test_eval_without_source_is_usage_error(data_dir, capsys):
    code, _, err = _run(capsys, "eval", *SMALL, "--data", str(data_dir))
    assert code == cli.EXIT_CONFIG and json.loads(err)["error"] == "usage"


def test_infer_writes_prediction_and_render(data_dir, trained, tmp_path, capsys):
    src = sorted((data_dir / "test").iterdir())[0]
    code, out, _ = _run(capsys, "infer", *SMALL, "--checkpoint", str(trained), "--input", str(src),
                        "--out", str(tmp_path / "i"), "--render")
    assert code == 0
    vol, mask, meta = load_container(tmp_path / "i" / "prediction")
    assert vol.shape == (64, 64, 64) and mask is not None and set(np.unique(mask.data)) <= {0, 1}
    assert (tmp_path / "i" / "slice.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "i" / "slice.png").exists()
    assert json.loads(out)["center"] == meta["center"]


def test_ablate_two_rows_two_seeds(data_dir, tmp_path, capsys):
    out = tmp_path / "ab"
    code, stdout, _ = _run(capsys, "ablate", *SMALL, "--set", "train.steps=2", "--set", "seeds=[0,1]",
                           "--rows", "sup,sup+intra+inter", "--data", str(data_dir), "--out", str(out))
    assert code == 0
    lines = stdout.splitlines()
    assert lines[0].startswith(cli.ABLATION_SCHEMA)
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert [r["name"] for r in rows] == ["sup", "sup+intra+inter"]
    for r in rows:
        seeds = [float(v) for v in r["seed_dsc"].split(";")]
        assert len(seeds) == 2 and int(r["n_seeds"]) == 2
        assert float(r["dsc_mean"]) == pytest.approx(np.mean(seeds), abs=1e-6)
        assert float(r["dsc_std"]) == pytest.approx(np.std(seeds), abs=1e-6)
    # both rows consumed the same data stream at each seed
    for seed in (0, 1):
        cfgs = [json.loads((out / "runs" / row / f"seed{seed}" / "train_config.json").read_text())
                for row in ("sup", "sup+intra+inter")]
        assert cfgs[0]["seed_data"] == cfgs[1]["seed_data"]
    assert (out / "ablation.png").exists() and (out / "ablation.csv").exists()


def test_ablate_unknown_row(data_dir, tmp_path, capsys):
    code, _, _ = _run(capsys, "ablate", *SMALL, "--rows", "sup,bogus", "--data", str(data_dir),
                      "--out", str(tmp_path / "ab"))
    assert code == cli.EXIT_CONFIG


def test_grad_check_passes(capsys):
    code, out, _ = _run(capsys, "grad-check")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 6 and all(line.endswith("PASS") for line in lines[1:])


def test_grad_check_fault_reports_worst_coordinate(capsys):
    code, out, err = _run(capsys, "grad-check", "--component", "inter", "--component", "sup",
                          "--inject-fault", "inter")
    assert code == cli.EXIT_CHECK_FAILED
    report = json.loads(err)
    assert report["error"] == "gradient_check_failed"
    failed = json.loads(report["message"])
    assert [f["component"] for f in failed] == ["inter"] and len(failed[0]["worst_index"]) >= 1
    assert "sup" in out and "FAIL" in out
