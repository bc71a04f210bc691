import json

import pytest

from conftest import make_config
from ctc_lab.core.config_file import load_train_config, render_config_text
from ctc_lab.main import main
from ctc_lab.models.records import Trajectory
from ctc_lab.services.trajectory import emit_trajectory


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(render_config_text(make_config()))
    return path


def _train(cfg, out, *extra):
    return main(["train", "-c", str(cfg), "--out", str(out), *extra])


def test_gen_writes_pairs_and_manifest(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["gen", "--preset", "small", "--seed", "4", "--train-samples", "50",
                 "--test-samples", "20", "--out", str(out)])
    assert code == 0
    for name in ("source_train", "source_test", "target_train", "target_test"):
        assert (out / f"{name}.csv").is_file()
    assert (out / "source_train.csv").read_text().count("\n") == 51
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 4
    assert "source_train.csv" in capsys.readouterr().out


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        main(["gen", "--preset", "small", "--train-samples", "30", "--test-samples", "10",
              "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "target_test.csv").read_bytes() == (tmp_path / "b" / "target_test.csv").read_bytes()


def test_train_writes_run_directory(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(tiny_cfg, out, "--seed", "3", "--set", "stage2.epochs=1") == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(out / "trajectory.csv"), str(out / "trajectory.json")]

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["mode"] == "ctc"
    assert manifest["overrides"] == ["stage2.epochs=1", "model.seed=3"]

    resolved = load_train_config(out / "config.cfg")
    assert resolved.seed == 3 and resolved.stage2.epochs == 1
    assert manifest["config_fingerprint"] == resolved.fingerprint()
    trajectory = Trajectory.parse_file(out / "trajectory.json")
    assert [r.epoch for r in trajectory.records] == [0, 1, 2, 3]
    assert (out / "checkpoints" / "epoch_0003.ckpt").is_file()


def test_train_reports_config_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[stage1]\nepochs = 2\nalpah = 0.5\n")
    assert _train(cfg, tmp_path / "run") == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "stage1.alpah" in err


def test_train_missing_dataset_is_runtime_failure(tiny_cfg, tmp_path, capsys):
    code = _train(tiny_cfg, tmp_path / "run", "--set", f"data.source={tmp_path / 'nothing'}",
                  "--set", f"data.targets={tmp_path / 'nothing'}")
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_mi_discrete_oracle(tmp_path, capsys):
    joint = tmp_path / "joint.csv"
    joint.write_text("0.5,0\n0,0.5\n")
    assert main(["mi", "--oracle", "discrete", str(joint), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("I = 0.6931 ± 0.0000 nats (discrete)")
    payload = json.loads((tmp_path / "mi.json").read_text())
    assert payload["estimate"]["method"] == "discrete"


def test_mi_gaussian_fixture(tmp_path, capsys):
    code = main(["mi", "--fixture", "gaussian", "--rho", "0.8", "--samples", "400", "--batch-size", "64",
                 "--hidden-dim", "8", "--steps", "20", "--out", str(tmp_path)])
    assert code == 0
    assert "closed form 0.5108" in capsys.readouterr().out
    payload = json.loads((tmp_path / "mi.json").read_text())
    assert payload["estimate"]["steps_used"] == 20


def test_mi_from_checkpoint(tiny_cfg, tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen", "--preset", "small", "--train-samples", "96", "--test-samples", "64",
          "--shared-dim", "3", "--source-private-dim", "3", "--target-private-dim", "3",
          "--source-classes", "3", "--target-classes", "2", "--out", str(data)])
    run = tmp_path / "run"
    _train(tiny_cfg, run, "--set", f"data.source={data / 'source'}", "--set", f"data.targets={data / 'target'}")
    capsys.readouterr()
    code = main(["mi", "--checkpoint", str(run / "checkpoints" / "epoch_0004.ckpt"),
                 "--dataset", str(data / "target"), "--quantity", "ity", "--batch-size", "16",
                 "--hidden-dim", "8", "--steps", "10", "--out", str(tmp_path / "mi")])
    assert code == 0
    assert capsys.readouterr().out.startswith("I = ")


def test_mi_missing_checkpoint(tmp_path, capsys):
    absent = tmp_path / "absent.ckpt"
    code = main(["mi", "--checkpoint", str(absent), "--dataset", str(tmp_path / "target"),
                 "--out", str(tmp_path / "mi")])
    assert code == 1
    assert str(absent) in capsys.readouterr().err


def test_mi_needs_exactly_one_source(tmp_path, capsys):
    assert main(["mi", "--out", str(tmp_path)]) == 2
    assert main(["mi", "--fixture", "independent", "--a", "x.csv", "--out", str(tmp_path)]) == 2
    assert "exactly one" in capsys.readouterr().err


def test_mi_rejects_unknown_oracle(tmp_path):
    assert main(["mi", "--oracle", "gaussian", "joint.csv", "--out", str(tmp_path)]) == 2


def test_report_single_and_pair(tiny_cfg, tmp_path, capsys):
    _train(tiny_cfg, tmp_path / "ctc")
    main(["train", "-c", str(tiny_cfg), "--mode", "vanilla", "--out", str(tmp_path / "vanilla")])
    capsys.readouterr()

    assert main(["report", str(tmp_path / "ctc")]) == 0
    single = capsys.readouterr().out
    assert "target_peak_epoch" in single
    assert "final_source_accuracy" in single

    assert main(["report", str(tmp_path / "vanilla"), str(tmp_path / "ctc" / "trajectory.csv")]) == 0
    paired = capsys.readouterr().out
    assert "== delta (second - first)" in paired
    assert "target_gap" in paired


def test_report_empty_trajectory(tiny_config, tmp_path, capsys):
    empty = Trajectory(config=tiny_config, config_fingerprint=tiny_config.fingerprint(), mode="ctc",
                       source="source", targets=["target"])
    emit_trajectory(empty, tmp_path)
    assert main(["report", str(tmp_path)]) == 0
    assert "no evaluated epochs" in capsys.readouterr().out


def test_report_missing_file(tmp_path):
    assert main(["report", str(tmp_path / "absent.csv")]) == 1
