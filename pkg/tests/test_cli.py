import csv
import json
import shutil

import numpy as np
import pytest

from deepbp.cli import main
from deepbp.cnn import DenoiserArch
from deepbp.data import Dataset, strip_truth
from deepbp.training import Adam, TrainConfig, init_model, save_checkpoint

TRAIN_FLAGS = ["--widths", "3,4", "--n1", "1", "--n2", "2", "--n3", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt_run")
    rc = run("train", "--data", tiny_dataset.root, "--out", out,
             "--epochs", "1", *TRAIN_FLAGS)
    assert rc == 0
    return out / "checkpoint"


# --------------------------------------------------------------------------
# parser level


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        run("--help")
    assert e.value.code == 0
    assert "gen-data" in capsys.readouterr().out


def test_subcommand_help_mentions_formats(capsys):
    with pytest.raises(SystemExit) as e:
        run("train", "--help")
    assert e.value.code == 0
    assert "metrics.csv" in capsys.readouterr().out


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as e:
        run("train", "--nonsense", "1")
    assert e.value.code == 2


def test_bad_mode_choice_exits_two():
    with pytest.raises(SystemExit) as e:
        run("train", "--mode", "psychic")
    assert e.value.code == 2


def test_missing_required_out_is_usage_error(capsys):
    assert run("gen-data") == 2
    assert "required" in capsys.readouterr().err


def test_threads_zero_is_usage_error(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--threads", "0") == 2


# --------------------------------------------------------------------------
# gen-data


def test_gen_data_tiny(tmp_path, capsys):
    rc = run("gen-data", "--out", tmp_path / "ds", "--count", "6",
             "--size", "16", "16", "--coils", "2", "--accel", "3.0",
             "--calib", "4", "--seed", "3")
    assert rc == 0
    assert "wrote 6 problems" in capsys.readouterr().out
    ds = Dataset(tmp_path / "ds")
    assert ds.count == 6
    # 10% val / 10% test rounded up
    assert list(ds.indices("train")) == [0, 1, 2, 3]
    assert len(list(ds.indices("val"))) == 1
    assert len(list(ds.indices("test"))) == 1


def test_gen_data_count_too_small(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "ds", "--count", "2") == 2
    assert "count" in capsys.readouterr().err


# --------------------------------------------------------------------------
# train


def test_train_writes_outputs(tiny_ckpt):
    assert (tiny_ckpt / "checkpoint.json").is_file()
    assert (tiny_ckpt.parent / "metrics.csv").is_file()


def test_train_config_file_merge(tiny_dataset, tmp_path, capsys):
    # the file sets epochs=5 but the explicit flag wins
    cfg = tmp_path / "conf.json"
    cfg.write_text(json.dumps({"epochs": 5, "widths": "3,4",
                               "n1": 1, "n2": 2, "n3": 2}))
    rc = run("train", "--data", tiny_dataset.root, "--out", tmp_path / "run",
             "--config", cfg, "--epochs", "1")
    assert rc == 0
    with open(tmp_path / "run" / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2  # header + exactly one epoch


def test_train_config_file_unknown_key(tiny_dataset, tmp_path, capsys):
    cfg = tmp_path / "conf.json"
    cfg.write_text(json.dumps({"optimiser": "adam"}))
    rc = run("train", "--data", tiny_dataset.root, "--out", tmp_path / "run",
             "--config", cfg)
    assert rc == 2
    assert "unknown option" in capsys.readouterr().err


def test_train_config_file_malformed(tiny_dataset, tmp_path):
    cfg = tmp_path / "conf.json"
    cfg.write_text("not json {")
    assert run("train", "--data", tiny_dataset.root,
               "--out", tmp_path / "run", "--config", cfg) == 2


def test_train_supervised_without_truth_exits_three(tiny_dataset, tmp_path, capsys):
    root = tmp_path / "stripped"
    shutil.copytree(tiny_dataset.root, root)
    strip_truth(root)
    rc = run("train", "--data", root, "--out", tmp_path / "run",
             "--epochs", "1", *TRAIN_FLAGS)
    assert rc == 3
    assert "ground truth" in capsys.readouterr().err


def test_train_unsupervised_without_truth_succeeds(tiny_dataset, tmp_path):
    root = tmp_path / "stripped"
    shutil.copytree(tiny_dataset.root, root)
    strip_truth(root)
    rc = run("train", "--data", root, "--out", tmp_path / "run",
             "--mode", "unsupervised", "--epochs", "1", *TRAIN_FLAGS)
    assert rc == 0


def test_train_deterministic_bit_identical(tiny_dataset, tmp_path):
    for sub in ("a", "b"):
        rc = run("train", "--data", tiny_dataset.root, "--out", tmp_path / sub,
                 "--epochs", "2", "--deterministic", "--seed", "4", *TRAIN_FLAGS)
        assert rc == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()
    a_params = sorted((tmp_path / "a" / "checkpoint").glob("*.dbpt"))
    for f in a_params:
        assert f.read_bytes() == (tmp_path / "b" / "checkpoint" / f.name).read_bytes()


def test_train_resume_via_flag(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data", tiny_dataset.root, "--out", out,
               "--epochs", "1", "--seed", "2", *TRAIN_FLAGS) == 0
    assert run("train", "--data", tiny_dataset.root, "--out", out,
               "--epochs", "2", "--seed", "2", "--resume", out / "checkpoint",
               *TRAIN_FLAGS) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["1", "2"]


# --------------------------------------------------------------------------
# eval / recon / sweep


def test_eval_writes_results(tiny_dataset, tiny_ckpt, tmp_path, capsys):
    rc = run("eval", "--data", tiny_dataset.root, "--ckpt", tiny_ckpt,
             "--out", tmp_path)
    assert rc == 0
    assert "dbp-supervised" in capsys.readouterr().out
    with open(tmp_path / "results.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["problem_id", "method", "n1", "nrmse"]
    assert len(rows) == 1 + len(list(tiny_dataset.indices("test")))
    assert all(r[1] == "dbp-supervised" for r in rows[1:])


def test_eval_requires_ckpt_flag(tiny_dataset, tmp_path):
    assert run("eval", "--data", tiny_dataset.root, "--out", tmp_path) == 2


def test_eval_missing_ckpt_dir_exits_three(tiny_dataset, tmp_path):
    assert run("eval", "--data", tiny_dataset.root, "--out", tmp_path,
               "--ckpt", tmp_path / "nope") == 3


def test_recon_zero_filled_exports(tiny_dataset, tmp_path, capsys):
    rc = run("recon", "--data", tiny_dataset.root, "--out", tmp_path / "r",
             "--method", "zero-filled", "--indices", "0,2")
    assert rc == 0
    for idx in (0, 2):
        assert (tmp_path / "r" / f"recon{idx:05d}.dbpt").is_file()
        assert (tmp_path / "r" / f"recon{idx:05d}.pgm").is_file()
        assert (tmp_path / "r" / f"recon{idx:05d}_err.pgm").is_file()
    assert (tmp_path / "r" / "results.csv").is_file()
    assert "mean NRMSE" in capsys.readouterr().out


def test_recon_dbp_with_checkpoint(tiny_dataset, tiny_ckpt, tmp_path):
    rc = run("recon", "--data", tiny_dataset.root, "--ckpt", tiny_ckpt,
             "--out", tmp_path / "r", "--indices", "10", "--n1", "2")
    assert rc == 0
    assert (tmp_path / "r" / "recon00010.dbpt").is_file()


def test_recon_l1_needs_no_checkpoint(tiny_dataset, tmp_path):
    rc = run("recon", "--data", tiny_dataset.root, "--out", tmp_path / "r",
             "--method", "l1", "--tau", "1e-2", "--indices", "0")
    assert rc == 0


def test_recon_nan_checkpoint_exits_four(tiny_dataset, tmp_path, capsys):
    cfg = TrainConfig(n1=1, n2=2, n3=2, arch=DenoiserArch(widths=(3, 4)))
    model = init_model(cfg)
    params = dict(model.named_params())
    bad = np.array(params["out_w"].data)
    bad[...] = np.nan
    params["out_w"] = type(params["out_w"])(bad, requires_grad=True)
    opt = Adam(list(params))
    save_checkpoint(tmp_path / "ckpt", model.with_params(params), opt,
                    {"epoch": 1, "mode": "supervised"})
    rc = run("recon", "--data", tiny_dataset.root, "--ckpt", tmp_path / "ckpt",
             "--out", tmp_path / "r", "--indices", "0")
    assert rc == 4
    assert "numeric failure" in capsys.readouterr().err


def test_sweep_unrolls_outputs(tiny_dataset, tiny_ckpt, tmp_path, capsys):
    rc = run("sweep-unrolls", "--data", tiny_dataset.root, "--ckpt", tiny_ckpt,
             "--out", tmp_path, "--n1", "1,2")
    assert rc == 0
    out = capsys.readouterr().out
    assert "best N1" in out
    with open(tmp_path / "sweep.csv") as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "n1,mean_nrmse"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]
    assert (tmp_path / "results.csv").is_file()


def test_sweep_empty_n1_list(tiny_dataset, tiny_ckpt, tmp_path):
    assert run("sweep-unrolls", "--data", tiny_dataset.root, "--ckpt", tiny_ckpt,
               "--out", tmp_path, "--n1", ",") == 2
