import json

import pytest

from uvms_pitch.cli import EXIT_CONFIG, EXIT_OK, EXIT_USAGE, build_parser, file_hash, main


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """simulate -> dataset -> train on a tiny problem, shared by several tests."""
    d = tmp_path_factory.mktemp("cli")
    eps, data, ckpt = d / "eps", d / "data", d / "net.npz"
    assert main(["simulate", "--n", "4", "--rate", "50", "--seed", "3", "--threads", "1", "--out", str(eps)]) == EXIT_OK
    assert main(["dataset", "--in", str(eps), "--groups", "top5", "--split", "0.75", "--out", str(data), "--threads", "1"]) == EXIT_OK
    assert main(["train", "--data", str(data), "--units", "4", "--epochs", "1", "--out", str(ckpt), "--threads", "1"]) == EXIT_OK
    return d


def test_verify_exits_zero(capsys):
    assert main(["verify", "--threads", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "checks passed" in out and "FAIL" not in out


def test_missing_model_file_is_a_config_error(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["verify", "--model", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["simulate", "--n", "1", "--out", "x", "--warp-speed"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_bad_group_is_a_config_error(chain, tmp_path):
    assert main(["dataset", "--in", str(chain / "eps"), "--groups", "12", "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_simulate_manifest(chain):
    m = json.loads((chain / "eps" / "run_manifest.json").read_text())
    assert m["command"] == "simulate"
    assert m["seeds"] == {"base_seed": 3}
    assert m["config"]["rate_hz"] == 50.0 and m["result"]["n_ok"] == 4
    assert m["fingerprints"]["episodes"] == file_hash(chain / "eps")
    assert m["wall_clock_s"] >= 0


def test_train_writes_checkpoint_curve_and_manifest(chain):
    assert (chain / "net.npz").exists() and (chain / "net.curve.json").exists()
    m = json.loads((chain / "net.manifest.json").read_text())
    assert m["command"] == "train" and m["fingerprints"]["checkpoint"] == file_hash(chain / "net.npz")


def test_eval_prints_rmse(chain, capsys):
    assert main(["eval", "--model", str(chain / "net.npz"), "--data", str(chain / "data"), "--horizon", "0.5"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["horizon_s"] == 0.5 and res["rmse_rad"] > 0


def test_environment_overrides_defaults_and_flags_override_environment(monkeypatch):
    monkeypatch.setenv("UVMS_SEED", "17")
    monkeypatch.setenv("UVMS_RATE", "10")
    args = build_parser().parse_args(["simulate", "--n", "1", "--out", "x"])
    assert args.seed == 17 and args.rate == 10.0
    args = build_parser().parse_args(["simulate", "--n", "1", "--out", "x", "--seed", "2"])
    assert args.seed == 2


def test_file_hash_ignores_name_and_manifest(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    a.write_bytes(b"same")
    b.write_bytes(b"same")
    assert file_hash(a) == file_hash(b) and len(file_hash(a)) == 16
    d = tmp_path / "dir"
    d.mkdir()
    (d / "x").write_bytes(b"1")
    before = file_hash(d)
    (d / "run_manifest.json").write_text("{}")
    assert file_hash(d) == before
