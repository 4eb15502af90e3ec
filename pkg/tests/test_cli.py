import json

import pytest

from snnsc.channel import ChannelConfig
from snnsc.checkpoint import load_system
from snnsc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from snnsc.data import load_dataset
from snnsc.transport import CloudServer

TINY = ["--samples", "24", "--backbone-epochs", "1", "--sc-epochs", "1", "--finetune-epochs", "0",
        "--trials", "2", "--test-p-grid", "0,0.2"]


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "d.sids"
    assert main(["gen-data", "--out", str(out), "--samples", "5", "--classes", "3"]) == EXIT_OK
    assert len(load_dataset(out).labels) == 15
    assert "wrote 15 images" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["sweep"], ["train", "--trials", "x"],
                                  ["train", "--variant", "nope"], ["report", "--out", "r"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code = main(["sweep", "--workdir", str(tmp_path), "--out", str(tmp_path / "s.csv")])
    assert code == EXIT_RUNTIME
    assert "snnsc train" in capsys.readouterr().err


def test_bad_report_input(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("variant,test_p\nx,0\n")
    assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME
    assert "missing column" in capsys.readouterr().err


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny run\nworkdir = {tmp_path / 'w'}\nvariant = cnn_quant\ntime_steps = 2\n")
    argv = ["train", *TINY, "--variant", "snn_if", "--config", str(cfg)]
    assert main(argv) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert "cnn_quant_t2" in out["checkpoint"] and out["bits_per_inference"] == 128


@pytest.mark.parametrize("text", ["not_a_key = 1\n", "trials = many\n", "no equals sign\n"])
def test_bad_config_file(tmp_path, text, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE


def test_train_sweep_report_and_remote_infer(tmp_path, capsys):
    work = ["--workdir", str(tmp_path / "w")]
    assert main(["train", *TINY, *work, "--time-steps", "2"]) == EXIT_OK
    trained = json.loads(capsys.readouterr().out)
    assert trained["bits_per_inference"] == 128 and "p1" in trained

    sweeps = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for path in sweeps:
        assert main(["sweep", *TINY, *work, "--time-steps", "2", "--out", str(path)]) == EXIT_OK
    assert sweeps[0].read_bytes() == sweeps[1].read_bytes()

    assert main(["report", str(sweeps[0]), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert "snn_ihf" in (tmp_path / "rep" / "summary.txt").read_text()

    system, _ = load_system(trained["checkpoint"])
    server = CloudServer(("127.0.0.1", 0), system, ChannelConfig("bsc", 0.0, 0))
    server.start_background()
    try:
        capsys.readouterr()
        port = str(server.server_address[1])
        assert main(["infer", "--checkpoint", trained["checkpoint"], "--port", port, "--samples", "24",
                     "--count", "5"]) == EXIT_OK
        assert "5 inferences" in capsys.readouterr().out
    finally:
        server.shutdown()
        server.server_close()
