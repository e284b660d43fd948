import json
import subprocess
import sys

from revlearn import cli


def test_run_command(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"experiment: lr_schedule\nT: 5\nmeta_iters: 1\nseeds: 1\neval_seeds: 1\n"
                   f"output_dir: {tmp_path / 'out'}\n")
    assert cli.main(["run", str(cfg)]) == 0
    doc = json.loads((tmp_path / "out" / "results.json").read_text())
    assert doc["experiment"] == "lr_schedule"
    assert "meta_loss_final" in capsys.readouterr().out


def test_run_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  hidden: [3, zero]\n")
    assert cli.main(["run", str(cfg)]) == 2
    assert "model.hidden[1]" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_bench_memory(capsys):
    assert cli.main(["bench-memory", "--gamma", "1/2", "--gamma", "9/10", "--steps", "300",
                     "--elements", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("gamma,steps") and lines[1].startswith("1/2,300,10,1.0,")
    assert cli.main(["bench-memory", "--gamma", "3/2", "--steps", "10"]) == 2


def test_verify_subset(capsys):
    assert cli.main(["verify", "--only", "ratio multiply round trip"]) == 0
    assert "[PASS]" in capsys.readouterr().out


def test_entry_point_module():
    out = subprocess.run([sys.executable, "-m", "revlearn.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "bench-memory" in out.stdout
