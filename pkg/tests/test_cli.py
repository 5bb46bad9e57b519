import json
import os
import xml.etree.ElementTree as ET

import pytest
import yaml

from memsim import analysis, cli


def _config(tmp_path, **overrides):
    data = dict(experiment="train", task="gcnet", mode="digital", epochs=1,
                n_train=32, net_layers=[7, 8, 3], seed=0)
    data.update(overrides)
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    return str(p)


def _only_run_dir(root):
    dirs = [d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))]
    assert len(dirs) == 1
    return os.path.join(root, dirs[0])


def test_run_train_minimal(tmp_path):
    root = tmp_path / "out"
    code = cli.main(["run", _config(tmp_path), "--artifact-dir", str(root)])
    assert code == 0
    rundir = _only_run_dir(root)
    names = set(os.listdir(rundir))
    assert {"history.csv", "history.svg", "net.npz", "manifest.json"} <= names
    manifest = json.load(open(os.path.join(rundir, "manifest.json")))
    assert manifest["config"]["epochs"] == 1
    assert set(manifest["artifacts"]) == names - {"manifest.json"}
    ET.parse(os.path.join(rundir, "history.svg"))  # valid XML


def test_run_invalid_config_exit2(tmp_path, capsys):
    code = cli.main(["run", _config(tmp_path, device="fram"),
                     "--artifact-dir", str(tmp_path / "o")])
    assert code == 2
    assert "device" in capsys.readouterr().err


def test_run_missing_file_exit2(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.yaml"),
                     "--artifact-dir", str(tmp_path / "o")]) == 2


def test_run_twice_identical_manifests(tmp_path):
    cfg = _config(tmp_path)
    r1, r2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", cfg, "--artifact-dir", str(r1)]) == 0
    assert cli.main(["run", cfg, "--artifact-dir", str(r2)]) == 0
    m1 = json.load(open(os.path.join(_only_run_dir(r1), "manifest.json")))
    m2 = json.load(open(os.path.join(_only_run_dir(r2), "manifest.json")))
    assert m1["artifacts"] == m2["artifacts"]
    assert m1["config"] == m2["config"]


def test_artifact_dir_env_var(tmp_path, monkeypatch):
    root = tmp_path / "env_root"
    monkeypatch.setenv("MEMSIM_ARTIFACT_DIR", str(root))
    assert cli.main(["run", _config(tmp_path)]) == 0
    assert os.path.isdir(root)


def test_run_sweep_emits_plot_and_summary(tmp_path):
    cfg = _config(tmp_path, experiment="sweep-slices", mode="analog",
                  device="ideal", dac_bits=31, adc_bits=31, seeds=[0])
    root = tmp_path / "out"
    assert cli.main(["run", cfg, "--artifact-dir", str(root)]) == 0
    rundir = _only_run_dir(root)
    names = set(os.listdir(rundir))
    assert {"sweep.csv", "summary.csv", "sweep.svg", "manifest.json"} <= names
    header, rows = analysis.read_rows(os.path.join(rundir, "sweep.csv"))
    assert header == analysis.SWEEP_HEADER
    assert len(rows) == 5  # default slices list, one seed


def test_plot_command(tmp_path):
    path = tmp_path / "sweep.csv"
    analysis.write_rows(path, analysis.SWEEP_HEADER,
                        [{"sweep": "slices", "param": 1, "device": "pcm",
                          "seed": 0, "train_loss": 0.5, "test_loss": 0.4}])
    out = tmp_path / "sweep.svg"
    assert cli.main(["plot", str(path), "--kind", "sweep",
                     "--out", str(out)]) == 0
    ET.parse(out)
    assert cli.main(["plot", str(path), "--kind", "drift",
                     "--out", str(out)]) == 1  # schema mismatch
    with pytest.raises(SystemExit):
        cli.main(["plot", str(path), "--kind", "nonsense"])


def test_rollout_experiment(tmp_path):
    cfg = _config(tmp_path, experiment="rollout", epochs=2)
    root = tmp_path / "out"
    assert cli.main(["run", cfg, "--artifact-dir", str(root)]) == 0
    rundir = _only_run_dir(root)
    assert {"trajectory.csv", "optimal.csv", "trajectory.svg"} <= \
        set(os.listdir(rundir))


def test_export_density_experiment(tmp_path):
    cfg = _config(tmp_path, experiment="export-density", task="geodesy",
                  net_layers=[3, 8, 1], n_train=16, n_quad=64,
                  density_resolution=5)
    root = tmp_path / "out"
    assert cli.main(["run", cfg, "--artifact-dir", str(root)]) == 0
    rundir = _only_run_dir(root)
    assert "density.csv" in os.listdir(rundir)
