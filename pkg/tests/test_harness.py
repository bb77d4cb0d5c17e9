import json

import numpy as np
import pytest

from voxequiv.harness.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, main
from voxequiv.harness.config import ConfigError, ExperimentConfig
from voxequiv.harness.experiments import parallel_map, worker_count
from voxequiv.harness.reporting import (ReportBundle, RunManifest, Table, read_table_csv, verify_checksums,
                                        write_report)

SMALL = """
[dataset]
n_molecules = 30
holdout = 6
atoms_min = 2
atoms_max = 3
bond_length = 1.3
elements = C, O
[grid]
edge_voxels = 16
resolution = 0.5
channels = C, O
[network]
model_size = tiny
[train]
epochs = 1
[rotation]
angles = 0, 45, 90
axes = z
cosine_angles = 0, 90, 180
decomposition_molecules = 2
[sampler]
steps = 10
save_every = 5
chains = 1
n_seeds = 2
[denoiser]
kind = group_averaged
base = empirical_bayes
reference_size = 8
[property]
shuffle_control = false
"""


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def test_config_round_trip_and_overrides():
    cfg = ExperimentConfig.from_ini(SMALL, ["train.epochs=3", "rotation.axes=x, y"])
    assert cfg.train.epochs == 3 and cfg.rotation.axes == ("x", "y")
    assert cfg.grid.channels == ("C", "O") and cfg.rotation.angles == (0.0, 45.0, 90.0)
    again = ExperimentConfig.from_ini(cfg.to_ini())
    assert again == cfg
    assert cfg.widths() == (2, 4, 8)


@pytest.mark.parametrize("text,overrides", [
    ("[nonsense]\na = 1\n", ()),
    ("[train]\nepochs = many\n", ()),
    ("[train]\nwarmup = 3\n", ()),
    ("", ["train.epochs"]),
    ("", ["denoiser.kind=oracle"]),
    ("not an ini", ()),
])
def test_config_errors(text, overrides):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini(text, overrides)


def test_empty_table_writes_header_only(tmp_path):
    bundle = ReportBundle("r", RunManifest({"a": 1}), tables={"empty": Table(["x", "y"])})
    write_report(bundle, tmp_path)
    lines = (tmp_path / "empty.csv").read_text().splitlines()
    assert lines == [f"# run_id={bundle.manifest.run_id}", "x,y"]
    assert verify_checksums(tmp_path) == []


def test_run_id_ignores_wall_clock():
    a, b = RunManifest({"k": 1.5}), RunManifest({"k": 1.5})
    b.started += 100
    assert a.run_id == b.run_id
    assert RunManifest({"k": 2}).run_id != a.run_id


def test_parallel_map_matches_serial(monkeypatch):
    monkeypatch.setenv("VOXEQUIV_WORKERS", "2")
    assert worker_count() == 2
    assert parallel_map(abs, [-3, 1, -2]) == [3, 1, 2]
    monkeypatch.setenv("VOXEQUIV_WORKERS", "two")
    with pytest.raises(ValueError):
        worker_count()


def test_reconstruction_run_is_deterministic(small_ini, tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["recon-equiv", "-c", str(small_ini), "-o", str(d),
                     "--set", "experiment.ablation_values=on, off"]) == EXIT_OK
    csvs = sorted(p.name for p in dirs[0].glob("*.csv"))
    assert "summary.csv" in csvs and "curve_on.csv" in csvs and "decomposition_off.csv" in csvs
    for name in csvs:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    run_id, cols, rows = read_table_csv(dirs[0] / "summary.csv")
    report = json.loads((dirs[0] / "reconstruction.json").read_text())
    assert report["run_id"] == run_id
    for rec, row in zip(report["tables"]["summary"], rows):
        for c, v in zip(cols, row):
            assert (repr(float(rec[c])) if isinstance(rec[c], float) else str(rec[c])) == v
    for row in rows:
        assert float(row[cols.index("decomp_relative_residual")]) <= 1e-9
    assert main(["report", str(dirs[0])]) == EXIT_OK
    (dirs[0] / "summary.csv").write_text("tampered\n")
    assert main(["report", str(dirs[0])]) == EXIT_IO


def test_generation_run_parallel_matches_serial(small_ini, tmp_path, monkeypatch):
    outs = []
    for workers in ("1", "2"):
        monkeypatch.setenv("VOXEQUIV_WORKERS", workers)
        out = tmp_path / f"w{workers}"
        assert main(["generate", "-c", str(small_ini), "-o", str(out)]) == EXIT_OK
        outs.append(out)
    assert (outs[0] / "generated.jsonl").read_bytes() == (outs[1] / "generated.jsonl").read_bytes()
    summary = json.loads((outs[0] / "generation.json").read_text())["summary"]
    assert summary["canonical_multisets_equal"] is True


def test_property_run(small_ini, tmp_path):
    out = tmp_path / "p"
    assert main(["prop-predict", "-c", str(small_ini), "-o", str(out)]) == EXIT_OK
    _, cols, rows = read_table_csv(out / "property_table.csv")
    control = [r for r in rows if r[0].startswith("invariant_control")][0]
    assert float(control[cols.index("spearman_rot")]) == 1.0
    assert float(control[cols.index("mae_rot")]) <= 1e-9


def test_exit_codes(small_ini, tmp_path, capsys):
    assert main(["recon-equiv", "-c", str(small_ini), "--set", "grid.bogus=1"]) == EXIT_CONFIG
    assert main(["recon-equiv", "-c", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    (tmp_path / "bad.vxg").write_bytes(b"nope")
    assert main(["inspect-grid", str(tmp_path / "bad.vxg")]) == EXIT_IO
    out = tmp_path / "div"
    code = main(["train", "-c", str(small_ini), "-o", str(out), "--set", "train.learning_rate=1e200",
                 "--set", "train.epochs=3"])
    assert code == EXIT_DIVERGENCE
    marker = (out / "FAILED").read_text()
    assert "stage: train" in marker and "DivergenceError" in marker


def test_voxelize_and_inspect(tmp_path, capsys):
    xyz = tmp_path / "m.xyz"
    xyz.write_text("2\nco\nC 0 0 0\nO 1.2 0 0\n")
    grid = tmp_path / "m.vxg"
    assert main(["voxelize", str(xyz), str(grid), "--set", "grid.channels=C, O", "--set", "grid.edge_voxels=16",
                 "--set", "grid.resolution=0.5", "--center"]) == EXIT_OK
    capsys.readouterr()
    assert main(["inspect-grid", str(grid)]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["shape"] == [2, 16, 16, 16] and 0.5 < info["max"] <= 1.0
