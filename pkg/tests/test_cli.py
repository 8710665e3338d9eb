import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from mmvtrack.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


SCENE = {
    "m": 40, "n": 100, "r": 9, "k_init": 12, "t_max": 5,
    "change_mode": {"kind": "fixed_swap", "u": 8}, "snr_db": "inf", "seed": 3,
}


def test_track_guaranteed_scene(tmp_path, capsys):
    cfg = write(tmp_path, SCENE)
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "run1")]) == 0
    rows = list(csv.DictReader((tmp_path / "run1" / "track.csv").open()))
    assert len(rows) == 6 and all(r["exact_match"] == "true" for r in rows)
    assert json.loads(capsys.readouterr().out)["all_exact"] is True


def test_generate_and_recover(tmp_path):
    cfg = write(tmp_path, {"scene": SCENE, "recovery": {"algorithm": "csmusic", "k": 12}})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "frame_005_support.csv").exists()
    assert main(["recover", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    rec = json.loads((tmp_path / "r" / "recovery.json").read_text())
    assert rec["algorithm"] == "csmusic" and rec["exact_match"] is True


def test_malformed_json(tmp_path, capsys):
    cfg = write(tmp_path, '{\n  "m": 40,\n  "n": \n}')
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert ":4:1:" in err and "malformed JSON" in err


def test_bad_field_named(tmp_path, capsys):
    cfg = write(tmp_path, dict(SCENE, r="nine"))
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "r" in capsys.readouterr().err
    cfg = write(tmp_path, dict(SCENE, colour=1))
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "colour" in capsys.readouterr().err


def test_missing_seed_is_an_error(tmp_path, capsys):
    d = dict(SCENE)
    del d["seed"]
    cfg = write(tmp_path, d)
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "y"),
                 "--seed", "4"]) == 0


def test_numerical_error_exit_code(tmp_path):
    cfg = write(tmp_path, {"scene": SCENE, "tracker": {"mode": "noisy_adaptive",
                                                       "k_max": 31}})
    assert main(["track", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1


def test_sweep_twice_identical(tmp_path):
    args = ["sweep", "--config", str(CONFIGS / "fig2.json"), "--trials", "1", "--seed", "42"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = (tmp_path / "a" / "sweep.csv").read_bytes()
    assert a == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert a.startswith(b"algorithm,k,u,t,success_rate,trials\n")


def test_grid_command(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "fig3.json").read_text())
    cfg.update(t_max=13, export_frames=[1, 13])
    path = write(tmp_path, cfg)
    assert main(["grid", "--config", str(path), "--out", str(tmp_path / "g"),
                 "--trials", "1"]) == 0
    assert (tmp_path / "g" / "frame_013.pgm").exists()
    out = json.loads(capsys.readouterr().out)
    assert out["scenes"] == 1


def test_no_temp_files_left(tmp_path):
    cfg = write(tmp_path, SCENE)
    main(["track", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert not [p for p in (tmp_path / "o").iterdir() if p.name.startswith(".")]


def test_library_imports_without_cli():
    code = (
        "import sys, mmvtrack.bench, mmvtrack.tracking, mmvtrack.recovery, mmvtrack.model;"
        "assert 'mmvtrack.cli' not in sys.modules"
    )
    subprocess.run([sys.executable, "-c", code], check=True)


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, SCENE)
    proc = subprocess.run(
        [sys.executable, "-m", "mmvtrack", "track", "--config", str(cfg),
         "--out", str(tmp_path / "m")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["frames"] == 6
