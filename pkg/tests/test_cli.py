import json
import subprocess
import sys

import pytest
from PIL import Image

from adaptgs.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from adaptgs.pipeline import load_checkpoint
from adaptgs.scene import load_scene


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--seed", "3", "--scenes", "1", "--views", "4", "--targets", "2",
                 "--res", "32", "--out", str(data)]) == EXIT_OK
    ckpt = root / "model.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--set", "train.steps=2",
                 "--set", "encoder.channels=8, 16, 16"]) == EXIT_OK
    scene = next(p for p in sorted(data.iterdir()) if p.is_dir())
    return root, data, scene, ckpt


# ------------------------------------------------------------------ gen-data
def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--seed", "7", "--res", "16", "--out", str(out)]) == EXIT_OK
    assert tree(a) == tree(b) and tree(a)


def test_gen_data_scene_count(tmp_path):
    assert main(["gen-data", "--scenes", "3", "--res", "16", "--out", str(tmp_path / "d")]) == EXIT_OK
    scenes = [p for p in (tmp_path / "d").iterdir() if p.is_dir()]
    assert len(scenes) == 3
    sample = load_scene(scenes[0])
    assert len(sample.inputs) == 2 and sample.resolution == (16, 16)


def test_gen_data_zero_views_is_usage_error(tmp_path):
    assert main(["gen-data", "--views", "0", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


# ------------------------------------------------------------------ train / eval
def test_train_writes_checkpoint_and_log(workspace):
    root, _, _, ckpt = workspace
    model = load_checkpoint(ckpt)
    assert model.config.train.steps == 2
    lines = (root / "model.ckpt.log.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["step"] == 2


def test_train_unknown_config_key(tmp_path, workspace):
    _, data, _, _ = workspace
    out = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(data), "--out", str(out), "--set", "data.bogus=1"]) == EXIT_USAGE
    assert not out.exists()


def test_train_config_file_and_flag_precedence(tmp_path, workspace):
    _, data, _, _ = workspace
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nsteps = 5\nseed = 4\n[encoder]\nchannels = 8, 16, 16\n")
    out = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(ini), "--set", "train.steps=1", "--data", str(data),
                 "--out", str(out)]) == EXIT_OK
    cfg = load_checkpoint(out).config
    assert cfg.train.steps == 1 and cfg.train.seed == 4


def test_train_missing_data_cleans_up(tmp_path):
    out = tmp_path / "sub" / "m.ckpt"
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(out)]) == EXIT_DATA
    assert not out.exists() and not out.parent.exists()


def test_eval_one_row_per_view_count(tmp_path, workspace, capsys):
    _, data, _, ckpt = workspace
    out = tmp_path / "ev.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--views", "2,3,4",
                 "--out", str(out)]) == EXIT_OK
    rows = json.loads(out.read_text())
    assert [r["views_in"] for r in rows] == [2, 3, 4]
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 4


def test_eval_rejects_bad_views(workspace):
    _, data, _, ckpt = workspace
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--views", "2,x"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--views", "9"]) != EXIT_OK


def test_eval_is_bitwise_deterministic_across_threads(tmp_path, workspace):
    _, data, _, ckpt = workspace
    outs = []
    for i, threads in enumerate(("1", "8", "1")):
        out = tmp_path / f"ev{i}.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--views", "2",
                     "--threads", threads, "--out", str(out)]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


# ------------------------------------------------------------------ infer / render / inspect
def test_infer_render_round_trip_bitwise(tmp_path, workspace):
    _, _, scene, ckpt = workspace
    ply, idir = tmp_path / "g.ply", tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene), "--views", "2",
                 "--out-ply", str(ply), "--out-dir", str(idir)]) == EXIT_OK
    for i in range(2):
        raw = tmp_path / f"r{i}.raw"
        assert main(["render", "--ply", str(ply), "--camera", str(scene / "targets" / "cameras.json"),
                     "--index", str(i), "--out-png", str(tmp_path / f"r{i}.png"), "--raw", str(raw)]) == EXIT_OK
        assert raw.read_bytes() == (idir / f"target_{i:03d}.raw").read_bytes()
        assert (tmp_path / f"r{i}.png").read_bytes() == (idir / f"target_{i:03d}.png").read_bytes()


def test_infer_is_bitwise_deterministic_across_threads(tmp_path, workspace):
    _, _, scene, ckpt = workspace
    results = []
    for i, threads in enumerate(("1", "8")):
        d = tmp_path / f"run{i}"
        assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene), "--threads", threads,
                     "--out-ply", str(d / "g.ply"), "--out-dir", str(d / "img")]) == EXIT_OK
        results.append(tree(d))
    assert results[0] == results[1]


def test_render_bad_index(tmp_path, workspace):
    _, _, scene, ckpt = workspace
    ply = tmp_path / "g.ply"
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene), "--out-ply", str(ply)]) == EXIT_OK
    png = tmp_path / "r.png"
    code = main(["render", "--ply", str(ply), "--camera", str(scene / "targets" / "cameras.json"),
                 "--index", "5", "--out-png", str(png)])
    assert code != EXIT_OK and not png.exists()


def test_inspect_outputs(tmp_path, workspace):
    _, _, scene, ckpt = workspace
    out = tmp_path / "insp"
    assert main(["inspect", "--checkpoint", str(ckpt), "--scene", str(scene), "--views", "2",
                 "--out-dir", str(out)]) == EXIT_OK
    stages = load_checkpoint(ckpt).config.cga.stages
    for view in range(2):
        score_maps = sorted(out.glob(f"stage*_view{view}_scores.png"))
        assert len(score_maps) == stages
        assert Image.open(score_maps[0]).size == (32, 32)
        assert (out / f"final_view{view}_density.png").exists()
    rows = (out / "thresholds.txt").read_text().strip().splitlines()
    assert len(rows) == stages + 1
    for row in rows[1:]:
        cols = row.split("\t")
        assert float(cols[-2]) <= float(cols[-1])


def test_missing_checkpoint_is_data_error(tmp_path, workspace):
    _, _, scene, _ = workspace
    out = tmp_path / "o"
    assert main(["inspect", "--checkpoint", str(tmp_path / "none.ckpt"), "--scene", str(scene),
                 "--out-dir", str(out)]) == EXIT_DATA
    assert not out.exists()


# ------------------------------------------------------------------ ablate
def test_ablate_writes_table(tmp_path, workspace):
    _, data, _, _ = workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data), "--out", str(out), "--presets", "vanilla,full",
                 "--set", "train.steps=1", "--set", "encoder.channels=8, 16, 16"]) == EXIT_OK
    files = {p.name for p in out.iterdir()}
    assert {"vanilla.jsonl", "full.jsonl"} <= files
    rows = (out / "ablation.tsv").read_text().strip().splitlines()
    assert [r.split("\t")[0] for r in rows[1:]] == ["vanilla", "full"]
    assert all(r.split("\t")[-1] == "1" for r in rows[1:])


# ------------------------------------------------------------------ argument handling
def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "adaptgs.cli", *args], capture_output=True, text=True)


@pytest.mark.parametrize("args", [["--help"], ["train", "--help"], ["render", "--help"]])
def test_help_exits_zero(args):
    proc = run_cli(*args)
    assert proc.returncode == 0 and "usage" in proc.stdout


@pytest.mark.parametrize("args", [["--bogus"], ["eval", "--nope", "1"], [], ["frobnicate"]])
def test_unknown_flags_exit_nonzero(args):
    proc = run_cli(*args)
    assert proc.returncode != 0
    assert "usage" in proc.stderr
