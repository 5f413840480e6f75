import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from topolidar.cli import main
from topolidar.config import RunConfig, format_config, parse_config
from topolidar.errors import ConfigError
from topolidar.rangeimage import PointCloud, write_kitti_bin

TINY = """
height = 16
width = 64
f_v = 4
f_h = 8
latent_dim = 4
k = 4
n_layers = 2
enc_channels = 4,8
dec_channels = 8,4,4
lr_vae = 1e-3
epochs_vae = 3
period = 10
t_steps = 50
widths = 4,8
temb_dim = 8
cond_dim = 4
lr_ldm = 1e-3
epochs_ldm = 3
sample_cap = 128
n_boxes = 2
n_cylinders = 1
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY)
    assert main(["prepare", "--out", str(root / "data"), "--n", "4", "--config", str(cfg)]) == 0
    assert main(["train-vae", "--data", str(root / "data"), "--out", str(root / "vae.tldm"), "--config", str(cfg)]) == 0
    assert (
        main(
            [
                "train-ldm",
                "--data", str(root / "data"),
                "--vae", str(root / "vae.tldm"),
                "--out", str(root / "ldm.tldm"),
                "--config", str(cfg),
            ]
        )
        == 0
    )
    return root


# -- configuration -------------------------------------------------------------


def test_defaults_match_documented_settings():
    cfg = RunConfig()
    assert (cfg.height, cfg.width) == (64, 1024)
    assert (cfg.f_v, cfg.f_h) == (4, 8)
    assert cfg.latent_dim == 16
    assert cfg.k == 20
    assert cfg.n_layers == 4
    assert cfg.t_steps == 1000
    assert cfg.sample_steps == 50
    assert cfg.lambda_topo == 0.01
    assert cfg.lambda_kl == 1e-6


def test_parse_types():
    cfg = parse_config("height = 32\nlr_vae = 2e-4\nlog_scale = false\nschedule = cosine\nwidths = 8,16\n")
    assert cfg.height == 32 and isinstance(cfg.height, int)
    assert cfg.lr_vae == 2e-4
    assert cfg.log_scale is False
    assert cfg.schedule == "cosine"
    assert cfg.widths == (8, 16)


def test_parse_skips_comments_and_blanks():
    cfg = parse_config("# lead\n\nheight = 32  # trailing\n")
    assert cfg.height == 32


@pytest.mark.parametrize(
    "text",
    ["nope = 1\n", "height = 3\nheight = 4\n", "height\n", "log_scale = maybe\n", "height = tall\n"],
)
def test_parse_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_format_config_roundtrips():
    cfg = replace(RunConfig(), widths=(8, 16, 32), log_scale=False, schedule="cosine", lr_vae=3e-5)
    assert parse_config(format_config(cfg)) == cfg


# -- prepare -------------------------------------------------------------------


def test_prepare_outputs_and_determinism(pipeline):
    data = pipeline / "data"
    scenes = sorted(data.glob("*.tlri"))
    assert len(scenes) == 4
    manifest = (data / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "index,file,points,source"
    assert len(manifest) == 5
    assert parse_config((data / "config.txt").read_text()).height == 16

    rerun = pipeline / "data_rerun"
    assert main(["prepare", "--out", str(rerun), "--n", "4", "--config", str(pipeline / "run.cfg")]) == 0
    for f in scenes:
        assert (rerun / f.name).read_bytes() == f.read_bytes()


def test_prepare_from_scans(pipeline, tmp_path):
    scans = tmp_path / "scans"
    scans.mkdir()
    rng = np.random.default_rng(3)
    for i in range(2):
        pts = rng.uniform(-20, 20, size=(400, 3))
        pts[:, 2] = rng.uniform(-2, 1, size=400)
        write_kitti_bin(scans / f"scan_{i}.bin", PointCloud(pts))
    out = tmp_path / "imgs"
    rc = main(["prepare", "--out", str(out), "--scans", str(scans), "--config", str(pipeline / "run.cfg")])
    assert rc == 0
    assert len(list(out.glob("*.tlri"))) == 2


def test_prepare_reports_unreadable_scans(pipeline, tmp_path, capsys):
    scans = tmp_path / "scans"
    scans.mkdir()
    write_kitti_bin(scans / "good.bin", PointCloud(np.array([[5.0, 0.0, 0.0]])))
    (scans / "torn.bin").write_bytes(b"\x00" * 13)
    rc = main(["prepare", "--out", str(tmp_path / "imgs"), "--scans", str(scans), "--config", str(pipeline / "run.cfg")])
    captured = capsys.readouterr()
    assert rc == 2
    assert "torn.bin" in captured.err
    # the readable scan was still converted before the failure was raised
    assert (tmp_path / "imgs" / "scene_0000.tlri").exists()


# -- training ------------------------------------------------------------------


def test_train_vae_artifacts(pipeline):
    assert (pipeline / "vae.tldm").exists()
    log_lines = (pipeline / "vae.log.jsonl").read_text().splitlines()
    assert len(log_lines) == 12  # 3 epochs x 4 scenes
    record = json.loads(log_lines[-1])
    assert record["step"] == 11
    assert {"total", "recon", "kl", "lr"} <= record.keys()
    assert (pipeline / "vae.loss.png").stat().st_size > 0


def test_train_ldm_artifacts(pipeline):
    assert (pipeline / "ldm.tldm").exists()
    record = json.loads((pipeline / "ldm.log.jsonl").read_text().splitlines()[-1])
    assert record["step"] == 11
    assert np.isfinite(record["loss"])
    assert (pipeline / "ldm.loss.png").stat().st_size > 0


def test_train_ldm_rejects_latent_mismatch(pipeline, tmp_path, capsys):
    cfg = tmp_path / "wide.cfg"
    cfg.write_text(TINY.replace("latent_dim = 4", "latent_dim = 8"))
    rc = main(
        [
            "train-ldm",
            "--data", str(pipeline / "data"),
            "--vae", str(pipeline / "vae.tldm"),
            "--out", str(tmp_path / "ldm.tldm"),
            "--config", str(cfg),
        ]
    )
    assert rc == 2
    assert "latent_dim" in capsys.readouterr().err


# -- sampling ------------------------------------------------------------------


def test_sample_outputs_and_determinism(pipeline, tmp_path):
    args = ["sample", "--vae", str(pipeline / "vae.tldm"), "--ldm", str(pipeline / "ldm.tldm"), "--n", "2", "--steps", "5"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a), "--seed", "7"]) == 0
    assert main(args + ["--out", str(b), "--seed", "7"]) == 0
    assert (a / "sample_0000.ply").read_bytes() == (b / "sample_0000.ply").read_bytes()
    assert (a / "bev.png").stat().st_size > 0
    rows = [json.loads(line) for line in (a / "manifest.jsonl").read_text().splitlines()]
    assert [r["index"] for r in rows] == [0, 1]
    assert all(r["steps"] == 5 for r in rows)

    c = tmp_path / "c"
    assert main(args + ["--out", str(c), "--seed", "8"]) == 0
    assert (a / "sample_0000.ply").read_bytes() != (c / "sample_0000.ply").read_bytes()


def test_sample_output_feeds_eval(pipeline, tmp_path):
    # the sampled range images make the directory a valid eval input
    out = tmp_path / "gen"
    args = ["sample", "--vae", str(pipeline / "vae.tldm"), "--ldm", str(pipeline / "ldm.tldm"), "--n", "2", "--steps", "5", "--seed", "7", "--out", str(out)]
    assert main(args) == 0
    assert (out / "sample_0001.tlri").exists()
    report = tmp_path / "report"
    rc = main(
        ["eval", "--gen", str(out), "--ref", str(pipeline / "data"), "--out", str(report), "--config", str(pipeline / "run.cfg")]
    )
    assert rc == 0
    assert (report / "report.csv").stat().st_size > 0


def test_sample_condition_changes_output(pipeline, tmp_path):
    args = ["sample", "--vae", str(pipeline / "vae.tldm"), "--ldm", str(pipeline / "ldm.tldm"), "--n", "1", "--steps", "5", "--seed", "7"]
    plain, cond = tmp_path / "plain", tmp_path / "cond"
    assert main(args + ["--out", str(plain)]) == 0
    assert main(args + ["--out", str(cond), "--cond", "narrow alley with parked cars"]) == 0
    assert (plain / "sample_0000.ply").read_bytes() != (cond / "sample_0000.ply").read_bytes()


def test_sample_zero_requests(pipeline, tmp_path):
    out = tmp_path / "none"
    rc = main(
        ["sample", "--vae", str(pipeline / "vae.tldm"), "--ldm", str(pipeline / "ldm.tldm"), "--out", str(out), "--n", "0"]
    )
    assert rc == 0
    assert (out / "manifest.jsonl").read_text() == ""


# -- evaluation ----------------------------------------------------------------


def test_eval_identical_sets(pipeline, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(
        [
            "eval",
            "--gen", str(pipeline / "data"),
            "--ref", str(pipeline / "data"),
            "--out", str(out),
            "--config", str(pipeline / "run.cfg"),
            "--workers", "2",
        ]
    )
    assert rc == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "metric,value,n_gen,n_ref,config_hash"
    values = {row.split(",")[0]: float(row.split(",")[1]) for row in lines[1:]}
    assert values["jsd"] == 0.0
    assert values["mmd"] == 0.0
    assert values["frid_h"] < 1e-6
    for name in ("bev.png", "sample_gen.png", "sample_ref.png"):
        assert (out / name).stat().st_size > 0
    printed = capsys.readouterr().out
    assert "jsd: 0" in printed


# -- persistence ---------------------------------------------------------------


def test_ph_on_tiny_scan(tmp_path, capsys):
    scan = tmp_path / "pair.bin"
    write_kitti_bin(scan, PointCloud(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])))
    out = tmp_path / "diagram.csv"
    assert main(["ph", "--input", str(scan), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "birth,death,u,v"
    deaths = [line.split(",")[1] for line in lines[1:]]
    assert sorted(deaths) == ["3.0", "inf"]
    assert out.with_suffix(".png").stat().st_size > 0
    assert "1 finite" in capsys.readouterr().out


def test_ph_on_range_image(pipeline, tmp_path):
    out = tmp_path / "diagram.csv"
    assert main(["ph", "--input", str(pipeline / "data" / "scene_0000.tlri"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) > 2


def test_ph_honours_projection_config(pipeline, tmp_path):
    # stored pixels are normalized, so the geometry comes from the config
    src = str(pipeline / "data" / "scene_0000.tlri")
    near, far = tmp_path / "near.csv", tmp_path / "far.csv"
    assert main(["ph", "--input", src, "--out", str(near), "--config", str(pipeline / "run.cfg")]) == 0
    stretched = tmp_path / "stretched.cfg"
    stretched.write_text((pipeline / "run.cfg").read_text() + "r_max = 160.0\n")
    assert main(["ph", "--input", src, "--out", str(far), "--config", str(stretched)]) == 0
    assert near.read_text() != far.read_text()


def test_ph_rejects_unknown_format(tmp_path, capsys):
    weird = tmp_path / "scan.xyz"
    weird.write_text("0 0 0\n")
    assert main(["ph", "--input", str(weird), "--out", str(tmp_path / "d.csv")]) == 2
    assert "expected" in capsys.readouterr().err


# -- exit codes ----------------------------------------------------------------


def test_missing_input_exits_two(tmp_path):
    assert main(["eval", "--gen", str(tmp_path / "a"), "--ref", str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_exits_one(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("height = very tall\n")
    assert main(["prepare", "--out", str(tmp_path / "d"), "--config", str(bad)]) == 1


def test_usage_error_exits_one():
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["sample", "--vae", "x"])
    assert excinfo.value.code == 1
