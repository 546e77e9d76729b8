import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import autodiff as ad
from disparity_refiner import main
from errors import ConfigError, InputError
from refine_net import NetConfig, RefinementModel
from settings import RunConfig, deep_merge, load_run_config, parse_overrides
from stereo_core import DisparityMap
from stereo_io import read_disparity, read_image, write_pfm

TINY_NET = [
    "--set", "net.levels=2",
    "--set", "net.channels=[4, 6]",
    "--set", "net.max_disp=8",
    "--set", "net.mlp_hidden=[8]",
]  # fmt: skip


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Run in tmp_path; the CLI loads .env into os.environ, so restore it afterwards"""
    monkeypatch.chdir(tmp_path)
    saved = dict(os.environ)
    for name in list(os.environ):
        if name.startswith("NDR_"):
            del os.environ[name]
    yield
    os.environ.clear()
    os.environ.update(saved)


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    assert main(["synth", "--out-dir", str(out), "--seed", "3", "--width", "32", "--height", "32", "--dmax", "6", "--kappa", "2"]) == 0
    return out


# ---- settings ----


def test_parse_overrides_builds_nested_tree():
    tree = parse_overrides(["train.steps=5", "blackbox.sgm.p1=2.5", "blackbox.method=ad_census", "net.channels=[4, 6]"])
    assert tree == {
        "train": {"steps": 5},
        "blackbox": {"sgm": {"p1": 2.5}, "method": "ad_census"},
        "net": {"channels": [4, 6]},
    }
    with pytest.raises(ConfigError):
        parse_overrides(["train.steps"])
    with pytest.raises(ConfigError):
        parse_overrides(["train=1", "train.steps=2"])


def test_deep_merge_keeps_siblings():
    merged = deep_merge({"train": {"steps": 1, "seed": 2}}, {"train": {"steps": 3}})
    assert merged == {"train": {"steps": 3, "seed": 2}}


def test_defaults_and_full_preset():
    run = load_run_config(env_file=None)
    assert run.net == NetConfig()
    assert run.blackbox.sgm.num_paths == 8
    full = load_run_config(overrides=["net_preset=\"full\"", "net.max_disp=128"], env_file=None)
    assert full.net.levels == 5
    assert full.net.max_disp == 128


def test_precedence_cli_over_file_over_env(tmp_path, monkeypatch):
    monkeypatch.setenv("NDR_TRAIN__STEPS", "7")
    monkeypatch.setenv("NDR_TRAIN__SEED", "5")
    assert load_run_config(env_file=None).train.steps == 7

    config = tmp_path / "run.toml"
    config.write_text("[train]\nsteps = 9\n")
    from_file = load_run_config(config, env_file=None)
    assert from_file.train.steps == 9
    assert from_file.train.seed == 5

    assert load_run_config(config, ["train.steps=11"], env_file=None).train.steps == 11


def test_dotenv_file_is_read(tmp_path):
    env = tmp_path / "custom.env"
    env.write_text("NDR_BLACKBOX__D_MAX=48\n")
    assert load_run_config(env_file=env).blackbox.d_max == 48


def test_foreign_dotenv_variables_are_ignored(tmp_path):
    (tmp_path / ".env").write_text("FOO=1\nGSC_CREDENTIALS_PATH=creds.json\nNDR_RUN_SLOW=1\nNDR_TRAIN__SEED=6\n")
    assert load_run_config().train.seed == 6
    assert main(["synth", "--out-dir", str(tmp_path / "scene"), "--width", "32", "--height", "32", "--dmax", "6"]) == 0
    assert (tmp_path / "scene" / "gt.pfm").exists()


def test_dotenv_typo_inside_a_section_is_rejected(tmp_path):
    (tmp_path / ".env").write_text("NDR_TRAIN__STEPZ=5\n")
    with pytest.raises(ConfigError):
        load_run_config()
    assert main(["synth", "--out-dir", str(tmp_path / "scene")]) == 3


def test_log_level_is_not_a_config_key():
    with pytest.raises(ConfigError):
        load_run_config(overrides=["log_level=\"DEBUG\""], env_file=None)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(overrides=["train.bogus=1"], env_file=None)
    with pytest.raises(ConfigError):
        load_run_config(overrides=["bogus=1"], env_file=None)
    with pytest.raises(ConfigError):
        load_run_config(overrides=["blackbox.sgm.p1=50", "blackbox.sgm.p2=10"], env_file=None)
    with pytest.raises(InputError):
        load_run_config(tmp_path / "missing.toml", env_file=None)
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\nsteps = ")
    with pytest.raises(ConfigError):
        load_run_config(broken, env_file=None)


def test_shipped_config_matches_defaults():
    shipped = load_run_config(Path(__file__).parent / "refiner.toml", env_file=None)
    assert shipped.model_dump() == RunConfig(_env_file=None).model_dump()


# ---- commands ----


def test_exit_codes(tmp_path):
    missing = str(tmp_path / "nope.pfm")
    assert main(["eval", "--raw", missing, "--refined", missing, "--gt", missing]) == 2
    assert main(["--config", str(tmp_path / "nope.toml"), "synth", "--out-dir", str(tmp_path)]) == 2
    assert main(["--set", "train.steps=-1", "train", "--out-dir", str(tmp_path / "t")]) == 3
    assert main(["--set", "nothing.here=1", "synth", "--out-dir", str(tmp_path)]) == 3


def test_synth_is_deterministic(tmp_path, scene_dir):
    again = tmp_path / "again"
    assert main(["synth", "--out-dir", str(again), "--seed", "3", "--width", "32", "--height", "32", "--dmax", "6", "--kappa", "2"]) == 0
    for name in ("left.png", "right.png", "gt.pfm", "right_k2.png"):
        assert (scene_dir / name).read_bytes() == (again / name).read_bytes()
    assert read_image(scene_dir / "right_k2.png").shape == (16, 16)
    assert main(["synth", "--out-dir", str(tmp_path / "odd"), "--width", "34", "--height", "32", "--dmax", "6", "--kappa", "4"]) == 3


def test_eval_identical_maps(tmp_path, scene_dir, capsys):
    gt = str(scene_dir / "gt.pfm")
    out = tmp_path / "reports"
    assert main(["eval", "--raw", gt, "--refined", gt, "--gt", gt, "--out-dir", str(out), "--html"]) == 0
    frame = pd.read_csv(out / "report.csv", index_col="map")
    assert frame.loc["refined", "EPE"] == 0.0
    assert frame.loc["delta", "bad3"] == 0.0
    for name in ("report.txt", "report.json", "report.html"):
        assert (out / name).exists()
    assert "📊" in capsys.readouterr().out


def test_match_balanced_and_unbalanced(tmp_path, scene_dir):
    raw = tmp_path / "raw.pfm"
    args = ["match", "--left", str(scene_dir / "left.png"), "--dmax", "8"]
    assert main(args + ["--right", str(scene_dir / "right.png"), "--out", str(raw)]) == 0
    assert (read_disparity(raw).width, read_disparity(raw).height) == (32, 32)

    unbalanced = args + ["--right", str(scene_dir / "right_k2.png"), "--out", str(raw)]
    assert main(unbalanced) == 3
    assert main(unbalanced + ["--kappa-aware"]) == 0
    d = read_disparity(raw)
    assert (d.width, d.height) == (32, 32)
    assert np.all(d.values[d.valid] % 2 == 0)


def test_train_zero_steps_saves_initialization(tmp_path):
    out = tmp_path / "run"
    assert main(TINY_NET + ["train", "--out-dir", str(out), "--steps", "0", "--seed", "4"]) == 0
    saved = ad.load_parameters(out / "model.npz")
    expected = RefinementModel(NetConfig(levels=2, channels=[4, 6], max_disp=8, mlp_hidden=[8]), seed=4).snapshot()
    assert saved.keys() == expected.keys()
    for name, values in expected.items():
        assert np.array_equal(saved[name], values)
    assert (out / "metrics.csv").exists()
    assert (out / "model.npz.card.json").exists()


def test_refine_and_export_ply(tmp_path, scene_dir):
    run = tmp_path / "run"
    assert main(TINY_NET + ["train", "--out-dir", str(run), "--steps", "0"]) == 0
    left, right = str(scene_dir / "left.png"), str(scene_dir / "right.png")
    refined = tmp_path / "refined.pfm"
    common = ["refine", "--left", left, "--right", right, "--ckpt", str(run / "model.npz"), "--out", str(refined)]

    assert main(common + ["--raw", str(scene_dir / "gt.pfm"), "--out-w", "63", "--out-h", "47"]) == 0
    d = read_disparity(refined)
    assert (d.width, d.height) == (63, 47)
    assert d.valid.all()

    small = tmp_path / "small.pfm"
    write_pfm(DisparityMap.from_array(np.ones((10, 10))), small)
    assert main(common + ["--raw", str(small)]) == 3
    assert main(["--set", "net.max_disp=16"] + common + ["--raw", str(scene_dir / "gt.pfm")]) == 3

    ply = tmp_path / "cloud.ply"
    assert main(["export-ply", "--disparity", str(scene_dir / "gt.pfm"), "--image", left, "--out", str(ply), "--focal", "40"]) == 0
    header = ply.read_text().split("end_header")[0]
    assert "format ascii 1.0" in header
    assert "element vertex" in header
