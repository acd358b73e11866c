import json
import re
import subprocess
import sys
import warnings

import pytest

from cyclealign import cli, config, plots

TINY = """\
# scrambled two-axis linear task at toy size
env.Y.family = linear_system
env.Y.dims = 2
env.X.family = linear_system
env.X.dims = 2
env.X.modality = scrambled
data.triples_x = 600
data.triples_y = 600
data.horizon = 20
forward.epochs = 1
align.mode = cross_modality
align.lambda0 = 200
align.lambda1 = 0
align.lambda2 = 3
align.epochs = 2
align.steps_per_epoch = 10
align.log_every = 5
eval.episodes = 3
eval.horizon = 10
eval.seeds = 0, 1
eval.paired_count = 50
eval.baselines = random_G
"""

STAGES = ("collect", "train-forward", "train-align", "eval", "report")


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run_all(cfg_path, out, extra=()):
    for stage in STAGES:
        code = cli.main([stage, "--config", str(cfg_path), "--out", str(out), *extra])
        assert code == 0, stage


# ---------------------------------------------------------------------------
# config parsing


def test_presets_parse_with_loss_weights():
    assert config.preset_names() == ["cross_modality_linear", "cross_physics_pointmass", "morphology_chain"]
    cfg = config.load_preset("cross_physics_pointmass")
    assert (cfg["align.lambda0"], cfg["align.lambda1"], cfg["align.lambda2"]) == (200.0, 1.0, 0.0)
    lin = config.load_preset("cross_modality_linear")
    assert (lin["align.lambda0"], lin["align.lambda1"], lin["align.lambda2"]) == (200.0, 0.0, 3.0)
    assert lin["align.epochs"] == 50 and lin["align.lr"] == 0.001
    chain = config.load_preset("morphology_chain")
    assert (chain["align.e"], chain["align.e1"], chain["align.e2"], chain["align.lr"]) == (10, 5000, 5000, 1e-4)


def test_ci_scale_and_set_precedence():
    full = config.load_preset("cross_modality_linear")
    ci = config.load_preset("cross_modality_linear", ["scale=ci"])
    assert full["data.triples_x"] == 50000 and ci["data.triples_x"] == 20000
    pinned = config.load_preset("cross_modality_linear", ["scale=ci", "data.triples_x=7000"])
    assert pinned["data.triples_x"] == 7000


def test_set_overrides_file_value(tiny_cfg):
    cfg = config.parse_config(tiny_cfg, ["align.seed=9"])
    assert cfg["align.seed"] == 9 and cfg.train_config().seed == 9


def test_misspelled_key_suggestion():
    with pytest.raises(config.ConfigError) as e:
        config.parse_text(TINY + "align.lamda0 = 5\n", "t.cfg")
    assert f"t.cfg:{len(TINY.splitlines()) + 1}:" in str(e.value) and "align.lambda0" in str(e.value)


@pytest.mark.parametrize("line,needle", [
    ("align.epochs = many", "integer"),
    ("align.lambda1 = 1", "lambda1 must be 0"),
    ("data.mode_x = greedy", "data.mode_x"),
    ("env.X.family = rocket", "unknown family"),
    ("eval.baselines = oracle", "unknown baseline"),
    ("no equals sign", "expected"),
])
def test_invalid_values_reported(line, needle):
    with pytest.raises(config.ConfigError, match=needle):
        config.parse_text(TINY + line + "\n")


def test_to_text_round_trips(tiny_cfg):
    cfg = config.parse_config(tiny_cfg)
    again = config.parse_text(cfg.to_text())
    assert again.snapshot() == cfg.snapshot()


def test_task_mirrors_config():
    cfg = config.load_preset("morphology_chain", ["scale=ci"])
    task = cfg.task()
    assert task.spec_x.num_links == 4 and task.joint_map[3] == 2
    assert task.train.outer_rounds == 2 and task.seeds == (0, 1, 2)


# ---------------------------------------------------------------------------
# stages


def test_full_pipeline_artifacts(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    run_all(tiny_cfg, out)
    names = {p.name for p in out.iterdir()}
    for expected in ("dataset_X.cyds", "dataset_Y.cyds", "forward.cyfm", "forward_loss.csv", "align.cyam",
                     "align_loss_B.csv", "report.json", "report.csv", "report_random_G.json",
                     "summary.csv", "summary.txt", "manifest.json"):
        assert expected in names
    assert "align_loss_A.csv" not in names
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["timings"]) == set(STAGES)
    assert manifest["config"]["align.lambda2"] == 3.0
    svgs = sorted(p.name for p in (out / "plots").iterdir())
    assert svgs == ["align_loss_B.svg", "forward_loss.svg"]
    report = json.loads((out / "report.json").read_text())
    assert len(report["state_l1"]) == 2


def test_artifacts_never_overwritten(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["collect", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    before = (out / "dataset_X.cyds").read_bytes()
    assert cli.main(["collect", "--config", str(tiny_cfg), "--out", str(out)]) == 1
    assert "already exists" in capsys.readouterr().err
    assert (out / "dataset_X.cyds").read_bytes() == before


def test_missing_forward_model_exit_2(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["collect", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert cli.main(["train-align", "--config", str(tiny_cfg), "--out", str(out)]) == 2
    assert str(out / "forward.cyfm") in capsys.readouterr().err


def test_config_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY + "align.lamda0 = 1\n")
    assert cli.main(["collect", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert "did you mean 'align.lambda0'" in capsys.readouterr().err
    assert cli.main(["collect", "--preset", "nope", "--out", str(tmp_path / "r")]) == 1


def test_nan_watchdog_exit_3(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    for stage in STAGES[:2]:
        assert cli.main([stage, "--config", str(tiny_cfg), "--out", str(out)]) == 0
    code = cli.main(["train-align", "--config", str(tiny_cfg), "--out", str(out), "--set", "align.lr=1e300"])
    assert code == 3
    assert re.search(r"step \d+", capsys.readouterr().err)


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "cyclealign.cli", "report", "--preset",
                          "cross_physics_pointmass", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "report.json" in out.stderr


# ---------------------------------------------------------------------------
# plots


def test_svg_deterministic_and_monotone(tmp_path):
    csv_path = tmp_path / "forward_loss.csv"
    csv_path.write_text("epoch,l1\n" + "".join(f"{i},{1.0 / i!r}\n" for i in range(1, 9)))
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    assert plots.plot_csv(csv_path, a, "forward_loss", "epoch")
    assert plots.plot_csv(csv_path, b, "forward_loss", "epoch")
    assert a.read_bytes() == b.read_bytes()
    points = re.search(r'<polyline data-series="l1"[^>]*points="([^"]+)"', a.read_text()).group(1)
    ys = [float(p.split(",")[1]) for p in points.split()]
    # smaller losses are drawn lower, i.e. at larger SVG y
    assert all(y2 > y1 for y1, y2 in zip(ys, ys[1:]))
    assert ">epoch<" in a.read_text() and ">l1<" in a.read_text()


def test_empty_csv_skipped(tmp_path):
    (tmp_path / "forward_loss.csv").write_text("epoch,l1\n")
    (tmp_path / "align_loss_B.csv").write_text("step,total\n1,2.0\n2,1.0\n")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        written = plots.emit_plots(tmp_path)
    assert [p.name for p in written] == ["align_loss_B.svg"]
    assert any("no rows" in str(w.message) for w in caught)
    assert not (tmp_path / "plots" / "forward_loss.svg").exists()
