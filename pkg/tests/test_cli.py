import json
import subprocess
import sys
from datetime import datetime

import numpy as np
import pytest

from voxcodesign import __main__ as cli
from voxcodesign import controller as ctl
from voxcodesign import runner


def tiny(tmp_path, **kw):
    base = dict(out_dir=str(tmp_path / "runs"), population=4, batch=2, steps=2, timesteps=6, generations=1)
    base.update(kw)
    return runner.RunConfig(**base)


def test_config_text_round_trip():
    cfg = runner.RunConfig(mode="few-shot", seed=3, population=8, checkpoint="x.vxcp")
    assert runner.RunConfig.loads(cfg.dumps()) == cfg
    assert runner.parse_config_text("# note\nseed = 4  # trailing\n\nmode=eval\n") == {"seed": 4, "mode": "eval"}


@pytest.mark.parametrize("text, field", [
    ("bogus = 1", "bogus"),
    ("seed = one", "seed"),
    ("just words", "line 1"),
])
def test_config_text_errors_name_the_field(text, field):
    with pytest.raises(runner.ConfigError, match=field):
        runner.parse_config_text(text)


@pytest.mark.parametrize("kw, field", [
    (dict(mode="dance"), "mode"),
    (dict(profile="huge"), "profile"),
    (dict(population=5), "population"),
    (dict(steps=0), "steps"),
    (dict(dtype="float16"), "dtype"),
    (dict(friction="sticky"), "friction"),
    (dict(mode="zero-shot"), "checkpoint"),
    (dict(mode="eval", checkpoint="/nonexistent.vxcp"), "checkpoint"),
])
def test_validation_errors(tmp_path, kw, field):
    with pytest.raises(runner.ConfigError, match=field):
        runner.run(tiny(tmp_path, **kw))
    assert not (tmp_path / "runs").exists() or not any((tmp_path / "runs").iterdir())


def test_profiles_fill_missing_sizes():
    assert runner.RunConfig().resolved().population == 64
    paper = runner.RunConfig(profile="paper").resolved()
    assert (paper.population, paper.batch, paper.steps, paper.timesteps, paper.generations) == (8192, 8192, 1400, 1000, 100)
    assert runner.RunConfig(population=10).resolved().population == 10


def test_run_dirs_never_collide(tmp_path):
    cfg = tiny(tmp_path)
    now = datetime(2024, 1, 2, 3, 4, 5)
    a, b = runner.make_run_dir(cfg, now), runner.make_run_dir(cfg, now)
    assert a.name == "pretrain_s0_20240102-030405" and b.name == a.name + "-1"


def test_cli_exit_code_for_bad_config(tmp_path, capsys):
    assert cli.main(["run", "--mode", "zero-shot", "--out-dir", str(tmp_path)]) == runner.EXIT_VALIDATION
    assert "checkpoint" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text(f"mode = pretrain\nseed = 1\nsteps = 5\nbatch = 2\ntimesteps = 6\nout_dir = {tmp_path / 'runs'}\n")
    assert cli.main(["run", "--config", str(conf), "--steps", "2", "--seed", "7"]) == runner.EXIT_OK
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    cfg = runner.load_config(f"{run_dir}/config.txt")
    assert (cfg.steps, cfg.seed, cfg.batch) == (2, 7, 2)


def test_pretrain_then_every_evolution_mode(tmp_path):
    pre = runner.run(tiny(tmp_path, seed=1))
    assert pre.exit_code == 0
    ckpt = pre.run_dir / "pretrained.vxcp"
    assert ctl.load_checkpoint(ckpt).shape == (ctl.N_PARAMS,)
    text = runner.report(pre.run_dir)
    assert "final 20-step mean" in text and (pre.run_dir / "loss_series.csv").is_file()
    for mode in ("zero-shot", "few-shot", "simultaneous", "eval"):
        out = runner.run(tiny(tmp_path, mode=mode, checkpoint="" if mode == "simultaneous" else str(ckpt)))
        assert out.exit_code == 0, mode
        assert json.loads((out.run_dir / "summary.json").read_text())["mode"] == mode
        text = runner.report(out.run_dir)
        assert "final fitness" in text
        if mode != "eval":
            assert (out.run_dir / "diversity_series.csv").is_file()
            assert (out.run_dir / "fitness_series.csv").is_file()


def test_report_on_incomplete_run(tmp_path, capsys):
    out = runner.run(tiny(tmp_path))
    (out.run_dir / "metrics.csv").unlink()
    with pytest.raises(runner.IncompleteRunError, match="metrics.csv"):
        runner.report(out.run_dir)
    assert cli.main(["report", str(out.run_dir)]) == runner.EXIT_INCOMPLETE
    assert cli.main(["report", str(tmp_path)]) == runner.EXIT_INCOMPLETE


def test_gradcheck_mode(tmp_path):
    out = runner.run(tiny(tmp_path, mode="gradcheck", timesteps=20))
    assert out.exit_code == runner.EXIT_OK
    assert out.summary["passed"]
    rows = (out.run_dir / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 20


def test_diverging_run_exit_code(tmp_path, monkeypatch):
    from voxcodesign import training as tr

    def boom(*a, **k):
        raise tr.DivergenceError("step 0: 2 of 2 rollouts diverged")

    monkeypatch.setattr(tr, "pretrain", boom)
    out = runner.run(tiny(tmp_path))
    assert out.exit_code == runner.EXIT_DIVERGED
    assert "diverged" in out.summary["error"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "voxcodesign", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run" in res.stdout
