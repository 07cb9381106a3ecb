import json

import pytest

from adapam import cli
from adapam.config import ExperimentConfig, PipelineManifest
from adapam.errors import ConfigError, IntegrityError, StagedDependencyError

# a seconds-scale pipeline: quality gates are disabled so tiny budgets still complete
TINY = {
    "env": "grid_battle",
    "victim": {"episodes": 30, "eval_every": 15, "select_episodes": 2, "check_episodes": 3,
               "margin": -1e9, "min_win_rate": 0.0, "hidden": [8], "batch_size": 16},
    "expert": {"episodes": 10},
    "proxy": {"hidden": [8], "bc_epochs": 1, "gail_epochs": 1, "gail_rollouts": 1,
              "min_agreement": 0.0},
    "sac": {"episodes": 3, "warmup_steps": 16, "batch_size": 8, "hidden": [8], "eval_every": 3,
            "eval_episodes": 1},
    "detector": {"epochs": 1, "min_episodes": 4, "hidden": [8]},
    "perturber": {"max_iters": 10},
    "eval": {"episodes": 2, "seeds": [0, 1, 2], "rate_grid": [0.25, 0.5, 0.75, 1.0],
             "clean_detector_episodes": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_defaults_carry_documented_values():
    cfg = ExperimentConfig.defaults("coop_spread")
    sac = cfg.sac_config()
    assert (sac.mu, sac.gamma, sac.alpha) == (0.005, 0.99, 0.05)
    assert cfg.budget().epsilon == 0.3
    assert cfg.section("eval")["rate_grid"] == [0.25, 0.5, 0.75, 1.0]
    assert cfg.cw_config().max_iters == 500


@pytest.mark.parametrize("env", ["coop_spread", "grid_battle"])
def test_round_trip(env, tmp_path):
    cfg = ExperimentConfig.defaults(env).with_seed(7)
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    again = ExperimentConfig.load(p)
    assert again == cfg and again.dumps() == cfg.dumps()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"victim": {"episodez": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"colour": "red"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"format_version": 99})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"eval": {"methods": ["amca"]}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sac": {"mu": 2.0}})


def test_bad_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    assert cli.main(["show-config", "--config", str(p)]) == 2


def test_show_config_echo_reparses(capsys, tmp_path):
    assert cli.main(["show-config", "--env", "grid_battle", "--seed", "4"]) == 0
    text = capsys.readouterr().out
    p = tmp_path / "echo.json"
    p.write_text(text)
    cfg = ExperimentConfig.load(p)
    assert cfg.seed == 4 and cfg.env == "grid_battle"


def test_attacker_before_proxy(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "out")
    assert cli.main(["train-victim", "--config", str(tiny_config), "--out", out]) == 0
    assert cli.main(["train-attacker", "--config", str(tiny_config), "--out", out]) == 3
    assert "proxy" in capsys.readouterr().err


def test_exit_code_for_training_failure(tmp_path):
    cfg = dict(TINY, victim=dict(TINY["victim"], margin=1e9))
    p = tmp_path / "fail.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train-victim", "--config", str(p), "--out", str(tmp_path / "o")]) == 4


def test_manifest_require(tmp_path):
    m = PipelineManifest(tmp_path)
    with pytest.raises(StagedDependencyError) as info:
        m.require("victim")
    assert info.value.stage == "victim"
    d = tmp_path / "victim"
    d.mkdir()
    (d / "a.bin").write_bytes(b"abc")
    m.complete("victim", d, "h1")
    PipelineManifest(tmp_path).require("victim")
    (d / "a.bin").write_bytes(b"abd")
    with pytest.raises(IntegrityError):
        PipelineManifest(tmp_path).require("victim")


def test_manifest_unchanged_on_identical_rerun(tmp_path):
    d = tmp_path / "victim"
    d.mkdir()
    (d / "a.bin").write_bytes(b"abc")
    PipelineManifest(tmp_path).complete("victim", d, "h1")
    first = (tmp_path / "manifest.json").read_bytes()
    PipelineManifest(tmp_path).complete("victim", d, "h1")
    assert (tmp_path / "manifest.json").read_bytes() == first
    PipelineManifest(tmp_path).complete("victim", d, "h2")
    assert (tmp_path / "manifest.json").read_bytes() != first


def test_integrity_exit_code(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["train-victim", "--config", str(tiny_config), "--out", str(out)]) == 0
    (out / "grid_battle" / "victim" / "agent_0.ckpt").write_bytes(b"tampered")
    assert cli.main(["collect-expert", "--config", str(tiny_config), "--out", str(out)]) == 5


def test_env_var_output_root(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("ADAPAM_OUT", str(tmp_path / "envout"))
    assert cli.main(["train-victim", "--config", str(tiny_config)]) == 0
    assert (tmp_path / "envout" / "grid_battle" / "victim" / "config.json").exists()


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_tiny_pipeline_end_to_end(tiny_config, tmp_path, capsys):
    out = tmp_path / "out"
    args = ["pipeline", "--config", str(tiny_config), "--out", str(out)]
    assert cli.main(args) == 0
    root = out / "grid_battle"
    rep = root / "report"
    for name in ("table1.csv", "table2.csv", "table3.csv", "sweep.csv", "sweep.svg", "stealth.svg",
                 "detection.svg", "report.json", "config.json"):
        assert (rep / name).exists(), name
    header = (rep / "table1.csv").read_text().splitlines()[0].split(",")
    assert header == ["metric", "none", "adapam", "random_all", "fixed_targeted", "direct_control"]
    rows = (rep / "table1.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows][:2] == ["reward_mean", "reward_stderr"]
    sweep = (rep / "sweep.csv").read_text().splitlines()[1:]
    for m in ("adapam", "random_all", "fixed_targeted", "direct_control"):
        assert sum(line.startswith(m + ",") for line in sweep) == 4
    for stage in ("victim", "expert", "proxy", "attacker", "detector"):
        assert json.loads((root / stage / "config.json").read_text())["seed"] == 0

    # rerunning stages with the same config reproduces every byte and leaves the manifest alone
    first = _snapshot(root)
    manifest = (root / "manifest.json").read_bytes()
    assert cli.main(args) == 0
    assert _snapshot(root) == first
    assert (root / "manifest.json").read_bytes() == manifest


def test_run_attack_and_sweep_commands(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "out")
    for cmd in ("train-victim", "collect-expert", "train-proxy", "train-attacker", "train-detector"):
        assert cli.main([cmd, "--config", str(tiny_config), "--out", out]) == 0
    capsys.readouterr()
    assert cli.main(["run-attack", "--config", str(tiny_config), "--out", out,
                     "--method", "adapam,random_all", "--rate", "0.5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 * 3
    assert cli.main(["sweep-rate", "--config", str(tiny_config), "--out", out, "--method", "adapam",
                     "--rate-grid", "0.25,0.5,0.75,1.0", "--workers", "2"]) == 0
    text = (tmp_path / "out" / "grid_battle" / "eval" / "sweep.csv").read_text().splitlines()
    assert len(text) == 1 + 4
