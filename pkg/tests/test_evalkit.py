import numpy as np
import pytest
from scipy import stats

from adapam import evalkit as ek
from adapam import ndmath as nm
from adapam.errors import ArgumentError, ConfigError, ShapeError
from adapam.perturber import CwConfig
from adapam.proxy import ProxyPolicy
from adapam.selector import SelectorPolicy
from adapam.victim import VictimPolicy, rollout

ENV = "coop_spread"
CW = CwConfig(max_iters=50, step_size=0.05)


@pytest.fixture(scope="module")
def kit():
    # the proxy is an exact copy of the victim, so transfer is perfect
    nets = [nm.Network.init((12, 16, 5), seed=10 + i) for i in range(3)]
    victim = VictimPolicy(ENV, nets)
    proxies = ProxyPolicy(ENV, nets)
    selector = SelectorPolicy.init(12, 3, 5, hidden=(8,), seed=0)
    return victim, proxies, selector


def run(kit, method, rate=1.0, episodes=4, seed=0, eps=0.3):
    victim, proxies, selector = kit
    cfg = ek.AttackRunConfig(method, rate, episodes, seed, eps, CW)
    return ek.run_attack(ENV, victim, cfg, selector, proxies)


def test_config_validation():
    with pytest.raises(ConfigError):
        ek.AttackRunConfig("amca")
    with pytest.raises(ConfigError):
        ek.AttackRunConfig("none", rate=1.5)
    with pytest.raises(ConfigError):
        ek.AttackRunConfig("none", episodes=0)


def test_missing_artifacts(kit):
    victim, proxies, _ = kit
    with pytest.raises(ConfigError):
        ek.run_attack(ENV, victim, ek.AttackRunConfig("adapam", episodes=1), None, proxies)
    with pytest.raises(ConfigError):
        ek.run_attack(ENV, victim, ek.AttackRunConfig("fixed_targeted", episodes=1), None, None)


def test_none_equals_rollout(kit):
    victim = kit[0]
    r = run(kit, "none", episodes=5, seed=3)
    _, clean = rollout(ENV, victim, 5, 3)
    assert r.summary.mean_reward == clean.mean_reward
    assert r.summary.stderr_reward == clean.stderr_reward
    assert r.summary.n_attack_steps == 0


@pytest.mark.parametrize("method", ek.METHODS)
def test_zero_rate_is_clean(kit, method):
    clean = run(kit, "none", episodes=3)
    r = run(kit, method, rate=0.0, episodes=3)
    assert r.summary.episode_rewards == clean.summary.episode_rewards
    assert r.summary.n_attack_steps == 0


@pytest.mark.parametrize("method", ["adapam", "random_all", "fixed_targeted", "direct_control"])
def test_attacked_steps_match_gate(kit, method):
    rate = 0.4
    r = run(kit, method, rate=rate, episodes=3, seed=2)
    gate = ek.BernoulliGate(rate, 2)
    for ep in r.logs:
        fired = gate.replay(ep.episode, len(ep.steps))
        logged = np.array([bool(s.attacks) for s in ep.steps])
        assert np.array_equal(fired, logged)


@pytest.mark.parametrize("method", ["adapam", "random_all", "fixed_targeted"])
def test_budget_audit(kit, method):
    eps = 0.2
    r = run(kit, method, episodes=3, eps=eps)
    rep = ek.stealth(r.logs, method, eps)
    assert rep.n > 0 and rep.within_budget and rep.max_linf <= eps + 1e-12
    for ep in r.logs:
        for s in ep.steps:
            for a in s.attacks:
                if a["injected"]:
                    assert np.all(np.abs(a["perturbed"]) <= 1.0)


def test_summary_self_consistent(kit):
    r = run(kit, "adapam", rate=0.7, episodes=4)
    again = ek.summarize_run(r.logs, "adapam", 0.7, 0.3, 0)
    assert again == r.summary
    assert r.summary.mean_reward == np.mean(r.summary.episode_rewards)


def test_perfect_proxy_transfers(kit):
    s = run(kit, "fixed_targeted", episodes=3).summary
    assert s.proxy_success_rate is not None
    assert s.victim_success_rate == pytest.approx(s.proxy_success_rate)


def test_direct_control_annotations(kit):
    r = run(kit, "direct_control", episodes=2)
    for ep in r.logs:
        for s in ep.steps:
            (a,) = s.attacks
            assert a["kind"] == "action" and a["agent"] == 0
            assert s.actions[0] == a["malicious_action"]
    assert r.summary.victim_success_rate == 1.0


def test_random_all_perturbs_every_agent(kit):
    r = run(kit, "random_all", episodes=1)
    for s in r.logs[0].steps:
        assert sorted(a["agent"] for a in s.attacks) == [0, 1, 2]


def test_methods_share_gate_stream(kit):
    a = run(kit, "random_all", rate=0.5, episodes=2, seed=9)
    b = run(kit, "direct_control", rate=0.5, episodes=2, seed=9)
    fa = [bool(s.attacks) for s in a.logs[0].steps]
    fb = [bool(s.attacks) for s in b.logs[0].steps]
    # coop episodes have a fixed horizon so both runs see all 25 gate draws
    assert fa == fb


def test_linf_distance():
    assert ek.linf_distance([0, 0], [0.1, -0.3]) == pytest.approx(0.3)
    assert ek.linf_distance([0.5, 0.2], [0.5, 0.2]) == 0.0
    with pytest.raises(ShapeError):
        ek.linf_distance([0, 0], [0, 0, 0])


def test_confusion_f1_conventions():
    assert ek.confusion_f1(0, 5, 0) == (0.0, 0.0, 0.0)
    p, r, f = ek.confusion_f1(8, 2, 8)
    assert (p, r) == (0.8, 0.5) and f == pytest.approx(2 * 0.4 / 1.3)


@pytest.fixture(scope="module")
def detector(kit):
    victim = kit[0]
    clean, _ = rollout(ENV, victim, 120, 100)
    return ek.train_detector(ENV, clean, ek.DetectorConfig(epochs=40, seed=0))


def test_detector_validation_fp_rate(detector):
    assert detector.val_fp_rate == pytest.approx(0.05, abs=0.02)
    assert min(detector.val_accuracy) > 1 / 5


def test_detector_fp_on_fresh_clean(kit, detector):
    victim = kit[0]
    clean, _ = rollout(ENV, victim, 40, 555)
    rep = ek.detect(detector, ENV, clean, "none")
    assert rep.tp == 0 and rep.fn == 0 and rep.f1 == 0.0
    assert rep.fp / (rep.fp + rep.tn) < 0.15


def test_detector_deterministic_and_persistent(kit, detector, tmp_path):
    victim = kit[0]
    clean, _ = rollout(ENV, victim, 120, 100)
    again = ek.train_detector(ENV, clean, ek.DetectorConfig(epochs=40, seed=0))
    assert again.tau == detector.tau
    assert all(a.params.identical(b.params) for a, b in zip(again.nets, detector.nets))
    detector.save(tmp_path / "d")
    loaded = ek.Detector.load(tmp_path / "d")
    assert loaded.tau == detector.tau


def test_detector_needs_data(kit):
    victim = kit[0]
    clean, _ = rollout(ENV, victim, 3, 0)
    with pytest.raises(ArgumentError):
        ek.train_detector(ENV, clean, ek.DetectorConfig(min_episodes=10))


def test_least_likely_attack_is_detected(kit, detector):
    victim, proxies, selector = kit
    cfg = ek.AttackRunConfig("fixed_targeted", 1.0, 20, 1, 0.5, CwConfig(c=20.0))
    r = ek.run_attack(ENV, victim, cfg, selector, proxies)
    rep = ek.detect(detector, ENV, r.logs, "fixed_targeted")
    assert rep.tp + rep.fn == sum(len(ep.steps) for ep in r.logs)
    assert rep.recall > 0.8
    p, rc, f = ek.confusion_f1(rep.tp, rep.fp, rep.fn)
    assert (p, rc, f) == (rep.precision, rep.recall, rep.f1)


def test_detect_requires_steps(detector):
    victim = VictimPolicy(ENV, [nm.Network.init((12, 5), seed=0)] * 3)
    logs, _ = rollout(ENV, victim, 2, 0, keep_steps=False)
    with pytest.raises(ArgumentError):
        ek.detect(detector, ENV, logs)


def test_mean_stderr():
    m, s = ek.mean_stderr([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1 / np.sqrt(3))
    assert ek.mean_stderr([4.0]) == (4.0, 0.0)


def test_one_sided_matches_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 30), rng.normal(0.5, 1, 30)
    expected = stats.ttest_rel(a, b, alternative="less").pvalue
    assert ek.one_sided_greater(a, b) == pytest.approx(expected)
    assert ek.one_sided_greater([1.0, 1.0], [2.0, 2.0]) == 0.0
    assert ek.one_sided_greater([2.0, 2.0], [1.0, 1.0]) == 1.0


def test_sweep_rows(kit):
    victim, proxies, selector = kit
    rows, results = ek.sweep_rate(ENV, victim, ["random_all", "direct_control"], [0.0, 0.5, 1.0],
                                  [0, 1], 2, cw=CW, selector=selector, proxies=proxies)
    assert len(rows) == 6 and len(results) == 2 + 12
    zero = [r for r in rows if r.rate == 0.0]
    assert all(r.mean_decrease == 0.0 for r in zero)
    assert all(r.n_seeds == 2 and len(r.per_seed) == 2 for r in rows)


def test_episode_log_roundtrip(kit, tmp_path):
    r = run(kit, "adapam", rate=0.5, episodes=2)
    a, b = tmp_path / "a.jsonl.gz", tmp_path / "b.jsonl.gz"
    ek.write_episode_logs(a, r.logs)
    ek.write_episode_logs(b, r.logs)
    assert a.read_bytes() == b.read_bytes()
    back = ek.read_episode_logs(a)
    assert len(back) == 2
    for ep, orig in zip(back, r.logs):
        assert ep["length"] == orig.length == len(ep["steps"])
        assert ep["total_reward"] == pytest.approx(orig.total_reward, abs=1e-4)
        first = ep["steps"][0]
        assert first["format"] == "adapam-ep-1"
        assert len(first["state"]) == 12 and len(first["observations"]) == 3
        attacked = [s for s in ep["steps"] if s["attacks"]]
        assert all("perturbed" in s["attacks"][0] for s in attacked)


def test_write_csv(tmp_path):
    p = tmp_path / "t.csv"
    ek.write_csv(p, ["a", "b", "c"], [["x", 1.23456789, None]])
    assert p.read_text().splitlines() == ["a,b,c", "x,1.23457,"]
