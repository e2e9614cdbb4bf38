import filecmp
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from coevolve import driver
from coevolve.driver import (
    ConfigError,
    CurriculumDegenerate,
    EmptyFrontier,
    MetricsWriter,
    Phase,
    RunState,
    config_from_dict,
    curriculum_phase,
    executor_phase,
    load_config,
    read_csv,
    run,
)
from coevolve.generators.toy import base_params
from coevolve.optim import ambiguity_scale, normalize_advantages, OptimConfig
from coevolve.types import Task

TINY = {
    "iterations": 1,
    "samples_k": 4,
    "curriculum_batch": 8,
    "curriculum_steps": 2,
    "executor_batch": 4,
    "executor_group": 4,
    "executor_steps": 2,
    "pool_size": 24,
    "heldout_size": 10,
}


def tiny(**over):
    data = {"seed": 3, **TINY}
    for k, v in over.items():
        data[k] = v
    return config_from_dict(data, "desk")


def _phase(cfg, tmp_path):
    tmp_path.mkdir(parents=True, exist_ok=True)
    return Phase(cfg, tmp_path, MetricsWriter(tmp_path / "metrics.csv"), driver.make_backend(cfg))


def _state(tmp_path):
    base = base_params()
    return RunState(0, {k: v.copy() for k, v in base.items()}, {k: v.copy() for k, v in base.items()}, tmp_path)


def _events(run_dir):
    return [json.loads(l) for l in open(Path(run_dir) / "events.jsonl")]


def test_single_iteration_loop(tmp_path):
    state = run(tiny(), tmp_path)
    assert state.iteration == 1
    kinds = [e["event"] for e in _events(tmp_path)]
    assert kinds == ["curriculum_step"] * 2 + ["frontier"] + ["executor_step"] * 2 + ["iteration_done"]
    for name in ("config.yaml", "state.json", "params/curriculum_t1.json", "params/executor_t1.json",
                 "datasets/D_1.jsonl", "rewards/curriculum_t1.jsonl", "clip/executor_t1.json",
                 "metrics.csv", "heldout.csv", "report.csv"):
        assert (tmp_path / name).exists(), name
    assert [r["iteration"] for r in read_csv(tmp_path / "heldout.csv")] == ["0", "1"]


def test_phase_accounting(tmp_path):
    cfg = tiny()
    run(cfg, tmp_path)
    for e in _events(tmp_path):
        if e["event"] == "curriculum_step":
            assert e["format_failures"] == 0
            assert e["executor_rollouts"] == e["tasks"] * cfg.samples_k
        if e["event"] == "executor_step":
            assert e["executor_rollouts"] == e["tasks"] * cfg.executor_group
        if e["event"] == "frontier":
            assert e["pool_rollouts"] == e["pool"] * cfg.samples_k


def test_zero_lambda_fixed_point(tmp_path):
    cfg = tiny(rewards={"lambda_unc": 0.0, "lambda_tool": 0.0, "lambda_rep": 0.0})
    state = _state(tmp_path)
    out = curriculum_phase(state, cfg, _phase(cfg, tmp_path))
    for k in base_params():
        assert np.array_equal(out.curriculum[k], state.curriculum[k])
    assert all(e["mean_reward"] == 0.0 for e in _events(tmp_path))


def test_freeze_discipline(tmp_path):
    cfg = tiny()
    state = _state(tmp_path)
    ph = _phase(cfg, tmp_path)
    before_exec = {k: v.copy() for k, v in state.executor.items()}
    after_cur = curriculum_phase(state, cfg, ph)
    assert all(np.array_equal(after_cur.executor[k], before_exec[k]) for k in before_exec)
    assert any(not np.array_equal(after_cur.curriculum[k], state.curriculum[k]) for k in state.curriculum)
    frozen_cur = {k: v.copy() for k, v in after_cur.curriculum.items()}
    after_exec = executor_phase(state, cfg, ph, after_cur.curriculum)
    assert all(np.array_equal(after_exec.curriculum[k], state.curriculum[k]) for k in state.curriculum)
    assert all(np.array_equal(after_cur.curriculum[k], frozen_cur[k]) for k in frozen_cur)
    assert any(not np.array_equal(after_exec.executor[k], before_exec[k]) for k in before_exec)


def test_empty_frontier(tmp_path):
    sure = (1 - 1e-13,) * 4
    cfg = tiny(toy={"direct_accuracy_by_depth": sure, "direct_accuracy_by_magnitude": sure,
                    "code_accuracy_by_depth": sure, "code_accuracy_by_magnitude": sure})
    with pytest.raises(EmptyFrontier, match="widen the band"):
        run(cfg, tmp_path)
    kept = [e for e in _events(tmp_path) if e["event"] == "frontier"]
    assert kept[0]["kept"] == 0 and kept[0]["pool"] > 0
    assert (tmp_path / "datasets" / "D_1.jsonl").read_text() == ""


def test_degenerate_curriculum(tmp_path, monkeypatch):
    real = driver.sample_curriculum

    def broken(*a, **k):
        return [(Task(t.id, t.prompt_text, "", None), tr) for t, tr in real(*a, **k)]

    monkeypatch.setattr(driver, "sample_curriculum", broken)
    cfg = tiny(curriculum_steps=4)
    with pytest.raises(CurriculumDegenerate):
        curriculum_phase(_state(tmp_path), cfg, _phase(cfg, tmp_path))
    assert len(_events(tmp_path)) == 2


def test_half_correct_group_advantages():
    # p_hat = 0.5, G = 16, half the rollouts agree with the label
    rewards = [1.0, 0.0] * 8
    cfg = OptimConfig()
    adv = normalize_advantages(rewards, cfg.epsilon_norm)
    scaled = adv * ambiguity_scale(0.5, cfg)
    assert np.allclose(adv, [1, -1] * 8, atol=1e-6)
    assert np.allclose(scaled, [0.5, -0.5] * 8, atol=1e-6)


def test_resume_matches_straight_run(tmp_path):
    straight = tmp_path / "straight"
    resumed = tmp_path / "resumed"
    run(tiny(iterations=3), straight)
    run(tiny(iterations=2), resumed)
    run(tiny(iterations=3), resumed, resume=True)
    cmp = filecmp.dircmp(straight, resumed)
    _assert_same_tree(cmp)


def _assert_same_tree(cmp):
    assert not cmp.left_only and not cmp.right_only, (cmp.left_only, cmp.right_only)
    _, mismatch, errors = filecmp.cmpfiles(cmp.left, cmp.right, cmp.common_files, shallow=False)
    assert not mismatch and not errors, mismatch
    for sub in cmp.subdirs.values():
        _assert_same_tree(sub)


def test_config_loading(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("preset: desk\nsamples_k: 6\noptim:\n  kl_beta: 0.0\n")
    cfg = load_config(str(path), ["optim.learning_rate=5", "band_upper=0.9"], seed=9)
    assert (cfg.samples_k, cfg.optim.kl_beta, cfg.optim.learning_rate, cfg.band_upper, cfg.seed) == \
        (6, 0.0, 5.0, 0.9, 9)
    assert cfg.executor_batch == 16  # from the desk preset
    assert load_config().executor_batch == 128
    assert load_config().pool == 512
    driver.dump_config(cfg, tmp_path / "out.yaml")
    assert load_config(str(tmp_path / "out.yaml")) == cfg


@pytest.mark.parametrize("data", [{"samples_k": 1}, {"iterations": 0}, {"bogus": 1}, {"optim": {"nope": 1}},
                                  {"curriculum_batch": 10, "curriculum_group": 4}, {"optim": {"group_size_G": 1}}])
def test_config_errors(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(None, ["noequals"])
    with pytest.raises(ConfigError):
        config_from_dict({}, "laptop")


def test_remote_generator_cannot_train(tmp_path):
    with pytest.raises(ConfigError):
        run(replace(tiny(), generator="remote"), tmp_path)
