import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coevolve.optim import (
    GroupTooSmall,
    MetricsWriter,
    NonFiniteGradient,
    OptimConfig,
    ShapeMismatch,
    TokenLayout,
    adpo_loss,
    ambiguity_scale,
    clip_histogram,
    clip_statistics,
    dynamic_epsilon_high,
    grpo_loss,
    low_probability_share,
    normalize_advantages,
    sgd_step,
)
from coevolve.types import BatchEntry, DomainError, Segment, Trajectory, UpdateBatch

import oracles


def _batch(counts, adv, scaled=None, eps_high=None, eps_low=0.2):
    entries = []
    for i, (n, a) in enumerate(zip(counts, adv)):
        segs = (Segment("policy_text", "x", tuple(0.0 for _ in range(n))),)
        tr = Trajectory(f"t{i}", segs, "1", False, 0)
        entries.append(BatchEntry(tr, 0.0, a, a if scaled is None else scaled[i],
                                  0.2 if eps_high is None else eps_high[i], eps_low))
    return UpdateBatch(tuple(entries))


@pytest.mark.parametrize("rewards,expected", [([1, 0, 1, 0], [1, -1, 1, -1]), ([1, 1, 1], [0, 0, 0]),
                                              ([2, 0], [1, -1])])
def test_normalize_examples(rewards, expected):
    assert np.allclose(normalize_advantages(rewards), expected, atol=1e-6)


def test_normalize_too_small():
    with pytest.raises(GroupTooSmall):
        normalize_advantages([1.0])


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=20))
def test_normalize_matches_oracle(r):
    assert np.allclose(normalize_advantages(r, 1e-8), oracles.zscore(r, 1e-8), atol=1e-9)


@pytest.mark.parametrize("p,floor,expected", [(1.0, 0, 1.0), (0.0, 0, 0.0), (0.6, 0.2, 0.68)])
def test_ambiguity_scale_examples(p, floor, expected):
    assert ambiguity_scale(p, OptimConfig(ambiguity_scale_floor=floor)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("p,expected", [(1.0, 0.2), (0.0, 0.4), (0.5, 0.3)])
def test_eps_high_examples(p, expected):
    assert dynamic_epsilon_high(p, OptimConfig()) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("fn", [ambiguity_scale, dynamic_epsilon_high])
def test_domain(fn):
    with pytest.raises(DomainError):
        fn(1.5, OptimConfig())


def test_monotone_on_grid():
    grid = np.linspace(0, 1, 1001)
    for floor in (0.0, 0.3):
        cfg = OptimConfig(ambiguity_scale_floor=floor)
        s = [ambiguity_scale(p, cfg) for p in grid]
        e = [dynamic_epsilon_high(p, cfg) for p in grid]
        assert np.all(np.diff(s) > 0)
        assert np.all(np.diff(e) <= 0)


def test_grpo_single_token_example():
    b = _batch([1], [1.0])
    res = grpo_loss(b, [[np.log(1.5)]], [[0.0]], [[0.0]], OptimConfig(kl_beta=0.0))
    assert res.loss == pytest.approx(-1.2, abs=1e-12)
    assert res.grad[0] == 0.0
    assert res.up_clipped.tolist() == [True]


def test_adpo_single_token_example():
    cfg = OptimConfig(kl_beta=0.0, ambiguity_scale_floor=0.0)
    s = ambiguity_scale(0.5, cfg)
    eh = dynamic_epsilon_high(0.5, cfg)
    b = _batch([1], [1.0], scaled=[s], eps_high=[eh])
    res = adpo_loss(b, [[np.log(1.35)]], [[0.0]], [[0.0]], cfg)
    assert res.loss == pytest.approx(-0.65, abs=1e-12)


def test_ratio_one_identity():
    adv = [1.0, -0.5, 0.25]
    b = _batch([3, 1, 2], adv)
    z = [[0.0] * 3, [0.0], [0.0] * 2]
    res = grpo_loss(b, z, z, z, OptimConfig(kl_beta=0.0))
    assert res.loss == pytest.approx(-np.mean(adv))
    # interior point: gradient is -A_i / (n_i * N) per token
    expected = np.concatenate([np.full(3, -1.0 / 9), [0.5 / 3], np.full(2, -0.25 / 6)])
    assert np.allclose(res.grad, expected)


def test_zero_advantage_zero_loss():
    b = _batch([2, 2], [0.0, 0.0])
    rng = np.random.default_rng(0)
    new = rng.normal(size=4)
    res = grpo_loss(b, new, rng.normal(size=4), new, OptimConfig(kl_beta=0.0), layout=TokenLayout.from_counts([2, 2]))
    assert res.loss == 0.0
    assert not res.grad.any()


def test_adpo_reduces_to_grpo_at_full_confidence():
    cfg = OptimConfig()
    eh, s = dynamic_epsilon_high(1.0, cfg), ambiguity_scale(1.0, cfg)
    b = _batch([2, 3], [0.7, -0.7], scaled=[0.7 * s, -0.7 * s], eps_high=[eh, eh])
    rng = np.random.default_rng(1)
    new, old, ref = (rng.normal(scale=0.3, size=5) for _ in range(3))
    lay = TokenLayout.from_counts([2, 3])
    a, g = adpo_loss(b, new, old, ref, cfg, layout=lay), grpo_loss(b, new, old, ref, cfg, layout=lay)
    assert a.loss == g.loss and np.array_equal(a.grad, g.grad)


def test_zero_confidence_sample_contributes_nothing():
    cfg = OptimConfig(kl_beta=0.0)
    b1 = _batch([2, 2], [1.0, -1.0], scaled=[0.0, -1.0], eps_high=[0.4, 0.2])
    b2 = _batch([2, 2], [5.0, -1.0], scaled=[0.0, -1.0], eps_high=[0.4, 0.2])
    lay = TokenLayout.from_counts([2, 2])
    old = np.zeros(4)
    for new in (np.array([3.0, -2.0, 0.1, 0.0]), np.array([-1.0, 1.0, 0.1, 0.0])):
        assert adpo_loss(b1, new, old, old, cfg, layout=lay).loss == adpo_loss(b2, new, old, old, cfg, layout=lay).loss


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_loss_matches_token_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 6, size=rng.integers(1, 6))
    adv = rng.normal(size=len(counts))
    lo = rng.uniform(0.1, 0.3, size=len(counts))
    hi = rng.uniform(0.1, 0.5, size=len(counts))
    b = _batch(counts, adv, scaled=adv, eps_high=hi, eps_low=0.2)
    b = UpdateBatch(tuple(BatchEntry(e.trajectory, 0.0, e.advantage, e.scaled_advantage, e.eps_high, l)
                          for e, l in zip(b.entries, lo)))
    lay = TokenLayout.from_counts(counts)
    new, old, ref = (rng.normal(scale=0.5, size=lay.n_tokens) for _ in range(3))
    cfg = OptimConfig(kl_beta=0.05)
    res = adpo_loss(b, new, old, ref, cfg, layout=lay)
    seqs = [list(zip(n, o, r)) for n, o, r in zip(lay.split(new), lay.split(old), lay.split(ref))]
    assert res.loss == pytest.approx(oracles.clipped_loss(seqs, lo, hi, adv, 0.05), abs=1e-12)
    # gradient against central differences on the token log-probs
    h = 1e-6
    for j in range(lay.n_tokens):
        if np.any(np.isclose(res.ratio[j], [1 - lo[lay.traj_index[j]], 1 + hi[lay.traj_index[j]]], atol=1e-4)):
            continue
        up, dn = new.copy(), new.copy()
        up[j] += h
        dn[j] -= h
        fd = (adpo_loss(b, up, old, ref, cfg, layout=lay).loss - adpo_loss(b, dn, old, ref, cfg, layout=lay).loss) / (2 * h)
        assert res.grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_clipped_token_perturbation_has_no_effect():
    b = _batch([2], [1.0])
    cfg = OptimConfig(kl_beta=0.0)
    old = np.zeros(2)
    new = np.array([np.log(1.5), 0.0])
    base = grpo_loss(b, new, old, old, cfg, layout=TokenLayout.from_counts([2]))
    assert base.up_clipped.tolist() == [True, False]
    assert base.grad[0] == 0.0
    for eps in (1e-3, 0.1, 1.0):
        pert = new.copy()
        pert[0] += eps
        assert grpo_loss(b, pert, old, old, cfg, layout=TokenLayout.from_counts([2])).loss == base.loss


def test_shape_mismatch():
    b = _batch([2, 1], [1.0, -1.0])
    with pytest.raises(ShapeMismatch):
        grpo_loss(b, [[0.0], [0.0]], [[0.0, 0.0], [0.0]], [[0.0, 0.0], [0.0]], OptimConfig())
    with pytest.raises(ShapeMismatch):
        grpo_loss(b, np.zeros(4), np.zeros(3), np.zeros(3), OptimConfig())
    with pytest.raises(ShapeMismatch):
        grpo_loss(b, [[0.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0]], OptimConfig())


def test_tool_output_tokens_are_masked():
    segs = (Segment("tool_call", "print(1)", (-0.1, -0.2)), Segment("tool_output", "1"),
            Segment("policy_text", "\\boxed{1}", (-0.3,)))
    tr = Trajectory("t", segs, "1", False, 1)
    b = UpdateBatch((BatchEntry(tr, 1.0, 1.0, 1.0, 0.2, 0.2),))
    assert TokenLayout.from_batch(b).n_tokens == 3
    res = grpo_loss(b, [tr.policy_logprobs()], [tr.policy_logprobs()], [tr.policy_logprobs()], OptimConfig())
    assert res.grad.shape == (3,)


def test_sgd_examples():
    assert sgd_step(1.0, 2.0, 0.1) == pytest.approx(0.8)
    p = {"a": np.ones(3)}
    assert np.array_equal(sgd_step(p, {"a": np.zeros(3)}, 0.5)["a"], p["a"])
    assert np.array_equal(sgd_step(p, {"a": np.ones(3)}, 0.0)["a"], p["a"])
    with pytest.raises(NonFiniteGradient):
        sgd_step(p, {"a": np.array([1.0, np.nan, 0.0])}, 0.1)
    with pytest.raises(NonFiniteGradient):
        sgd_step(1.0, np.inf, 0.1)


def test_clip_statistics_examples():
    b = _batch([2], [1.0])
    old = np.array([np.log(0.03), np.log(0.5)])
    new = old.copy()
    assert not clip_statistics(b, new, old, OptimConfig()).any()
    new[0] += np.log(2.0)
    hist = clip_statistics(b, new, old, OptimConfig())
    assert hist[0] == 1 and hist.sum() == 1 and len(hist) == 20


def test_negative_advantage_never_up_clipped():
    b = _batch([1], [-1.0])
    res = grpo_loss(b, [[np.log(3.0)]], [[0.0]], [[0.0]], OptimConfig())
    assert not res.up_clipped.any()


def test_low_probability_share():
    hist = np.zeros(20)
    hist[[0, 3, 5, 6, 19]] = [4, 1, 1, 2, 2]
    # bins below 0.3 are 0..5
    assert low_probability_share(hist, 0.3) == pytest.approx(6 / 10)
    assert np.isnan(low_probability_share(np.zeros(20)))
    assert clip_histogram(np.log([0.99, 0.5]), np.array([True, True])).tolist()[-1] == 1


def test_metrics_writer(tmp_path):
    b = _batch([1], [1.0])
    res = grpo_loss(b, [[0.0]], [[0.0]], [[0.0]], OptimConfig())
    w = MetricsWriter(tmp_path / "m.csv")
    w.write("executor", 1, 0, 0, res, np.zeros(20, dtype=int))
    MetricsWriter(tmp_path / "m.csv").write("executor", 1, 1, 0, res, np.zeros(20, dtype=int))
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 2 and rows[1]["step"] == "1"
    assert float(rows[0]["loss"]) == res.loss


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(epsilon_high_min=0.5, epsilon_high_max=0.4)
    with pytest.raises(ValueError):
        OptimConfig(group_size_G=1)
    with pytest.raises(ValueError):
        OptimConfig(ambiguity_scale_floor=1.5)
