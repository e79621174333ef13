import numpy as np
import pytest

from datta import tensor as T
from datta.adaptation import (AdaptationConfig, Session, bn_stats_step, datta_step, entropy_update,
                              tent_step, _site_norm)
from datta.datagen import Domain, ScenarioSpec
from datta.diversity import DiversityCache
from datta.harness import run_experiment

from conftest import TINY  # noqa: F401


def _batches(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((8, 3, 12, 12)).astype(np.float32) * rng.uniform(0.3, 1.5) for _ in range(n)]


def _affine(model):
    return {k: v.copy() for k, v in model.named_arrays().items()}


def _deltas(a, b):
    return {k: float(np.abs(a[k] - b[k]).max()) for k in a}


def test_forced_high_never_changes_parameters(tiny_model):
    cfg = AdaptationConfig(force_gate="high", t_init=0, lr=0.1)
    session = Session(tiny_model, cfg)
    before = _affine(tiny_model)
    outs = [session.step(x) for x in _batches(6)]
    assert not any(o.did_backward for o in outs)
    assert all(d == 0 for d in _deltas(before, _affine(tiny_model)).values())


def test_forced_low_with_zero_lr_backprops_but_keeps_parameters(tiny_model):
    session = Session(tiny_model, AdaptationConfig(force_gate="low", t_init=0, lr=0.0))
    before = _affine(tiny_model)
    outs = [session.step(x) for x in _batches(4)]
    assert all(o.did_backward and o.loss is not None for o in outs)
    assert all(d == 0 for d in _deltas(before, _affine(tiny_model)).values())


def test_cold_start_batches_do_not_update(tiny_model):
    session = Session(tiny_model, AdaptationConfig(force_gate="low", t_init=3, lr=0.1))
    outs = [session.step(x) for x in _batches(5)]
    assert [o.did_backward for o in outs] == [False, False, False, True, True]
    assert [o.gate.branch for o in outs[:3]] == ["cold"] * 3


def test_backward_touches_only_bn_affine(tiny_model):
    session = Session(tiny_model, AdaptationConfig(force_gate="low", t_init=0, lr=0.5))
    before = _affine(tiny_model)
    for x in _batches(3):
        session.step(x)
    d = _deltas(before, _affine(tiny_model))
    changed = {k for k, v in d.items() if v > 0}
    assert changed and changed <= {f"bn{i}.{p}" for i in range(2) for p in ("gamma", "beta")}


def test_update_fraction_limits_sites(tiny_model):
    session = Session(tiny_model, AdaptationConfig(force_gate="low", t_init=0, lr=0.5, update_fraction=50))
    before = _affine(tiny_model)
    session.step(_batches(1)[0])
    d = _deltas(before, _affine(tiny_model))
    assert d["bn0.gamma"] > 0 and d["bn1.gamma"] == 0 and d["bn1.beta"] == 0


def test_tent_with_zero_lr_equals_test_batch_norm(tiny_model):
    for x in _batches(3):
        a = tent_step(tiny_model, x, AdaptationConfig(method="tent", lr=0.0))
        b = bn_stats_step(tiny_model, x, AdaptationConfig(method="bn_stats", bn_stats_a=0.0))
        np.testing.assert_allclose(a.logits, b.logits, atol=1e-6)


def test_forced_low_datta_is_alpha_bn_plus_entropy_step(tiny_model):
    cfg = AdaptationConfig(force_gate="low", t_init=0, lr=0.05)
    twin = tiny_model.clone()
    for x in _batches(4):
        out = datta_step(tiny_model, x, DiversityCache(t_init=0), cfg)
        ref = bn_stats_step(twin, x, AdaptationConfig(method="bn_stats", bn_stats_a=1 - cfg.alpha))
        np.testing.assert_allclose(out.logits, ref.logits, atol=1e-5)
        norm = _site_norm(twin, cfg.norm("alpha_bn").__class__("alpha_bn", a=1 - cfg.alpha), True)
        entropy_update(twin, twin.stem(x), norm, (0, 1), cfg.lr)
        for i in range(2):
            np.testing.assert_allclose(tiny_model.bn[i].gamma, twin.bn[i].gamma, atol=1e-6)
            np.testing.assert_allclose(tiny_model.bn[i].beta, twin.bn[i].beta, atol=1e-6)


def test_literal_indicator_updates_on_high_batches(tiny_model):
    cfg = AdaptationConfig(literal_indicator=True, t_init=0, lambda_pct=1.0)
    session = Session(tiny_model, cfg)
    outs = [session.step(x) for x in _batches(5)]
    assert all((o.gate.score > o.gate.threshold) == o.did_backward for o in outs)
    assert any(o.did_backward for o in outs)


def test_predictions_come_before_the_update(tiny_model):
    x = _batches(1)[0]
    twin = tiny_model.clone()
    out = datta_step(tiny_model, x, DiversityCache(t_init=0), AdaptationConfig(force_gate="low", t_init=0, lr=1.0))
    ref = bn_stats_step(twin, x, AdaptationConfig(method="bn_stats", bn_stats_a=0.8))
    np.testing.assert_array_equal(out.predictions, ref.predictions)


@pytest.mark.parametrize("method", ["source", "bn_stats", "iabn_only", "unmix"])
def test_forward_only_methods_leave_model_alone(tiny_model, method):
    before = _affine(tiny_model)
    session = Session(tiny_model, AdaptationConfig(method=method))
    for x in _batches(3):
        out = session.step(x)
        assert not out.did_backward and out.predictions.shape == (8,)
    assert all(d == 0 for d in _deltas(before, _affine(tiny_model)).values())


def test_config_validation():
    with pytest.raises(ValueError, match="valid methods"):
        AdaptationConfig(method="magic")
    for bad in (dict(update_fraction=0), dict(force_gate="mid"), dict(granularity="pixel"), dict(lr=-1),
                dict(threshold_scale="cube")):
        with pytest.raises(ValueError):
            AdaptationConfig(**bad)
    assert AdaptationConfig(update_fraction=34).eligible_sites(3) == (0, 1)


def test_single_domain_stream_splits_around_the_median(trained):
    ckpt, _ = trained
    spec = ScenarioSpec("non_iid", [Domain("gaussian_noise", 3)], num_batches=96, delta=100.0)
    records, summary = run_experiment(ckpt, spec, AdaptationConfig())
    gated = [r for r in records if r.branch != "cold"]
    assert summary["backward_count"] == summary["low_branch_count"]
    # with a median threshold and no shift in diversity, about half the batches go low
    assert abs(summary["low_branch_count"] / len(gated) - 0.5) <= 0.15
