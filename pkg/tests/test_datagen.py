import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from datta.datagen import (CORRUPTIONS, LADDERS, Domain, ScenarioSpec, SourceTask, allocate,
                           apply_corruption, build_stream, dirichlet_schedule, gen_source, render)

TASK = SourceTask()


def _grey(n=64, value=0.5):
    return np.full((n, 3, 32, 32), value, dtype=np.float32)


def _censored_var(sigma):
    """Variance of clip(N(0.5, sigma^2), 0, 1)."""
    body = integrate.quad(lambda z: z * z * stats.norm.pdf(z, 0, sigma), -0.5, 0.5)[0]
    return body + 2 * 0.25 * stats.norm.sf(0.5, 0, sigma)


def test_source_is_deterministic_and_in_range():
    x1, y1 = gen_source(TASK, 50, start=7)
    x2, y2 = gen_source(TASK, 50, start=7)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(y1, y2)
    assert x1.dtype == np.float32 and x1.shape == (50, 3, 32, 32)
    assert 0.0 <= x1.min() and x1.max() <= 1.0
    # samples are addressable individually
    x3, _ = gen_source(TASK, 1, start=20)
    np.testing.assert_array_equal(x3[0], x1[13])


def test_source_labels_are_uniform():
    _, y = gen_source(TASK, 2000)
    counts = np.bincount(y, minlength=TASK.num_classes)
    assert stats.chisquare(counts).pvalue > 0.01


def test_task_seed_changes_images():
    a, _ = gen_source(SourceTask(seed=0), 4)
    b, _ = gen_source(SourceTask(seed=1), 4)
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("sev", [1, 2, 3, 4, 5])
def test_gaussian_noise_energy(sev):
    sigma = LADDERS["gaussian_noise"][sev - 1]
    out = apply_corruption(_grey(), Domain("gaussian_noise", sev), seed=sev)
    var = float(np.var(out.astype(np.float64) - 0.5))
    assert var == pytest.approx(_censored_var(sigma), rel=0.05)
    if sev <= 4:
        assert var == pytest.approx(sigma ** 2, rel=0.05)


@pytest.mark.parametrize("kind", ["gaussian_noise", "shot_noise", "impulse_noise"])
def test_noise_energy_grows_with_severity(kind):
    x, _ = gen_source(TASK, 32)
    energies = [float(np.mean((apply_corruption(x, Domain(kind, s), seed=0) - x) ** 2)) for s in range(1, 6)]
    assert all(a < b for a, b in zip(energies, energies[1:])), energies


def test_contrast_leaves_constant_image_alone():
    x = _grey(4)
    for s in range(1, 6):
        np.testing.assert_allclose(apply_corruption(x, Domain("contrast", s)), x, atol=1e-7)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_every_corruption_keeps_range_shape_dtype(kind):
    x, _ = gen_source(TASK, 4)
    out = apply_corruption(x, Domain(kind, 5), seed=3)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert 0.0 <= out.min() and out.max() <= 1.0
    single = apply_corruption(x[0], Domain(kind, 5), seed=[(9,)])
    assert single.shape == x[0].shape


def test_identity_is_a_no_op_and_domains_validate():
    x, _ = gen_source(TASK, 2)
    assert apply_corruption(x, Domain()) is x
    with pytest.raises(ValueError, match="unknown corruption"):
        Domain("fog", 3)
    with pytest.raises(ValueError):
        Domain("contrast", 6)
    with pytest.raises(ValueError):
        Domain("identity", 1)


def test_per_image_seeds_commute_with_batch_order():
    x, _ = gen_source(TASK, 6)
    seeds = [(1, i) for i in range(6)]
    perm = np.array([3, 0, 5, 1, 4, 2])
    d = Domain("shot_noise", 4)
    a = apply_corruption(x, d, seeds)
    b = apply_corruption(x[perm], d, [seeds[i] for i in perm])
    np.testing.assert_array_equal(a[perm], b)


def _take(spec, n=None):
    return list(build_stream(spec, TASK))[:n]


def test_stream_is_deterministic():
    spec = ScenarioSpec("dynamic", [Domain("gaussian_noise", 5), Domain("contrast", 5)], num_batches=3, seed=4)
    for a, b in zip(_take(spec), _take(spec)):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.labels, b.labels)
    other = _take(ScenarioSpec("dynamic", spec.domains, num_batches=3, seed=5))
    assert not np.array_equal(other[0].x, _take(spec)[0].x)


def test_dynamic_batches_mix_domains_evenly():
    doms = [Domain(k, 5) for k in ("gaussian_noise", "shot_noise", "impulse_noise", "contrast")]
    for b in _take(ScenarioSpec("dynamic", doms, num_batches=2)):
        np.testing.assert_array_equal(np.bincount(b.domain_ids), [16, 16, 16, 16])


def test_dynamic_s_alternates_single_and_mixed_runs():
    doms = [Domain("gaussian_noise", 5), Domain("contrast", 5)]
    batches = _take(ScenarioSpec("dynamic_s", doms, num_batches=8, run_length=2))
    kinds = [len(set(b.domain_ids.tolist())) for b in batches]
    assert kinds == [1, 1, 2, 2, 1, 1, 2, 2]
    assert set(batches[0].domain_ids) == {0} and set(batches[4].domain_ids) == {1}


def test_non_iid_segments_domains_in_order():
    doms = [Domain("gaussian_noise", 5), Domain("contrast", 5)]
    ids = [set(b.domain_ids.tolist()) for b in _take(ScenarioSpec("non_iid", doms, num_batches=4))]
    assert ids == [{0}, {0}, {1}, {1}]


def test_large_delta_gives_near_uniform_labels():
    rows = dirichlet_schedule(200, 10, 100.0, 0)
    tv = 0.5 * np.abs(rows - 0.1).sum(axis=1)
    assert tv.mean() <= 0.1


def test_small_delta_concentrates_labels():
    spec = ScenarioSpec("non_iid", [Domain("contrast", 5)], num_batches=30, delta=0.01)
    props = [np.bincount(b.labels, minlength=10).max() / 64 for b in _take(spec)]
    assert np.mean(props) >= 0.9


def test_dirichlet_rows_are_distributions():
    rows = dirichlet_schedule(50, 10, 1e-4, 1)
    assert np.isfinite(rows).all()
    np.testing.assert_allclose(rows.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        dirichlet_schedule(1, 10, 0.0, 0)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(1, 200))
def test_allocate_sums_exactly(w, total):
    p = np.array(w) + 1e-9
    counts = allocate(p / p.sum(), total)
    assert counts.sum() == total and (counts >= 0).all()


def test_scenario_validation_messages():
    d = [Domain("contrast", 5)]
    with pytest.raises(ValueError, match="at least 2 domains"):
        ScenarioSpec("dynamic", d)
    with pytest.raises(ValueError, match="unknown scenario kind"):
        ScenarioSpec("shuffle", d)
    with pytest.raises(ValueError, match="delta"):
        ScenarioSpec("non_iid", d, delta=0)
    with pytest.raises(ValueError, match="cannot share"):
        ScenarioSpec("dynamic", d * 5, batch_size=4)


def test_scenario_dict_round_trip():
    spec = ScenarioSpec("multi_non_iid", [Domain("contrast", 5), Domain("shot_noise", 2)], delta=0.5, seed=3)
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec
    short = ScenarioSpec.from_dict({"kind": "dynamic", "domains": ["contrast:5", "identity"]})
    assert short.domains == (Domain("contrast", 5), Domain())
    with pytest.raises(ValueError, match="unknown scenario key"):
        ScenarioSpec.from_dict({"kind": "dynamic", "domains": [], "bogus": 1})


def test_render_depends_only_on_key():
    a = render(TASK, [3, 4], [(0, 9, 1), (0, 9, 2)])
    b = render(TASK, [4], [(0, 9, 2)])
    np.testing.assert_array_equal(a[1], b[0])
