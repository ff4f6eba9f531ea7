import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from adaptll.arch import init_parameters, toy_vgg6
from adaptll.cache import load_manifest
from adaptll.data import split, synth_dataset
from adaptll.errors import PlanningError, UsageError
from adaptll.partition import Block, BlockPlan
from adaptll.profiler import profile_network
from adaptll.trainer import (
    TrainSettings,
    bp_feasible_batch,
    drift_estimate,
    train_bp_baseline,
    train_classic_ll_baseline,
    train_neuroflux,
)
from adaptll.units import forward_units


@pytest.fixture(scope="module")
def toy():
    net = toy_vgg6(num_classes=4, width=4)
    data = synth_dataset(4, 40, net.input_shape, seed=2)
    train, val = split(data, 0.25, seed=0)
    return net, train, val


def two_block_plan(b1=16, b2=24):
    return BlockPlan([Block((1, 2, 3), b1), Block((4, 5, 6), b2)], 1e12, 512, 0.4, [b1] * 3 + [b2] * 3)


def run(net, train, val=None, plan=None, **kw):
    settings = TrainSettings(epochs=kw.pop("epochs", 2), learning_rate=0.02, seed=kw.pop("seed", 0))
    return train_neuroflux(net, train, 1e12, 512, settings, val=val, plan=plan or two_block_plan(), **kw)


def test_one_layer_block_step_count(toy):
    net, train, _ = toy
    plan = BlockPlan([Block((i,), 7) for i in range(1, 7)], 1e12, 512, 0.4, [7] * 6)
    result = run(net, train, plan=plan, epochs=1)
    assert all(b.sgd_steps == math.ceil(len(train) / 7) for b in result.metrics.blocks)


def test_manifest_and_in_memory_oracle(toy, tmp_path):
    net, train, _ = toy
    result = run(net, train, work_dir=tmp_path)
    manifest = load_manifest(result.manifests[0].manifest_path)
    assert manifest.sample_count == len(train)
    assert manifest.activation_shape == net.output_shapes()[2]
    order = manifest.order()
    assert sorted(order.tolist()) == list(range(len(train)))
    np.testing.assert_array_equal(manifest.labels(), train.labels[order])
    from adaptll.cache import rebatch

    cached = np.concatenate([x for x, _ in rebatch(manifest, 50)])
    oracle = forward_units(net.layers[:3], result.params[:3], train.images[order])
    assert cached.tobytes() == oracle.tobytes()


def test_cache_skip_equivalence(toy):
    net, train, val = toy
    cached = run(net, train, val)
    recomputed = run(net, train, val, use_cache=False)
    for a, b in zip(cached.params, recomputed.params):
        for x, y in zip(a.unit_list() + a.head_list(), b.unit_list() + b.head_list()):
            assert x.tobytes() == y.tobytes()
    assert cached.metrics.final_val_accuracy == recomputed.metrics.final_val_accuracy
    assert cached.metrics.total_forward_evaluations < recomputed.metrics.total_forward_evaluations


def test_trained_blocks_stop_forwarding(toy):
    net, train, _ = toy
    snapshots = run(net, train).metrics.forward_after_block
    assert snapshots[0][:3] == snapshots[1][:3] and snapshots[0][3:] == [0, 0, 0]
    assert all(c > 0 for c in snapshots[1])


def test_step_count_identity_and_dominance(toy):
    net, train, _ = toy
    epochs, m = 2, len(train)
    result = run(net, train, epochs=epochs)
    blocks = result.plan.blocks
    assert result.metrics.total_sgd_steps == sum(epochs * math.ceil(m / b.batch_size) for b in blocks)
    fixed = epochs * net.depth * math.ceil(m / blocks[0].batch_size)
    assert result.metrics.total_sgd_steps < fixed


def test_determinism(toy, tmp_path):
    net, train, val = toy
    a = run(net, train, val, seed=5)
    b = run(net, train, val, seed=5)
    a.metrics.save(tmp_path / "a.json")
    b.metrics.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_peak_within_budget_with_profiled_plan(toy):
    net, train, val = toy
    models = profile_network(net, "aan").models
    budget = models[0].predict(10)
    result = train_neuroflux(net, train, budget, 64, TrainSettings(epochs=1), val=val, models=models)
    assert len(result.plan.blocks) >= 2
    for block in result.metrics.blocks:
        assert 0 < block.peak_bytes <= budget


def test_infeasible_budget(toy):
    net, train, _ = toy
    with pytest.raises(PlanningError) as info:
        train_neuroflux(net, train, 1000, 64)
    assert info.value.exit_code == 3


def test_first_layer_drift_is_zero(toy):
    net, train, val = toy
    result = run(net, train, val, epochs=3)
    first = [d for d in result.metrics.drift if d.layer_index == 1]
    assert len(first) == 2 and all(d.value == 0.0 for d in first)
    assert any(d.value > 0 for d in result.metrics.drift if d.layer_index in (2, 3))


def test_drift_identical_and_disjoint():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100, 3, 4, 4))
    assert drift_estimate(x, x.copy()).value == 0.0
    u = rng.uniform(0, 1, (500, 2, 3))
    assert drift_estimate(u, u + 2.0).value == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(UsageError):
        drift_estimate(np.zeros((0, 2)), np.zeros((0, 2)))


def analytic_l1(mu):
    """Integral of |N(0,1) - N(mu,1)| evaluated by adaptive quadrature."""
    value, _ = integrate.quad(lambda t: abs(stats.norm.pdf(t) - stats.norm.pdf(t, loc=mu)), -12, 12 + mu, points=[mu / 2], limit=200)
    return value


def test_drift_gaussian_fixture():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((1_000_000, 2))
    b = rng.standard_normal((1_000_000, 2)) + 1.0
    oracle = analytic_l1(1.0)
    assert abs(oracle - 2 * (2 * stats.norm.cdf(0.5) - 1)) < 1e-8
    assert abs(drift_estimate(a, b).value - oracle) <= 0.1 * oracle


def test_bp_baseline(toy):
    net, train, val = toy
    model = profile_network(net, "bp").models[0]
    params_bytes = 4 * 2 * sum(p.size for lp in init_parameters(net, 0, "bp") for p in lp.unit_list() + lp.head_list())
    tight = model.predict(1) + 0.5 * model.slope
    assert bp_feasible_batch(model, tight, 512) == 1
    result = train_bp_baseline(net, train, tight, 512, TrainSettings(epochs=1), val=val, model=model)
    assert result.plan.blocks[0].batch_size == 1
    assert result.metrics.max_peak_bytes <= tight
    assert result.metrics.max_peak_bytes > params_bytes
    with pytest.raises(PlanningError):
        train_bp_baseline(net, train, model.predict(1) - 1, 512, model=model)


def test_bp_batch_below_neuroflux_later_blocks(toy):
    net, train, _ = toy
    budget = profile_network(net, "bp").models[0].predict(4)
    plan_batches = [b.batch_size for b in train_neuroflux(net, train, budget, 512, TrainSettings(epochs=1)).plan.blocks]
    assert bp_feasible_batch(profile_network(net, "bp").models[0], budget, 512) < max(plan_batches[1:])


def test_classic_baseline_costs_more(toy):
    net, train, val = toy
    aan = profile_network(net, "aan").models
    budget = profile_network(net, "classic").models[0].predict(4)
    settings = TrainSettings(epochs=1)
    nf = train_neuroflux(net, train, budget, 512, settings, val=val, models=aan)
    classic = train_classic_ll_baseline(net, train, budget, 512, settings, val=val)
    assert len(nf.plan.blocks) >= 2
    assert len({b.batch_size for b in classic.metrics.blocks}) == 1
    assert classic.metrics.total_forward_evaluations > nf.metrics.total_forward_evaluations
    assert classic.metrics.total_sgd_steps > nf.metrics.total_sgd_steps
    assert all(b.peak_bytes <= budget for b in classic.metrics.blocks)


def test_metrics_json_round_trip(toy, tmp_path):
    net, train, val = toy
    result = run(net, train, val, epochs=1)
    result.metrics.save(tmp_path / "m.json", tmp_path / "t.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["total_sgd_steps"] == result.metrics.total_sgd_steps
    assert "wall_seconds" not in data and "wall_seconds" in json.loads((tmp_path / "t.json").read_text())
