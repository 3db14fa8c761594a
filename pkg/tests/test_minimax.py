import math

import numpy as np
import pytest

from support import synthetic_cfg, synthetic_setup
from snnprune.checkpoint import load_checkpoint
from snnprune.minimax import (
    BudgetSchedule,
    CompressionRun,
    NumericError,
    PruningState,
    dual_ascent_y,
    dual_ascent_z,
    finetune_epochs,
    minimax_step,
    network_from_checkpoint,
    run_compression,
    schedule_advance,
    snap_to_budget,
    train_baseline,
)
from snnprune.optim import Adam
from snnprune.resource import build_resource_model, measured_resource
from snnprune.snn import build_network, one_hot
from snnprune.sparsity import DomainError, count_zeros, flatten, structured_flatview


def test_dual_updates():
    assert dual_ascent_y(0.1, 0.1, 5.0) == pytest.approx(0.6)
    assert dual_ascent_z(0.0, 1e5, -0.1) == 0.0
    assert dual_ascent_z(2.0, 1.0, 0.5) == 2.5


def test_schedule_advance():
    sched = BudgetSchedule([0.25, 0.1], total_epochs=10)
    assert schedule_advance(sched, 0.5).kind == "pruning"
    assert schedule_advance(sched, 0.24) == ("finetune", 0.25)
    sched.complete()
    assert sched.budgets == [0.1]
    assert schedule_advance(BudgetSchedule([], 10), 0.5).kind == "done"


@pytest.mark.parametrize("budgets", [[0.1, 0.25], [0.5, 0.5], [1.0], [0.0]])
def test_schedule_rejects_bad_budgets(budgets):
    with pytest.raises(ValueError):
        BudgetSchedule(budgets, 10)


def test_finetune_epochs():
    assert finetune_epochs(0, [0.25, 0.1], 300, 100) == 57
    assert finetune_epochs(1, [0.25, 0.1], 300, 157) == 143
    assert finetune_epochs(0, [0.05], 300, 120) == 180
    assert finetune_epochs(3, [0.25, 0.1], 300, 100, policy="fixed", fixed=7) == 7
    with pytest.raises(DomainError):
        finetune_epochs(2, [0.25, 0.1], 300, 100)


def test_weighted_finetune_totals_fit():
    budgets, total, used = [0.25, 0.1, 0.05, 0.01, 0.005], 300, 40
    spent = 0
    for i in range(len(budgets)):
        spent += finetune_epochs(i, budgets, total, used + spent)
    assert spent == total - used


def small_net(arch="fc:4-3", seed=0):
    return build_network(arch, np.random.default_rng(seed), timesteps=3,
                         prune_min_connections=0, init_gain=2.0)


def test_satisfied_constraints_leave_duals_quiet():
    net = small_net()
    w = net.layers[0].weight
    w[:, 2:] = 0.0                                   # 6 of 12 weights already zero
    x = np.random.default_rng(1).uniform(size=(8, 4))
    x[:, 2:] = 0.0                                   # zero input keeps those gradients at zero
    batch = (x, one_hot(np.arange(8) % 3, 3))
    rm = build_resource_model(net)
    state = PruningState.for_network(net, eta2=0.01, eta3=0.1, eta4=1.0)
    state.s, state.y, state.z = [5.5], [0.3], 1.0    # R = 1 - 5.5/12 < budget
    minimax_step(net, state, batch, rm, 0.6, Adam(net.tensors(), lr=1e-3))
    assert state.y == [0.3]
    assert state.z < 1.0
    assert not w[:, 2:].any()


def test_step_invariants_and_nonfinite():
    cfg, net, train, _ = synthetic_setup()
    rm = build_resource_model(net)
    state = PruningState.for_network(net, eta4=1e5)
    opt = Adam(net.tensors(), lr=1e-2)
    batch = (train.inputs[:100], one_hot(train.labels[:100], 4))
    ys, zs = [], []
    for _ in range(20):
        minimax_step(net, state, batch, rm, 0.25, opt)
        ys.append(state.y[0])
        zs.append(state.z)
        assert 0.0 <= state.s[0] <= rm.n
    assert all(b >= a for a, b in zip(ys, ys[1:])) and min(zs) >= 0
    net.layers[0].weight[0, 0] = np.nan
    with pytest.raises(NumericError):
        minimax_step(net, state, batch, rm, 0.25, opt)


def test_snap_properties():
    net = small_net("fc:6-5-3")
    before = flatten(net.layers).values.copy()
    state = PruningState.for_network(net)
    state.s = [13.4]
    rm = build_resource_model(net)
    masks = snap_to_budget(net, state, rm, 1 - 14 / 45)
    after = flatten(net.layers).values
    assert count_zeros(after, 0.0) >= 14
    kept = after != 0
    assert np.array_equal(after[kept], before[kept])
    assert measured_resource(rm, net) <= 1 - 14 / 45 + 1 / rm.n
    assert all(np.array_equal(m, (l.weight != 0)) for m, l in zip(masks, net.layers))


def test_structured_snap_zeroes_whole_columns():
    net = small_net("fc:6-5-3")
    state = PruningState.for_network(net, structured=True)
    state.s = [3.0]
    snap_to_budget(net, state)
    groups = structured_flatview(net.layers).values
    assert np.count_nonzero(groups == 0) == 3
    for layer in net.layers:
        cols = np.abs(layer.weight).sum(axis=0)
        assert all(not layer.weight[:, j].any() for j in np.flatnonzero(cols == 0))


def test_trace_invariants_and_budget_checkpoints(tmp_path):
    cfg, net, train, test = synthetic_setup()
    _, history, run = run_compression(cfg, net, train, test, out_dir=tmp_path)
    s, y, z = (np.array([t[i] for t in run.trace]) for i in (1, 2, 3))
    assert np.all(np.diff(y) >= 0) and np.all(z >= 0)
    assert np.all((s >= 0) & (s <= run.rm.n))
    assert sorted(run.checkpoints) == sorted(cfg.budgets)
    for budget, path in run.checkpoints.items():
        ck_net = network_from_checkpoint(load_checkpoint(path))
        for layer in ck_net.layers:
            layer.prunable = True
        got = measured_resource(run.rm, ck_net)
        assert budget - 1 / run.rm.n - 1e-12 <= got <= budget + 1 / run.rm.n
    assert history[-1]["acc"] >= 0.9


def test_single_budget_hits_target_sparsity():
    cfg, net, train, test = synthetic_setup(budgets=[0.25], total_epochs=12)
    net, _, run = run_compression(cfg, net, train, test)
    zeros = count_zeros(flatten(net.layers), 0.0) / run.rm.n
    assert abs(zeros - 0.75) <= 0.002


def test_zlr_ordering():
    reached = {}
    for eta4 in (1e3, 1e8):
        cfg, net, train, test = synthetic_setup(budgets=[0.25], eta4=eta4, total_epochs=15)
        _, _, run = run_compression(cfg, net, train, test)
        reached[eta4] = run.reached.get(0.25, math.inf)
    assert reached[1e8] < reached[1e3]


@pytest.mark.parametrize("budgets", [[], [0.25]])
def test_inactive_pruning_equals_plain_training(budgets):
    cfg = synthetic_cfg(budgets=budgets, eta2=0.0, eta3=0.0, eta4=0.0, epochs=2, total_epochs=2)
    _, net_a, train, test = synthetic_setup()
    _, net_b, _, _ = synthetic_setup()
    run_compression(cfg, net_a, train, test)
    train_baseline(cfg, net_b, train, test)
    for a, b in zip(net_a.tensors(), net_b.tensors()):
        assert np.array_equal(a, b)


def test_global_and_per_layer_agree_on_one_layer():
    runs = []
    for mode in ("global", "per-layer"):
        cfg, net, train, test = synthetic_setup(sparsity_mode=mode, prune_min_connections=2000,
                                                budgets=[0.25], total_epochs=8)
        _, _, run = run_compression(cfg, net, train, test)
        runs.append(run)
    a, b = runs
    assert len(a.state.groups) == len(b.state.groups) == 1
    assert np.allclose(np.array(a.trace), np.array(b.trace), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stop", [5, 10])   # mid pruning, mid fine-tune
def test_resume_matches_uninterrupted(tmp_path, stop):
    cfg, net, train, test = synthetic_setup(budgets=[0.5, 0.25], total_epochs=14, finetune_epochs=2)
    full = CompressionRun(cfg, net, train, test, out_dir=tmp_path / "full")
    full.run()

    _, net2, _, _ = synthetic_setup()
    part = CompressionRun(cfg, net2, train, test, out_dir=tmp_path / "part")
    for _ in range(stop):
        part.run_epoch()
    assert part.phase == ("prune" if stop == 5 else "finetune")
    part.writer.close()
    resumed = CompressionRun.resume(tmp_path / "part" / "last.ckpt", cfg, train, test,
                                    out_dir=tmp_path / "part")
    resumed.run()

    for a, b in zip(full.net.tensors(), resumed.net.tensors()):
        assert np.array_equal(a, b)
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()
