import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irs_sensing import collab as CB
from irs_sensing.collab import ObservationTopology, TopologyError
from irs_sensing.neuralnet import LrSchedule, NetConfig, init_params

TINY = NetConfig(n_points=16, n_bands=4, shallow_filters=6)
SCHED = LrSchedule(0.05, 0.0, 100)


def _data(n_nodes, n=16, seed=0, cfg=TINY):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=(n, cfg.n_points, cfg.n_bands)),
             (rng.random((n, cfg.n_bands)) < 0.5).astype(np.int8)) for _ in range(n_nodes)]


def _nodes(masks, seed=0, n=16):
    topo = ObservationTopology(masks)
    return CB.init_nodes(TINY, topo, _data(topo.n_nodes, n, seed), seed)


def _scramble(nodes, seed=1):
    """Give every node its own parameter values so averaging has something to do."""
    rng = np.random.default_rng(seed)
    for nd in nodes:
        for _, blk in nd.params.blocks():
            for k in blk:
                blk[k] = blk[k] + rng.normal(size=blk[k].shape)
    return nodes


def _snapshot(nodes):
    return [nd.params.copy() for nd in nodes]


def _spec(masks, rounds=2, seed=3, n=24, epochs=1):
    topo = ObservationTopology(masks)
    J = topo.n_nodes
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(J * n, TINY.n_points, TINY.n_bands))
    y = (rng.random((J * n, TINY.n_bands)) < 0.5).astype(np.int8)
    su = np.repeat(np.arange(J), n)
    tc = CB.TrainingConfig(rounds=rounds, epochs=epochs, batch_size=8, eta0=0.05)
    return CB.RunSpec(TINY, tc, topo, x, y, su, x[: 4 * J], y[: 4 * J], su[: 4 * J], seed=seed)


# --- topology ---------------------------------------------------------------

@pytest.mark.parametrize("masks", [
    [[1, 0, 1, 0], [1, 0, 1, 0]],  # band 1 and 3 unobserved
    [[1, 1, 1, 1], [0, 0, 0, 0]],  # SU 1 sees nothing
    [[1, 2, 1, 1]],
    [],
])
def test_invalid_topologies_rejected(masks):
    with pytest.raises(TopologyError):
        ObservationTopology(masks)


def test_observers_lists_nodes_in_order():
    topo = ObservationTopology([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    assert topo.observers(0).tolist() == [0, 2]
    assert topo.observers(2).tolist() == [0, 1, 2]


@given(J=st.integers(2, 8), N=st.integers(2, 12), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_contiguous_windows_default_width_and_coverage(J, N, seed):
    width = math.ceil(N / 2)
    topo = ObservationTopology.contiguous_windows(J, N, np.random.default_rng(seed))
    for row in topo.masks:
        on = np.flatnonzero(row)
        assert len(on) == width and on[-1] - on[0] == width - 1
    assert topo.masks.sum(axis=0).min() >= 1


def test_contiguous_windows_are_seeded():
    a = ObservationTopology.contiguous_windows(4, 8, np.random.default_rng(5))
    b = ObservationTopology.contiguous_windows(4, 8, np.random.default_rng(5))
    assert np.array_equal(a.masks, b.masks)


def test_contiguous_windows_impossible_cover():
    with pytest.raises(TopologyError):
        ObservationTopology.contiguous_windows(1, 8, np.random.default_rng(0), width=3,
                                               max_tries=20)
    with pytest.raises(TopologyError):
        ObservationTopology.contiguous_windows(2, 8, np.random.default_rng(0), width=9)


# --- node initialisation ----------------------------------------------------

def test_init_nodes_reproducible_and_identical_across_nodes():
    masks = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1], [1, 0, 0, 1]]
    a, b = _nodes(masks, seed=11), _nodes(masks, seed=11)
    for na, nb in zip(a, b):
        assert na.params.equals(nb.params)
        assert np.array_equal(na.mask, nb.mask)
    assert all(a[0].params.equals(nd.params) for nd in a[1:])
    # separate streams per node, but reproducible
    draws = [nd.rng.random() for nd in a]
    assert len(set(draws)) == len(draws)
    assert draws == [nd.rng.random() for nd in b]


def test_init_nodes_rejects_bad_input():
    with pytest.raises(TopologyError):
        CB.init_nodes(TINY, [[1, 1, 0, 0]], _data(1), 0)
    with pytest.raises(TopologyError):
        CB.init_nodes(TINY, ObservationTopology.full(3, 4), _data(2), 0)


# --- local training ---------------------------------------------------------

def test_zero_epochs_leave_params_unchanged():
    nd = _nodes([[1, 1, 1, 1]])[0]
    before = nd.params.copy()
    loss = CB.local_train(nd, SCHED, epochs=0)
    assert math.isnan(loss)
    assert nd.params.equals(before) and nd.iteration == 0


def test_unobserved_band_deep_block_untouched_by_local_training():
    nd = _nodes([[1, 0, 1, 1], [1, 1, 1, 1]])[0]
    before = nd.params.copy()
    CB.local_train(nd, SCHED, epochs=2, batch_size=4)
    for k, v in before.deep[1].items():
        assert np.array_equal(nd.params.deep[1][k], v), k
    assert any(not np.array_equal(nd.params.deep[0][k], v) for k, v in before.deep[0].items())
    assert any(not np.array_equal(nd.params.shallow[k], v) for k, v in before.shallow.items())
    assert nd.iteration == 2 * 4


def test_local_train_needs_data():
    nd = _nodes([[1, 1, 1, 1]])[0]
    nd.x, nd.y = nd.x[:0], nd.y[:0]
    with pytest.raises(ValueError):
        CB.local_train(nd, SCHED)


def test_local_train_order_of_nodes_does_not_matter():
    masks = [[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0]]
    fwd, rev = _nodes(masks, seed=4), _nodes(masks, seed=4)
    for nd in fwd:
        CB.local_train(nd, SCHED, batch_size=4)
    for nd in reversed(rev):
        CB.local_train(nd, SCHED, batch_size=4)
    assert all(a.params.equals(b.params) for a, b in zip(fwd, rev))


@pytest.mark.slow
def test_loss_falls_over_two_hundred_iterations_at_minus_ten_db():
    from irs_sensing.config import DESK_SCALE, config_from_dict
    from irs_sensing.experiment import build_dataset

    cfg = config_from_dict({}, desk_scale=True)
    ds = build_dataset(cfg, 0, -10.0, True)
    x, y = ds.features("train", np.float64)[:1600], ds.train_labels[:1600]
    net = cfg.net_config()
    nd = CB.init_nodes(net, ObservationTopology.full(1, net.n_bands), [(x, y)], 0)[0]
    trace = []
    CB.local_train(nd, LrSchedule(DESK_SCALE["training"]["eta0"], 0.0, 200), epochs=4, trace=trace)
    assert len(trace) == 200
    ma = np.convolve(trace, np.ones(20) / 20, mode="valid")
    # first window, middle window, last window
    assert ma[-1] < ma[90] < ma[0], (ma[0], ma[90], ma[-1])


# --- averaging algebra ------------------------------------------------------

def test_identical_nodes_average_to_themselves_bitwise():
    nodes = _nodes([[1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 1, 0]])
    before = nodes[0].params.copy()
    CB.average_shallow(nodes)
    CB.average_deep(nodes, ObservationTopology([nd.mask for nd in nodes]))
    assert all(nd.params.equals(before) for nd in nodes)


def test_opposite_weights_average_to_zero():
    nodes = _scramble(_nodes([[1, 1, 1, 1]] * 2))
    for k in nodes[0].params.shallow:
        nodes[1].params.shallow[k] = -nodes[0].params.shallow[k]
    avg = CB.average_shallow(nodes)
    for v in avg.values():
        assert np.all(v == 0)


def test_average_of_one_two_three_is_two():
    nodes = _nodes([[1, 1, 1, 1]] * 3)
    for c, nd in zip((1.0, 2.0, 3.0), nodes):
        for k in nd.params.shallow:
            nd.params.shallow[k] = np.full_like(nd.params.shallow[k], c)
    CB.average_shallow(nodes)
    for nd in nodes:
        for v in nd.params.shallow.values():
            assert np.all(v == 2.0)


def test_shallow_average_covers_running_statistics():
    nodes = _scramble(_nodes([[1, 1, 1, 1]] * 2))
    key = next(k for k in nodes[0].params.shallow if k.endswith(".var"))
    a, b = (nd.params.shallow[key].copy() for nd in nodes)
    CB.average_shallow(nodes)
    assert np.allclose(nodes[1].params.shallow[key], (a + b) / 2, rtol=0, atol=1e-15)


def test_shallow_average_rejects_mismatched_shapes():
    nodes = _nodes([[1, 1, 1, 1]] * 2)
    k = next(iter(nodes[1].params.shallow))
    nodes[1].params.shallow[k] = nodes[1].params.shallow[k][..., :1]
    with pytest.raises(ValueError):
        CB.average_shallow(nodes)
    with pytest.raises(ValueError):
        CB.average_shallow([])


def test_single_observer_block_copied_to_everyone():
    masks = [[1, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 0]]
    nodes = _scramble(_nodes(masks))
    owner = {k: v.copy() for k, v in nodes[1].params.deep[3].items()}
    CB.average_deep(nodes, ObservationTopology(masks))
    for nd in nodes:
        for k, v in owner.items():
            assert np.array_equal(nd.params.deep[3][k], v)


def test_band_average_ignores_non_observer():
    masks = [[1, 1, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]]
    nodes = _scramble(_nodes(masks))
    a = {k: v.copy() for k, v in nodes[0].params.deep[0].items()}
    b = {k: v.copy() for k, v in nodes[2].params.deep[0].items()}
    results = []
    for junk in (0.0, 1e6):
        for k in nodes[1].params.deep[0]:
            nodes[1].params.deep[0][k] = np.full_like(a[k], junk)
        for i in (0, 2):
            nodes[i].params.deep[0] = {k: v.copy() for k, v in (a if i == 0 else b).items()}
        results.append(CB.average_deep(nodes, ObservationTopology(masks))[0])
    for k in a:
        assert np.allclose(results[0][k], (a[k] + b[k]) / 2, rtol=0, atol=1e-15)
        assert np.array_equal(results[0][k], results[1][k])


def test_full_observation_band_average_equals_global_average():
    masks = [[1, 1, 1, 1]] * 3
    n1, n2 = _scramble(_nodes(masks)), _scramble(_nodes(masks))
    CB.average_shallow(n1)
    CB.average_deep(n1, ObservationTopology(masks))
    CB.average_all(n2)
    assert all(a.params.equals(b.params) for a, b in zip(n1, n2))


def _masks_strategy():
    return st.integers(2, 5).flatmap(lambda J: st.lists(
        st.lists(st.integers(0, 1), min_size=4, max_size=4), min_size=J, max_size=J)).filter(
        lambda m: all(any(r) for r in m) and all(any(c) for c in zip(*m)))


def _avg(nodes, topo):
    CB.average_shallow(nodes)
    CB.average_deep(nodes, topo)


@given(masks=_masks_strategy(), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_averaging_is_idempotent(masks, seed):
    topo = ObservationTopology(masks)
    nodes = _scramble(_nodes(masks, n=2), seed)
    _avg(nodes, topo)
    once = _snapshot(nodes)
    _avg(nodes, topo)
    assert all(nd.params.equals(p) for nd, p in zip(nodes, once))


@given(masks=_masks_strategy(), seed=st.integers(0, 1000), perm_seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_averaging_is_permutation_invariant(masks, seed, perm_seed):
    nodes = _scramble(_nodes(masks, n=2), seed)
    perm = np.random.default_rng(perm_seed).permutation(len(nodes))
    shuffled = [nodes[i] for i in perm]
    copies = [CB.NodeState(nd.index, nd.params.copy(), nd.x, nd.y, nd.mask, nd.rng)
              for nd in shuffled]
    _avg(nodes, ObservationTopology(masks))
    _avg(copies, ObservationTopology([masks[i] for i in perm]))
    assert all(a.params.equals(copies[0].params) for a in nodes)


@given(masks=_masks_strategy(), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_averaging_conserves_the_mean(masks, seed):
    topo = ObservationTopology(masks)
    nodes = _scramble(_nodes(masks, n=2), seed)
    shallow_before = {k: CB.node_mean([nd.params.shallow[k] for nd in nodes])
                      for k in nodes[0].params.shallow}
    deep_before = [{k: CB.node_mean([nodes[j].params.deep[n][k] for j in topo.observers(n)])
                    for k in nodes[0].params.deep[n]} for n in range(topo.n_bands)]
    _avg(nodes, topo)
    for k, v in shallow_before.items():
        assert np.array_equal(CB.node_mean([nd.params.shallow[k] for nd in nodes]), v)
    for n in range(topo.n_bands):
        for k, v in deep_before[n].items():
            after = CB.node_mean([nodes[j].params.deep[n][k] for j in topo.observers(n)])
            assert np.array_equal(after, v)


@given(vals=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=9))
def test_node_mean_matches_fsum_and_is_exact_for_repeats(vals):
    arrs = [np.array([v]) for v in vals]
    assert CB.node_mean(arrs)[0] == pytest.approx(math.fsum(vals) / len(vals), rel=1e-12, abs=1e-6)
    assert CB.node_mean([arrs[0]] * len(vals))[0] == vals[0]


# --- full runs --------------------------------------------------------------

def test_full_observation_decoupled_round_equals_fedavg_round_bitwise():
    spec = _spec([[1, 1, 1, 1]] * 3, rounds=2)
    dec, hd = CB.run_decoupled(spec)
    fed, hf = CB.run_fedavg(spec)
    assert all(a.params.equals(b.params) for a, b in zip(dec, fed))
    assert [r["loss"] for r in hd.records] == [r["loss"] for r in hf.records]


def test_fedavg_first_round_shrinks_deep_drift_by_observer_fraction():
    masks = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1], [1, 1, 1, 1]]
    spec = _spec(masks, rounds=1)
    init = init_params(TINY, CB.spawn_streams(spec.seed, 4)[0])
    dec, _ = CB.run_decoupled(spec)
    fed, _ = CB.run_fedavg(spec)
    topo = spec.topology
    for n in range(topo.n_bands):
        frac = len(topo.observers(n)) / topo.n_nodes
        for k, w0 in init.deep[n].items():
            d_dec = dec[0].params.deep[n][k] - w0
            d_fed = fed[0].params.deep[n][k] - w0
            assert np.allclose(d_fed, frac * d_dec, rtol=1e-9, atol=1e-12), (n, k)
        if frac < 1:
            w = "fc.w"
            assert (np.linalg.norm(fed[0].params.deep[n][w] - init.deep[n][w])
                    < np.linalg.norm(dec[0].params.deep[n][w] - init.deep[n][w]))


def test_single_node_schemes_collapse():
    spec = _spec([[1, 1, 1, 1]], rounds=2)
    dec, hd = CB.run_decoupled(spec)
    fed, hf = CB.run_fedavg(spec)
    solo, hs = CB.run_standalone(spec)
    assert dec[0].params.equals(fed[0].params) and dec[0].params.equals(solo)
    strip = [{k: v for k, v in e.items() if k != "bytes_exchanged"} for e in hd.evaluations]
    assert strip == [{k: v for k, v in e.items() if k != "bytes_exchanged"}
                     for e in hs.evaluations]


def test_zero_rounds_return_initial_state():
    spec = _spec([[1, 1, 0, 0], [0, 0, 1, 1]], rounds=0)
    nodes, hist = CB.run_decoupled(spec)
    init = init_params(TINY, CB.spawn_streams(spec.seed, 2)[0])
    assert all(nd.params.equals(init) for nd in nodes)
    assert hist.records == [] and hist.evaluations == []


def test_history_records_and_csv(tmp_path):
    spec = _spec([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]], rounds=3)
    _, hist = CB.run_decoupled(spec)
    assert len(hist.records) == 9 and len(hist.evaluations) == 3
    assert [(r["round"], r["node"]) for r in hist.records[:4]] == [(1, 0), (1, 1), (1, 2), (2, 0)]
    path = tmp_path / "h.csv"
    hist.to_csv(path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["round", "node", "scheme", "loss", "accuracy", "bytes_exchanged"]
    assert len(rows) == 10 and all(r[2] == "decoupled" for r in rows[1:])


def test_unknown_scheme_rejected():
    with pytest.raises(ValueError):
        CB._run_collaborative(_spec([[1, 1, 1, 1]], rounds=1), "gossip")


# --- communication accounting ------------------------------------------------

def test_bytes_per_round():
    masks = [[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]]
    topo = ObservationTopology(masks)
    p = init_params(TINY, np.random.default_rng(0))
    shallow = sum(v.nbytes for v in p.shallow.values())
    deep = sum(v.nbytes for v in p.deep[0].values())
    assert CB.bytes_per_round("decoupled", p, topo) == 3 * shallow + 7 * deep
    assert CB.bytes_per_round("fedavg", p, topo) == 3 * (shallow + 4 * deep)
    assert CB.bytes_per_round("standalone", p, topo) == 0
    full = ObservationTopology.full(3, 4)
    assert CB.bytes_per_round("decoupled", p, full) == CB.bytes_per_round("fedavg", p, full)


# --- evaluation & config ----------------------------------------------------

def test_evaluate_restricts_to_mask_and_is_consistent():
    spec = _spec([[1, 1, 1, 1]], rounds=1)
    nodes, _ = CB.run_decoupled(spec)
    full = CB.evaluate(nodes[0].params, spec.test_x, spec.test_y)
    part = CB.evaluate(nodes[0].params, spec.test_x, spec.test_y, mask=[1, 0, 0, 0])
    dec = (full["probs"] >= 0.5).astype(int)
    y = spec.test_y
    assert full["accuracy"] == pytest.approx(np.mean(dec == y))
    assert part["accuracy"] == pytest.approx(np.mean(dec[:, 0] == y[:, 0]))
    p1 = y.mean()
    assert full["accuracy"] == pytest.approx(full["pd"] * p1 + (1 - full["pfa"]) * (1 - p1))


@pytest.mark.parametrize("kw", [dict(rounds=-1), dict(epochs=-1), dict(batch_size=0),
                                dict(eta0=-0.1), dict(eta0=0.01, eta_min=0.1)])
def test_training_config_validation(kw):
    with pytest.raises(ValueError):
        CB.TrainingConfig(**kw)


def test_schedule_spans_all_local_iterations():
    tc = CB.TrainingConfig(rounds=4, epochs=2, batch_size=32)
    assert tc.iterations_per_epoch(100) == 4
    assert tc.schedule(100).t_max == 32


# --- changing the node set ---------------------------------------------------

def test_regroup_carries_shared_model_to_new_node_set():
    spec = _spec([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]], rounds=1)
    nodes, hist = CB.run_decoupled(spec)
    shared = nodes[0].params.copy()
    # SU 2 leaves, a new SU with a different window joins
    masks = [[1, 1, 0, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
    data = [(nodes[0].x, nodes[0].y), (nodes[1].x, nodes[1].y), _data(1, 24, 9)[0]]
    fresh = CB.regroup(nodes, masks, data, seed=5)
    assert all(nd.params.equals(shared) and nd.iteration == 0 for nd in fresh)
    assert [nd.mask.tolist() for nd in fresh] == masks
    tc = CB.TrainingConfig(rounds=2, batch_size=8, eta0=0.05)
    CB.run_rounds(fresh, ObservationTopology(masks), tc, "decoupled", spec.test_x,
                  spec.test_y, spec.test_su % 3, history=hist, first_round=2)
    assert [e["round"] for e in hist.evaluations] == [1, 2, 3]
    assert not fresh[0].params.equals(shared)


def test_regroup_checks_data_count():
    nodes = _nodes([[1, 1, 1, 1]] * 2)
    with pytest.raises(TopologyError):
        CB.regroup(nodes, [[1, 1, 1, 1]] * 3, _data(2), 0)
