"""Graph builders: network planning, the three schemes, data feeding."""

import numpy as np
import pytest

from biflow.builders import (
    LayerSpec,
    Layout,
    NetSpec,
    ParallelPlan,
    Stage,
    SyntheticFeed,
    build_data_parallel,
    build_model_parallel_pipeline,
    build_sgd_iteration,
    feeder,
    fill_tokens,
    init_params,
    param_names,
    plan_steps,
)
from biflow.costsim import CostModel, simulate
from biflow.dispatcher import WorkerLane, merged_trace, run_sequence
from biflow.graph import GraphError, Location
from biflow.ops import TensorStore, fc_forward

MLP = NetSpec(
    input_shape=(20,),
    layers=(LayerSpec("fc", 16), LayerSpec("relu"), LayerSpec("fc", 4)),
    batch=8,
    lr=0.05,
)

TWO_FC = NetSpec(
    input_shape=(8,), layers=(LayerSpec("fc", 8), LayerSpec("fc", 4)), batch=4
)


def run_training(seq, net, feed, seed, iterations, **kw):
    store = TensorStore()
    init_params(net, store, seed, seq.layout)
    losses = []

    def after(rep, store):
        if rep.graph_index == 0 and seq.layout.loss_names:
            vals = [float(store.array(n)[0]) for n in seq.layout.loss_names]
            losses.append(sum(vals) / len(vals))

    run_sequence(
        seq,
        store,
        before_iteration=feeder(feed, seq.layout),
        after_graph=after,
        iterations=iterations,
        **kw,
    )
    return store, losses


# ---------------------------------------------------------------------------
# network planning


def test_plan_steps_shapes_mlp():
    kinds = [(s.kind, s.out_shape) for s in plan_steps(MLP)]
    assert kinds == [("fc", (8, 16)), ("relu", (8, 16)), ("fc", (8, 4))]


def test_plan_inserts_flatten_between_conv_and_fc():
    net = NetSpec(
        input_shape=(1, 6, 6),
        layers=(LayerSpec("conv", out=2, kernel=3), LayerSpec("fc", 4)),
        batch=2,
    )
    steps = plan_steps(net)
    assert [s.kind for s in steps] == ["conv", "flatten", "fc"]
    assert steps[0].out_shape == (2, 2, 4, 4)
    assert steps[1].out_shape == (2, 32)


def test_plan_rejects_conv_on_flat_input():
    with pytest.raises(GraphError):
        NetSpec(input_shape=(20,), layers=(LayerSpec("conv", out=2, kernel=3),))


def test_plan_rejects_fractional_conv_output():
    with pytest.raises(GraphError):
        NetSpec(
            input_shape=(1, 5, 5),
            layers=(LayerSpec("conv", out=2, kernel=2, stride=2),),
        )


def test_param_names_skip_relu_positions():
    assert [n for n, _ in param_names(MLP)] == ["w1", "b1", "w3", "b3"]


# ---------------------------------------------------------------------------
# single-scheme graphs


def test_two_layer_training_graph_has_nine_operators():
    seq = build_sgd_iteration(TWO_FC)
    train, swaps = seq.graphs
    assert len(train.operators) == 9  # 2 fwd + loss + 2 bwd + 4 updates
    assert len(swaps.operators) == 4
    assert all(op.kind == "swap" for op in swaps.operators.values())


def test_training_matches_reference_numpy_loop():
    seq = build_sgd_iteration(MLP)
    feed = SyntheticFeed.for_net(MLP, 31)
    store, losses = run_training(seq, MLP, feed, 31, 50)

    # independent numpy re-derivation of the same schedule
    from biflow.builders import _param_array

    p = dict(param_names(MLP))
    w1 = _param_array("w1", p["w1"], 31)
    b1 = _param_array("b1", p["b1"], 31)
    w3 = _param_array("w3", p["w3"], 31)
    b3 = _param_array("b3", p["b3"], 31)
    lr = np.float32(MLP.lr)
    ref_losses = []
    for it in range(50):
        x, lab = feed.batch_for(it, 0)
        idx = lab.astype(np.int64)
        a1 = x @ w1 + b1
        r = np.maximum(a1, np.float32(0))
        logits = r @ w3 + b3
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        denom = e.sum(axis=1, keepdims=True)
        ref_losses.append(
            float(-(z[np.arange(8), idx] - np.log(denom[:, 0])).mean())
        )
        d = e / denom
        d[np.arange(8), idx] -= np.float32(1)
        d = d / np.float32(8)
        dw3, db3 = r.T @ d, d.sum(axis=0)
        dr = d @ w3.T
        da1 = dr * (a1 > 0)
        dw1, db1 = x.T @ da1, da1.sum(axis=0)
        w1, b1 = w1 - lr * dw1, b1 - lr * db1
        w3, b3 = w3 - lr * dw3, b3 - lr * db3
    for name, ref in (("w1", w1), ("b1", b1), ("w3", w3), ("b3", b3)):
        got = store.array(name)
        assert np.allclose(got, ref, rtol=1e-4, atol=1e-6), name
    assert np.allclose(losses, ref_losses, rtol=1e-4, atol=1e-6)
    assert losses[-1] < losses[0]


def test_zero_delay_rerun_is_deterministic():
    seq = build_sgd_iteration(MLP)
    feed = SyntheticFeed.for_net(MLP, 9)
    s1, l1 = run_training(seq, MLP, feed, 9, 20)
    s2, l2 = run_training(seq, MLP, feed, 9, 20)
    assert l1 == l2
    for name in seq.layout.canonical_params:
        assert np.array_equal(s1.array(name), s2.array(name))


# ---------------------------------------------------------------------------
# data parallelism


def peers_plan(n, base=1):
    return ParallelPlan(
        scheme="data",
        peers=tuple(Location("local", k) for k in range(n)),
        server=Location("local", n),
        copy_thread_base=base,
    )


def test_one_peer_matches_plain_sgd_bitwise():
    feed = SyntheticFeed.for_net(MLP, 11)
    plain = build_sgd_iteration(MLP)
    s1, l1 = run_training(plain, MLP, feed, 11, 25)
    dp = build_data_parallel(MLP, peers_plan(1))
    s2, l2 = run_training(dp, MLP, feed, 11, 25)
    assert l1 == l2
    for name in plain.layout.canonical_params:
        assert np.array_equal(s1.array(name), s2.array(name))
        assert np.array_equal(s1.array(name), s2.array(name + "_p0"))


def test_two_peers_match_double_batch(rel=1e-5):
    feed2 = SyntheticFeed.for_net(MLP, 13, peers=2)
    dp = build_data_parallel(MLP, peers_plan(2))
    s_dp, _ = run_training(dp, MLP, feed2, 13, 25)

    big = NetSpec(MLP.input_shape, MLP.layers, batch=16, lr=MLP.lr)
    feed1 = SyntheticFeed.for_net(big, 13)
    assert np.array_equal(feed2.full_batch(0)[0], feed1.full_batch(0)[0])
    plain = build_sgd_iteration(big)
    s_big, _ = run_training(plain, big, feed1, 13, 25)
    for name in plain.layout.canonical_params:
        a, b = s_dp.array(name), s_big.array(name)
        assert np.abs(a - b).max() <= rel * max(np.abs(b).max(), 1e-12), name


def test_split_backward_uploads_overlap_lower_layers():
    """With per-layer gradient operators, the top layer's upload must start
    before the bottom layer's backward finishes."""
    net = NetSpec(
        input_shape=(12,),
        layers=(LayerSpec("fc", 12), LayerSpec("fc", 12), LayerSpec("fc", 4)),
        batch=4,
    )
    seq = build_data_parallel(net, peers_plan(1), split_backward=True)
    for op in seq.graphs[0].operators.values():
        if op.name.startswith("bwd_"):
            op.attrs["delay_s"] = 0.01
        elif op.name.startswith("up_"):
            op.attrs["delay_s"] = 0.008
    store = TensorStore()
    init_params(net, store, 3, seq.layout)
    feed = SyntheticFeed.for_net(net, 3)
    reports = run_sequence(
        seq, store, before_iteration=feeder(feed, seq.layout), iterations=1
    )
    recs = {r.name: r for r in merged_trace(reports)}
    first_up = recs["up_dw3_p0"]
    last_bwd = recs["bwd_fc1_p0_weight"]
    assert first_up.start < last_bwd.end


def test_split_backward_omits_bottom_data_gradient():
    seq = build_data_parallel(TWO_FC, peers_plan(1), split_backward=True)
    names = {op.name for op in seq.graphs[0].operators.values()}
    assert "bwd_fc2_p0_data" in names
    assert "bwd_fc1_p0_data" not in names


def test_aggregate_inputs_follow_peer_rank_order():
    seq = build_data_parallel(TWO_FC, peers_plan(3))
    g = seq.graphs[0]
    agg = g.operator_named("agg_w1")
    names = [g.tensors[t].name for t in agg.inputs]
    assert names == ["dw1_p0_srv", "dw1_p1_srv", "dw1_p2_srv"]


def test_copy_lanes_are_distinct_from_compute():
    seq = build_data_parallel(TWO_FC, peers_plan(2, base=1))
    layout = seq.layout
    g = seq.graphs[0]
    assert layout.copy_threads == frozenset({1, 2, 3, 4, 5})
    for op in g.operators.values():
        if op.name.startswith(("up_", "down_")):
            assert op.thread in layout.copy_threads
        elif op.kind not in ("aggregate", "sgd_update"):
            assert op.thread == 0
    lane = WorkerLane("local", 0, 0)
    assert layout.lane_class(lane) == "compute"
    assert layout.lane_class(WorkerLane("local", 0, 1)) == "copy"
    assert layout.lane_class(WorkerLane("local", 0, 99)) == "transport"


def test_data_scheme_requires_server():
    with pytest.raises(GraphError):
        ParallelPlan(scheme="data", peers=(Location("local", 0),))


# ---------------------------------------------------------------------------
# pipeline


PIPE_NET = NetSpec(
    input_shape=(8,),
    layers=(LayerSpec("fc", 8), LayerSpec("fc", 8), LayerSpec("fc", 4)),
    batch=4,
)


def pipe_plan(replicas=3):
    return ParallelPlan(
        scheme="model",
        stages=(
            Stage((0, 1), Location("local", 0)),
            Stage((1, 2), Location("local", 1)),
            Stage((2, 3), Location("local", 2)),
        ),
        replicas=replicas,
    )


def run_pipeline(seq, net, seed, xs):
    store = TensorStore()
    init_params(net, store, seed, seq.layout)
    fill_tokens(store, seq)
    for r, x in enumerate(xs):
        store.set(f"x_r{r}", x)
    run_sequence(seq, store)
    return store


def test_pipeline_outputs_match_unpipelined_forward_bitwise():
    seq = build_model_parallel_pipeline(PIPE_NET, pipe_plan())
    rng = np.random.default_rng(21)
    xs = [rng.standard_normal((4, 8)).astype(np.float32) for _ in range(3)]
    store = run_pipeline(seq, PIPE_NET, 21, xs)
    params = {n: store.array(n) for n in seq.layout.canonical_params}
    for r, x in enumerate(xs):
        ref = x
        for j in (1, 2, 3):
            ref = fc_forward(ref, params[f"w{j}"], params[f"b{j}"])
        assert np.array_equal(store.array(seq.layout.output_names[r]), ref)


def test_pipeline_equal_stage_costs_make_staircase_makespan():
    # S stages, R replicas, each stage costing t: (S + R - 1) * t
    seq = build_model_parallel_pipeline(PIPE_NET, pipe_plan())
    for op in seq.graphs[0].operators.values():
        if op.kind == "fc_forward":
            op.attrs["delay_s"] = 1.0
    rep = simulate(seq, CostModel(kind_costs={}))
    assert rep.makespan == 5.0


def test_pipeline_gates_serialize_each_stage_across_replicas():
    seq = build_model_parallel_pipeline(PIPE_NET, pipe_plan())
    for op in seq.graphs[0].operators.values():
        if op.kind == "fc_forward":
            op.attrs["delay_s"] = 1.0
    rep = simulate(seq, CostModel(kind_costs={}))
    windows = {}
    for r in rep.trace:
        if r.name.startswith("fc"):
            windows[r.name] = (r.start, r.end)
    for stage_pos in (1, 2, 3):
        for r in (1, 2):
            prev_end = windows[f"fc{stage_pos}_r{r - 1}"][1]
            assert windows[f"fc{stage_pos}_r{r}"][0] >= prev_end


def test_pipeline_degenerate_single_stage_single_replica():
    plan = ParallelPlan(
        scheme="model", stages=(Stage((0, 3), Location("local", 0)),), replicas=1
    )
    seq = build_model_parallel_pipeline(PIPE_NET, plan)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    store = run_pipeline(seq, PIPE_NET, 4, [x])
    ref = x
    for j in (1, 2, 3):
        ref = fc_forward(ref, store.array(f"w{j}"), store.array(f"b{j}"))
    assert np.array_equal(store.array(seq.layout.output_names[0]), ref)


def test_pipeline_rejects_gappy_stages():
    plan = ParallelPlan(
        scheme="model",
        stages=(Stage((0, 1), Location("local", 0)), Stage((2, 3), Location("local", 1))),
        replicas=2,
    )
    with pytest.raises(GraphError):
        build_model_parallel_pipeline(PIPE_NET, plan)


def test_built_sequences_validate():
    for seq in (
        build_sgd_iteration(MLP),
        build_data_parallel(MLP, peers_plan(2), split_backward=True),
        build_model_parallel_pipeline(PIPE_NET, pipe_plan()),
    ):
        for g in seq.graphs:
            report = g.validate()
            assert report.ok, report.violations


# ---------------------------------------------------------------------------
# initialization and synthetic data


def test_init_params_deterministic_and_replicated():
    seq = build_data_parallel(MLP, peers_plan(2))
    s1, s2 = TensorStore(), TensorStore()
    init_params(MLP, s1, 7, seq.layout)
    init_params(MLP, s2, 7, seq.layout)
    for name in seq.layout.canonical_params:
        assert np.array_equal(s1.array(name), s2.array(name))
        for k in range(2):
            assert np.array_equal(s1.array(name), s1.array(f"{name}_p{k}"))
    s3 = TensorStore()
    init_params(MLP, s3, 8, seq.layout)
    assert not np.array_equal(s1.array("w1"), s3.array("w1"))


def test_biases_start_at_zero():
    seq = build_sgd_iteration(MLP)
    store = TensorStore()
    init_params(MLP, store, 1, seq.layout)
    assert not store.array("b1").any()
    assert store.array("w1").std() > 0


def test_feed_peer_slices_concatenate_to_full_batch():
    feed = SyntheticFeed(seed=3, input_shape=(6,), classes=3, batch=5, peers=3)
    x, labels = feed.full_batch(7)
    assert x.shape == (15, 6) and x.dtype == np.float32
    assert set(np.unique(labels)) <= {0.0, 1.0, 2.0}
    xs, ls = zip(*(feed.batch_for(7, r) for r in range(3)))
    assert np.array_equal(np.concatenate(xs), x)
    assert np.array_equal(np.concatenate(ls), labels)


def test_feed_varies_by_iteration_not_by_call():
    feed = SyntheticFeed(seed=3, input_shape=(6,), classes=3, batch=5)
    a, _ = feed.full_batch(0)
    b, _ = feed.full_batch(1)
    assert not np.array_equal(a, b)
    again, _ = feed.full_batch(0)
    assert np.array_equal(a, again)
    ev, el = feed.eval_batch(32)
    assert ev.shape == (32, 6) and el.shape == (32,)


def test_feeder_respects_only_filter():
    seq = build_data_parallel(MLP, peers_plan(2))
    feed = SyntheticFeed.for_net(MLP, 5, peers=2)
    store = TensorStore()
    feeder(feed, seq.layout, only={"x_p1"})(0, store)
    assert "x_p1" in store and "labels_p1" in store
    assert "x_p0" not in store
