import copy

import numpy as np
import pytest

from fedkdx import federation as fed
from fedkdx.compression import CompressionPolicy, encode_packet, raw_packet
from fedkdx.federation import (
    STRATEGY_FEDAVG,
    STRATEGY_FEDKDX,
    STRATEGY_FEDPROX,
    ClientState,
    RoundError,
    ServerState,
    client_local_step_fedavg,
    client_local_step_fedkdx,
    derive_rng,
    derive_seed,
    evaluate,
    run_round,
    sample_clients,
    server_aggregate,
)
from fedkdx.linalg import finite_diff_grad, softmax_rows
from fedkdx.losses import LossConfig, ROLE_STUDENT, combined_loss
from fedkdx.nn import LayerParam, ModelParams, build_mlp, forward
from helpers import make_experiment, params_equal, rel_err


def tiny_client(seed=0, n=12, teacher_lr=0.05, student_lr=0.05, batch_size=4):
    rng = np.random.default_rng(seed)
    return ClientState(
        client_id=seed,
        teacher=build_mlp(4, 3, seed=100 + seed),
        student_view=build_mlp(4, 3, seed=999),
        x_train=rng.normal(size=(n, 4)),
        y_train=rng.integers(0, 3, size=n),
        rng=np.random.default_rng(1000 + seed),
        teacher_lr=teacher_lr,
        student_lr=student_lr,
        batch_size=batch_size,
    )


def loss_cfg(**kw):
    base = dict(tau=0.8, gamma=0.9, enable_nkd=True, enable_ctl=True,
                kd_weight=1.0, nkd_weight=1.0, ctl_weight=1.0)
    base.update(kw)
    return LossConfig(**base)


# --------------------------------------------------------------- rng streams

def test_derived_streams_are_stable_and_distinct():
    a = derive_rng(7, fed.STREAM_SAMPLER).normal(size=4)
    b = derive_rng(7, fed.STREAM_SAMPLER).normal(size=4)
    c = derive_rng(7, fed.STREAM_PARTITION).normal(size=4)
    d = derive_rng(8, fed.STREAM_SAMPLER).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert derive_seed(7, fed.STREAM_CLIENT, 3) == derive_seed(7, fed.STREAM_CLIENT, 3)
    assert derive_seed(7, fed.STREAM_CLIENT, 3) != derive_seed(7, fed.STREAM_CLIENT, 4)


# ------------------------------------------------------------------ sampling

def test_sample_size_rounds_half_up_with_a_floor_of_one():
    ids = list(range(8))
    rng = np.random.default_rng(0)
    assert len(sample_clients(ids, 0.2, rng)) == 2
    assert len(sample_clients(ids, 0.5, rng)) == 4
    assert len(sample_clients(ids, 0.8, rng)) == 6
    assert sample_clients(ids, 1.0, rng) == tuple(range(8))
    assert len(sample_clients(ids, 0.01, rng)) == 1


def test_sample_is_sorted_without_replacement():
    ids = [9, 3, 5, 1, 7]
    for seed in range(10):
        picked = sample_clients(ids, 0.6, np.random.default_rng(seed))
        assert list(picked) == sorted(set(picked))
        assert set(picked) <= set(ids)
    with pytest.raises(ValueError):
        sample_clients([], 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_clients(ids, 0.0, np.random.default_rng(0))


# ---------------------------------------------------------- distilling step

def test_single_batch_step_matches_hand_backprop():
    st = tiny_client(n=6, batch_size=6)  # one minibatch per epoch
    st_clone = copy.deepcopy(st)
    student = st.student_view.copy()
    cfg = loss_cfg()

    grad = client_local_step_fedkdx(st, student, cfg, batches=1)

    # replay: the student learns against the teacher outputs before the
    # teacher's own update, in evaluation mode
    idx = st_clone.rng.permutation(6)[:6]
    x, y = st_clone.x_train[idx], st_clone.y_train[idx]
    t_tr = forward(st_clone.teacher, x, "train")
    s_tr = forward(student, x, "eval")
    _, gl, gf = combined_loss(ROLE_STUDENT, s_tr.logits, t_tr.logits,
                              s_tr.features, t_tr.features, y, cfg)
    from fedkdx.nn import backward
    want = backward(student.params, s_tr, gl, gf)
    assert np.abs(grad.flatten() - want.flatten()).max() < 1e-15


def test_student_gradient_matches_finite_differences():
    cfg = loss_cfg()
    for case in range(4):
        st = tiny_client(seed=case, n=8, batch_size=8)
        student = st.student_view.copy()
        grad = client_local_step_fedkdx(copy.deepcopy(st), student, cfg, batches=1)

        flat = student.params.flatten()
        probes = np.random.default_rng(case).choice(flat.size, 6, replace=False)
        for i in probes:
            def f(theta, i=i):
                v = flat.copy()
                v[i] = theta[0]
                probe = student.copy()
                probe.params = student.params.unflatten(v)
                clone = copy.deepcopy(st)
                idx = clone.rng.permutation(8)
                x, y = clone.x_train[idx], clone.y_train[idx]
                t_tr = forward(clone.teacher, x, "train")
                s_tr = forward(probe, x, "eval")
                val, _, _ = combined_loss(ROLE_STUDENT, s_tr.logits, t_tr.logits,
                                          s_tr.features, t_tr.features, y, cfg)
                return val
            fd = finite_diff_grad(f, np.array([flat[i]]))[0]
            assert rel_err(grad.flatten()[i], fd).max() < 1e-4


def test_zero_teacher_rate_leaves_teacher_parameters_untouched():
    st = tiny_client(teacher_lr=0.0)
    before = st.teacher.params.copy()
    client_local_step_fedkdx(st, st.student_view.copy(), loss_cfg())
    assert params_equal(st.teacher.params, before)
    # and a learning teacher moves
    st2 = tiny_client(teacher_lr=0.1)
    before2 = st2.teacher.params.copy()
    client_local_step_fedkdx(st2, st2.student_view.copy(), loss_cfg())
    assert not params_equal(st2.teacher.params, before2)


def test_gradient_averages_over_requested_batches():
    cfg = loss_cfg()
    one = client_local_step_fedkdx(tiny_client(n=8, batch_size=4),
                                   build_mlp(4, 3, seed=999), cfg, batches=1)
    both = client_local_step_fedkdx(tiny_client(n=8, batch_size=4),
                                    build_mlp(4, 3, seed=999), cfg, batches=2)
    assert not np.allclose(one.flatten(), both.flatten())
    # a batch budget beyond one epoch reshuffles and keeps averaging
    many = client_local_step_fedkdx(tiny_client(n=8, batch_size=4),
                                    build_mlp(4, 3, seed=999), cfg, batches=5)
    assert np.all(np.isfinite(many.flatten()))


def test_empty_shard_raises():
    st = tiny_client(n=0)
    with pytest.raises(RoundError, match="empty training shard"):
        client_local_step_fedkdx(st, st.student_view.copy(), loss_cfg())
    with pytest.raises(RoundError):
        client_local_step_fedavg(tiny_client(n=0), 0.0)


# ----------------------------------------------------------- averaging step

def test_fedavg_delta_matches_hand_sgd():
    st = tiny_client(n=5, batch_size=5, student_lr=0.1)
    clone = copy.deepcopy(st)
    delta = client_local_step_fedavg(st, 0.0)

    from fedkdx.losses import ce_batch
    from fedkdx.nn import backward, params_iadd_scaled
    local = clone.student_view.copy()
    idx = clone.rng.permutation(5)
    tr = forward(local, clone.x_train[idx], "train")
    _, gl = ce_batch(tr.logits, clone.y_train[idx])
    g = backward(local.params, tr, gl)
    params_iadd_scaled(local.params, g, -0.1)
    want = local.params.copy()
    params_iadd_scaled(want, clone.student_view.params, -1.0)
    assert np.abs(delta.flatten() - want.flatten()).max() < 1e-15


def test_zero_mu_is_bitwise_plain_averaging():
    a = client_local_step_fedavg(tiny_client(seed=3), 0.0, epochs=2)
    b = client_local_step_fedavg(tiny_client(seed=3), 0.0, epochs=2)
    assert np.array_equal(a.flatten(), b.flatten())
    c = client_local_step_fedavg(tiny_client(seed=3), 0.01, epochs=2)
    assert not np.array_equal(a.flatten(), c.flatten())


def test_proximal_pull_shrinks_the_excursion():
    # keep lr * mu well under the SGD stability bound so the pull contracts
    light = client_local_step_fedavg(tiny_client(seed=4, n=32), 0.0, epochs=5)
    heavy = client_local_step_fedavg(tiny_client(seed=4, n=32), 10.0, epochs=5)
    assert np.linalg.norm(heavy.flatten()) < np.linalg.norm(light.flatten())


# ---------------------------------------------------------------- aggregate

def known_grads(template, fill):
    g = template.zeros_like()
    for layer in g.layers:
        layer.values += fill
    return g


def test_distilling_aggregate_descends_by_the_mean():
    student = build_mlp(4, 3, seed=5)
    w0 = student.params.flatten()
    policy = CompressionPolicy(wire_precision="f64")
    server = ServerState(student=student, strategy=STRATEGY_FEDKDX,
                         policy=policy, total_rounds=10, join_ratio=1.0,
                         student_lr=0.5, compress=False)
    g1 = known_grads(student.params, 1.0)
    g2 = known_grads(student.params, 2.0)
    blobs = [(0, encode_packet(raw_packet(g1, policy))),
             (1, encode_packet(raw_packet(g2, policy)))]
    down, _ = server_aggregate(blobs, server, eps=0.9)
    assert np.abs(student.params.flatten() - (w0 - 0.5 * 1.5)).max() < 1e-15
    assert len(down) > 0


def test_averaging_aggregate_adds_the_weighted_blend():
    student = build_mlp(4, 3, seed=6)
    w0 = student.params.flatten()
    policy = CompressionPolicy(wire_precision="f64")
    server = ServerState(student=student, strategy=STRATEGY_FEDAVG,
                         policy=policy, total_rounds=10, join_ratio=1.0,
                         student_lr=0.5, compress=False)
    d1 = known_grads(student.params, 1.0)
    d2 = known_grads(student.params, 5.0)
    blobs = [(0, encode_packet(raw_packet(d1, policy))),
             (1, encode_packet(raw_packet(d2, policy)))]
    server_aggregate(blobs, server, eps=0.9, weights={0: 0.75, 1: 0.25})
    assert np.abs(student.params.flatten() - (w0 + 2.0)).max() < 1e-15


def test_aggregate_rejects_undecodable_uplink():
    student = build_mlp(4, 3, seed=7)
    policy = CompressionPolicy()
    server = ServerState(student=student, strategy=STRATEGY_FEDKDX,
                         policy=policy, total_rounds=10, join_ratio=1.0,
                         student_lr=0.1)
    good = encode_packet(raw_packet(known_grads(student.params, 1.0), policy))
    with pytest.raises(RoundError, match="client 4"):
        server_aggregate([(4, good[:-3])], server, eps=0.9)
    with pytest.raises(RoundError):
        server_aggregate([], server, eps=0.9)


def test_server_state_validation():
    student = build_mlp(4, 3, seed=8)
    policy = CompressionPolicy()
    with pytest.raises(ValueError):
        ServerState(student, "GOSSIP", policy, 10, 0.5, 0.1)
    with pytest.raises(ValueError):
        ServerState(student, STRATEGY_FEDKDX, policy, 10, 0.0, 0.1)
    with pytest.raises(ValueError):
        ServerState(student, STRATEGY_FEDKDX, policy, 0, 0.5, 0.1)


# ------------------------------------------------------------------- rounds

def test_round_keeps_every_view_equal_to_the_server():
    exp = make_experiment(rounds=4)
    for _ in range(4):
        rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                        exp.eval_x, exp.eval_y, measure_time=False)
    server_flat = exp.server.student.params.flatten()
    for st in exp.clients.values():
        assert np.array_equal(st.student_view.params.flatten(), server_flat)
    assert rec.round == 4
    assert exp.server.round_index == 5


def test_round_records_byte_counts_from_the_codec():
    exp = make_experiment(rounds=2, compress=False, wire_precision="f64")
    policy = exp.server.policy
    raw_size = len(encode_packet(raw_packet(
        exp.server.student.params.zeros_like(), policy)))
    rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                    exp.eval_x, exp.eval_y, measure_time=False)
    assert rec.bytes_up == raw_size * len(rec.participants)
    assert rec.bytes_down == raw_size * len(exp.clients)
    assert rec.svd_fallbacks == 0
    assert rec.strategy == STRATEGY_FEDKDX
    assert rec.participants == tuple(sorted(rec.participants))


def test_round_timing_switch():
    exp = make_experiment(rounds=2)
    rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                    exp.eval_x, exp.eval_y, measure_time=False)
    assert rec.wall_seconds == 0.0
    rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                    exp.eval_x, exp.eval_y, measure_time=True)
    assert rec.wall_seconds > 0.0


def test_thread_count_does_not_change_the_trajectory():
    records = {}
    for threads in (1, 4):
        exp = make_experiment(rounds=3)
        out = []
        for _ in range(3):
            out.append(run_round(exp.server, exp.clients, exp.loss_cfg,
                                 exp.eval_x, exp.eval_y, threads=threads,
                                 measure_time=False))
        records[threads] = out
    assert records[1] == records[4]


def test_compressed_round_still_syncs_views():
    exp = make_experiment(rounds=2, compress=True, eps_start=0.7, eps_end=0.7)
    rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                    exp.eval_x, exp.eval_y, measure_time=False)
    server_flat = exp.server.student.params.flatten()
    for st in exp.clients.values():
        assert np.array_equal(st.student_view.params.flatten(), server_flat)
    assert rec.bytes_up > 0


def test_fedprox_and_fedavg_rounds_diverge_only_through_mu():
    base = {"strategy": "FEDAVG", "rounds": 2, "fedprox_mu": 0.0}
    a = make_experiment(**base)
    b = make_experiment(**{**base, "strategy": "FEDPROX"})
    for _ in range(2):
        ra = run_round(a.server, a.clients, a.loss_cfg, a.eval_x, a.eval_y,
                       measure_time=False)
        rb = run_round(b.server, b.clients, b.loss_cfg, b.eval_x, b.eval_y,
                       measure_time=False)
    assert np.array_equal(a.server.student.params.flatten(),
                          b.server.student.params.flatten())
    c = make_experiment(**{**base, "strategy": "FEDPROX", "fedprox_mu": 0.5})
    for _ in range(2):
        run_round(c.server, c.clients, c.loss_cfg, c.eval_x, c.eval_y,
                  measure_time=False)
    assert not np.array_equal(a.server.student.params.flatten(),
                              c.server.student.params.flatten())


# ---------------------------------------------------------------- evaluation

def test_evaluation_chunking_is_exact():
    model = build_mlp(6, 3, seed=9)
    rng = np.random.default_rng(10)
    n = fed.EVAL_CHUNK * 2 + 37  # forces three chunks, last one short
    x = rng.normal(size=(n, 6))
    y = rng.integers(0, 3, size=n)
    got = evaluate(model, x, y)

    from fedkdx import metrics as mt
    full = forward(model, x, "eval").logits
    batch = mt.EvalBatch(softmax_rows(full, 1.0), y)
    assert got == {"accuracy": mt.accuracy(batch),
                   "f1_macro": mt.macro_f1(batch),
                   "recall_macro": mt.macro_recall(batch),
                   "auc_macro": mt.macro_auc_ovr(batch)}
