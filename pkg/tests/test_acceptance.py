"""End-to-end behavior gates.

Each test checks one promised property of the released artifact, prints a
single PASS line on success, and pins its tolerance explicitly.  These run
on top of the unit suite, not instead of it.
"""

import copy
import csv
import os
import time

import numpy as np
import pytest

from fedkdx.compression import (CompressionPolicy, GradientPacket, MODE_RAW,
                                compress_gradient, compress_layer,
                                decode_packet, decompress, dynamic_threshold,
                                encode_packet, packet_size_bytes, raw_packet)
from fedkdx.config import config_from_dict
from fedkdx.data import load_ucihar
from fedkdx.experiment import build_experiment, run_experiment
from fedkdx.federation import client_local_step_fedkdx, run_round
from fedkdx.linalg import finite_diff_grad
from fedkdx.losses import cross_entropy, ctl_loss, kd_loss, nkd_loss
from fedkdx.nn import (LayerParam, ModelParams, backward, build_cnn_har,
                       build_mlp, forward, load_checkpoint)
from helpers import make_experiment

GRAD_TOL = 1e-4
FD_NOISE = 1e-7  # central differences at h=1e-4 carry ~1e-8 truncation error
CASES_PER_CHECK = 100

UCIHAR_ROOT = os.environ.get(
    "FEDKDX_UCIHAR",
    os.path.join(os.path.dirname(__file__), os.pardir, "data", "ucihar"))

# the non-IID study setup shared by the comparison and participation gates
STUDY_RAW = {
    "strategy": "FEDKDX", "seed": 0, "rounds": 100, "join_ratio": 0.5,
    "lr_teacher": 0.05, "lr_student": 0.05, "batch_size": 32,
    "deterministic_timing": True,
    "dataset": {"kind": "synthetic", "num_classes": 3, "dims": 6,
                "samples_per_class": 400, "separation": 3.92},
    "partition": {"mode": "dirichlet", "num_clients": 8, "alpha": 0.1},
}


def grad_close(analytic, fd) -> bool:
    """Componentwise relative agreement with an absolute guard for the
    finite-difference noise floor."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(fd, dtype=float)
    return bool(np.all(np.abs(a - n) <= GRAD_TOL * np.maximum(np.abs(a), np.abs(n)) + FD_NOISE))


def run_study(**overrides):
    raw = copy.deepcopy(STUDY_RAW)
    raw.update(overrides)
    cfg = config_from_dict(raw)
    exp = build_experiment(cfg)
    rec = None
    for _ in range(cfg.rounds):
        rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                        exp.eval_x, exp.eval_y, measure_time=False)
    return exp, rec


def nearest_mean_accuracy(exp) -> float:
    """Centralized skyline: class means fitted on the pooled training shards."""
    xs = np.concatenate([st.x_train.reshape(st.num_train, -1)
                         for st in exp.clients.values()])
    ys = np.concatenate([st.y_train for st in exp.clients.values()])
    mu = np.stack([xs[ys == c].mean(axis=0) for c in range(exp.num_classes)])
    flat = exp.eval_x.reshape(len(exp.eval_y), -1)
    pred = ((flat[:, None, :] - mu[None]) ** 2).sum(axis=2).argmin(axis=1)
    return float((pred == exp.eval_y).mean())


def test_01_analytic_gradients_match_central_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)

    for _ in range(CASES_PER_CHECK):
        dim = int(rng.integers(2, 9))
        z, y = rng.normal(0, 2, dim), int(rng.integers(dim))
        _, g = cross_entropy(z, y)
        fd = finite_diff_grad(lambda v: cross_entropy(v, y)[0], z)
        assert grad_close(g, fd)

    for i in range(CASES_PER_CHECK):
        dim = int(rng.integers(2, 9))
        own, peer = rng.normal(0, 2, dim), rng.normal(0, 2, dim)
        tau = float(rng.uniform(0.5, 4.0))
        direction = "toward_teacher" if i % 2 else "toward_student"
        _, g = kd_loss(own, peer, tau, direction)
        fd = finite_diff_grad(lambda v: kd_loss(v, peer, tau, direction)[0], own)
        assert grad_close(g, fd)

    for _ in range(CASES_PER_CHECK):
        dim = int(rng.integers(2, 9))
        own, peer = rng.normal(0, 2, dim), rng.normal(0, 2, dim)
        y = int(rng.integers(dim))
        tau, gamma = float(rng.uniform(0.5, 4.0)), float(rng.uniform(0.0, 1.0))
        _, g = nkd_loss(own, peer, y, tau, gamma)
        fd = finite_diff_grad(lambda v: nkd_loss(v, peer, y, tau, gamma)[0], own)
        assert grad_close(g, fd)

    for _ in range(CASES_PER_CHECK):
        b, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        tau = float(rng.uniform(0.5, 3.0))
        tf, sf = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        _, ga, gc = ctl_loss(tf, sf, tau)

        def f(v, b=b, d=d, tau=tau):
            return ctl_loss(v[:b * d].reshape(b, d),
                            v[b * d:].reshape(b, d), tau)[0]
        fd = finite_diff_grad(f, np.concatenate([tf.ravel(), sf.ravel()]))
        assert grad_close(np.concatenate([ga.ravel(), gc.ravel()]), fd)

    # full networks: a random linear functional of logits and features,
    # differentiated through both forward modes
    arch_cases = 0
    for in_shape, build in (((2, 1, 6), lambda s: build_mlp(6, 3, seed=s)),
                            ((2, 2, 28), lambda s: build_cnn_har(2, 28, 3, seed=s))):
        for case in range(CASES_PER_CHECK):
            model = build(1000 + case)
            mode = "train" if case % 2 else "eval"
            x = rng.normal(size=in_shape)
            wl = rng.normal(size=(in_shape[0], 3))
            wf = rng.normal(size=(in_shape[0], model.params.meta["feature_dim"]))
            bn0 = {k: v.copy() for k, v in model.bn.items()}

            trace = forward(model, x, mode)
            grad = backward(model.params, trace, wl, wf).flatten()
            flat = model.params.flatten()
            for idx in rng.choice(flat.size, 6, replace=False):
                def f(v, idx=idx):
                    vec = flat.copy()
                    vec[idx] = v[0]
                    probe = model.copy()
                    probe.params = model.params.unflatten(vec)
                    probe.bn = {k: s.copy() for k, s in bn0.items()}
                    tr = forward(probe, x, mode)
                    return float((wl * tr.logits).sum() + (wf * tr.features).sum())
                fd = finite_diff_grad(f, np.array([flat[idx]]))[0]
                assert grad_close(grad[idx], fd)
            arch_cases += 1

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"PASS: analytic gradients track central differences within {GRAD_TOL}"
          f" over 400 loss cases and {arch_cases} network cases ({elapsed:.1f}s)")


def test_02_factored_uploads_keep_the_promised_energy():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    lowrank_seen = 0

    for i in range(1000):
        if i < 40:
            p, q = 256, 128
        else:
            p, q = int(rng.integers(2, 97)), int(rng.integers(2, 49))
        r = int(rng.integers(1, max(2, min(p, q, 7))))
        kind = i % 5
        if kind < 3:
            g = rng.normal(size=(p, r)) @ rng.normal(size=(r, q))
            g += 1e-6 * rng.normal(size=(p, q))
        elif kind == 3:
            g = rng.normal(size=(p, q))
        else:
            g = rng.normal(size=(p, q)) * np.logspace(0, -8, q)[None, :]
        if i >= 40 and rng.random() < 0.5:
            g = g.T
        eps = float(rng.uniform(0.5, 0.99))

        entry, failed = compress_layer(f"m{i}", g, eps, "f64")
        assert not failed
        if entry.mode == MODE_RAW:
            continue
        lowrank_seen += 1

        template = ModelParams(arch="probe",
                               layers=[LayerParam(f"m{i}", np.zeros_like(g))])
        rec = decompress(GradientPacket([entry]), template).layers[0].values
        tot = float((g * g).sum())
        err = float(((g - rec) ** 2).sum())
        assert err <= (1.0 - eps) * tot + 1e-12 * tot

        pp, rr = entry.u.shape
        qq = entry.vt.shape[1]
        assert pp * rr + rr * rr + rr * qq < pp * qq

    assert lowrank_seen >= 200
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"PASS: all {lowrank_seen} factored uploads out of 1000 matrices kept"
          f" the energy bound and beat the raw payload ({elapsed:.1f}s)")


def test_03_threshold_schedule_is_linear_between_its_endpoints():
    rng = np.random.default_rng(11)
    for _ in range(200):
        start, end = rng.uniform(0.01, 1.0, 2)
        pol = CompressionPolicy(eps_start=float(start), eps_end=float(end))
        assert abs(dynamic_threshold(0.0, pol) - start) <= 1e-15
        assert abs(dynamic_threshold(1.0, pol) - end) <= 1e-15
        for rho in rng.uniform(0.0, 1.0, 5):
            want = start + (end - start) * rho
            assert abs(dynamic_threshold(float(rho), pol) - want) <= 1e-15
    print("PASS: threshold schedule hits both endpoints and stays linear"
          " within 1e-15 across 200 random policies")


def test_04_uncompressed_round_descends_by_the_exact_mean_gradient():
    exp = make_experiment(join_ratio=1.0, compress=False,
                          wire_precision="f64", rounds=1)
    w0 = exp.server.student.params.flatten()
    lr = exp.server.student_lr
    clones = {cid: copy.deepcopy(st) for cid, st in exp.clients.items()}

    rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                    exp.eval_x, exp.eval_y, measure_time=False)
    assert rec.participants == tuple(sorted(clones))

    # replay every client outside the federation machinery
    grads = np.stack([
        client_local_step_fedkdx(clones[cid], clones[cid].student_view,
                                 exp.loss_cfg).flatten()
        for cid in sorted(clones)])
    want = w0 - lr * grads.mean(axis=0)
    got = exp.server.student.params.flatten()
    gap = np.abs(got - want).max()
    assert gap <= 1e-12
    print(f"PASS: one uncompressed full-participation round equals the"
          f" hand-averaged descent step (max gap {gap:.2e} <= 1e-12)")


def test_05_packet_codec_round_trips_bitwise():
    rng = np.random.default_rng(13)
    packets = 0
    for precision in ("f32", "f64"):
        policy = CompressionPolicy(eps_start=0.7, eps_end=0.7,
                                   wire_precision=precision)
        for i in range(500):
            layers = []
            for j in range(int(rng.integers(1, 4))):
                nd = int(rng.integers(1, 4))
                if nd == 1:
                    values = rng.normal(size=int(rng.integers(1, 40)))
                elif nd == 2:
                    p, q = int(rng.integers(2, 40)), int(rng.integers(1, 20))
                    values = rng.normal(size=(p, q))
                    if rng.random() < 0.5:
                        rank = int(rng.integers(1, 3))
                        values = (rng.normal(size=(p, rank))
                                  @ rng.normal(size=(rank, q)))
                else:
                    values = rng.normal(size=(int(rng.integers(2, 12)),
                                              int(rng.integers(1, 6)),
                                              int(rng.integers(1, 8))))
                layers.append(LayerParam(f"block{j}.w", values))
            grads = ModelParams(arch="probe", layers=layers)

            if i % 4 == 0:
                pkt = raw_packet(grads, policy)
            else:
                pkt, _ = compress_gradient(grads, float(rng.uniform(0.5, 0.99)),
                                           policy)
            blob = encode_packet(pkt)
            decoded = decode_packet(blob)
            assert encode_packet(decoded) == blob
            assert packet_size_bytes(decoded) == len(blob)
            packets += 1
    assert packets == 1000
    print("PASS: 1000 gradient packets re-encode to identical bytes at both"
          " wire precisions")


def test_06_equal_seeds_give_byte_identical_runs(tmp_path):
    raw = {
        "strategy": "FEDKDX", "seed": 3, "rounds": 20, "join_ratio": 0.5,
        "lr_teacher": 0.05, "lr_student": 0.05, "batch_size": 16,
        "deterministic_timing": True,
        "dataset": {"kind": "synthetic", "num_classes": 3, "dims": 6,
                    "samples_per_class": 100, "separation": 3.0},
        "partition": {"mode": "dirichlet", "num_clients": 8, "alpha": 0.5},
    }
    outs = []
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / name
        run_experiment(config_from_dict(copy.deepcopy(raw)), str(out),
                       threads=threads)
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    assert outs[0].count(b"\n") == 21
    print("PASS: 20-round runs with equal seeds produce byte-identical"
          " metrics, serial or threaded")


def test_07_disabling_the_extra_terms_reproduces_the_plain_baseline(tmp_path):
    raw = {
        "strategy": "FEDKDX", "seed": 5, "rounds": 10, "join_ratio": 0.5,
        "lr_teacher": 0.05, "lr_student": 0.05, "batch_size": 16,
        "enable_nkd": False, "enable_ctl": False, "deterministic_timing": True,
        "dataset": {"kind": "synthetic", "num_classes": 3, "dims": 6,
                    "samples_per_class": 60, "separation": 3.0},
        "partition": {"mode": "dirichlet", "num_clients": 4, "alpha": 0.5},
    }
    run_experiment(config_from_dict(copy.deepcopy(raw)), str(tmp_path / "off"))
    baseline = {**copy.deepcopy(raw), "strategy": "FEDKD",
                "enable_nkd": True, "enable_ctl": True}
    run_experiment(config_from_dict(baseline), str(tmp_path / "kd"))

    def rows_without_strategy(d):
        with open(tmp_path / d / "metrics.csv") as fh:
            return [r[:1] + r[2:] for r in csv.reader(fh)]

    assert rows_without_strategy("off") == rows_without_strategy("kd")
    a = load_checkpoint(str(tmp_path / "off" / "student.ckpt"))
    b = load_checkpoint(str(tmp_path / "kd" / "student.ckpt"))
    assert np.array_equal(a.params.flatten(), b.params.flatten())
    print("PASS: switching both extra loss terms off reproduces the plain"
          " distillation baseline bit for bit")


def test_08_distillation_matches_direct_averaging_on_skewed_shards():
    t0 = time.perf_counter()
    kdx, avg, skyline = [], [], []
    for seed in range(5):
        exp, rec = run_study(seed=seed)
        kdx.append(rec.accuracy)
        skyline.append(nearest_mean_accuracy(exp))
        _, rec = run_study(seed=seed, strategy="FEDAVG")
        avg.append(rec.accuracy)

    mean_kdx, mean_avg = np.mean(kdx), np.mean(avg)
    mean_sky = np.mean(skyline)
    assert mean_kdx >= 0.85, f"distilled runs collapsed: {kdx}"
    assert mean_kdx >= mean_avg - 0.02, \
        f"distillation fell behind averaging: {mean_kdx:.4f} vs {mean_avg:.4f}"
    assert mean_kdx >= 0.9 * mean_sky, \
        f"distillation fell below 90% of the centralized skyline {mean_sky:.4f}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    print(f"PASS: over 5 seeds distillation reaches {mean_kdx:.4f} vs direct"
          f" averaging {mean_avg:.4f} and skyline {mean_sky:.4f} ({elapsed:.0f}s)")


def test_09_more_participants_never_hurt_and_uplink_scales_linearly():
    t0 = time.perf_counter()
    ratios = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    means = []
    for ratio in ratios:
        accs = [run_study(seed=seed, join_ratio=ratio)[1].accuracy
                for seed in range(3)]
        means.append(float(np.mean(accs)))
    for lo, hi in zip(means, means[1:]):
        assert hi >= lo - 0.015, f"trend broke the 1.5% band: {means}"

    # uplink volume: every participant ships the same raw packet, so the
    # byte count is an exact multiple of the per-client payload
    for ratio in ratios:
        cfg = config_from_dict({**copy.deepcopy(STUDY_RAW), "rounds": 1,
                                "join_ratio": ratio, "compress": False})
        exp = build_experiment(cfg)
        per_client = len(encode_packet(raw_packet(
            exp.server.student.params.zeros_like(), exp.server.policy)))
        rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                        exp.eval_x, exp.eval_y, measure_time=False)
        assert rec.bytes_up == per_client * len(rec.participants)
    elapsed = time.perf_counter() - t0
    print(f"PASS: accuracy means {['%.4f' % m for m in means]} never dip more"
          f" than 1.5% as participation grows; uplink bytes are exactly"
          f" per-client-payload x participants ({elapsed:.0f}s)")


@pytest.mark.skipif(not os.path.isdir(UCIHAR_ROOT),
                    reason="recorded sensor dataset not present")
def test_10_recorded_sensors_partition_by_subject_and_train():
    samples = load_ucihar(UCIHAR_ROOT)
    assert {s.label for s in samples} == set(range(6))
    assert len({s.subject for s in samples}) >= 30

    raw = {
        "strategy": "FEDKDX", "seed": 0, "rounds": 50, "join_ratio": 0.4,
        "lr_teacher": 0.03, "lr_student": 0.03, "batch_size": 32,
        "deterministic_timing": True,
        "dataset": {"kind": "ucihar", "root": UCIHAR_ROOT},
        "partition": {"mode": "by_subject", "num_clients": 30},
    }
    exp = build_experiment(config_from_dict(raw))
    assert len(exp.clients) == 30
    rec = None
    for _ in range(50):
        rec = run_round(exp.server, exp.clients, exp.loss_cfg,
                        exp.eval_x, exp.eval_y, measure_time=False)
    counts = np.bincount(exp.eval_y)
    majority = counts.max() / counts.sum()
    assert rec.accuracy >= majority + 0.30
    print(f"PASS: 50 rounds on recorded sensors reach {rec.accuracy:.4f},"
          f" clear of the {majority:.4f} majority baseline by 30 points")
