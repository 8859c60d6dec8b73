"""Round-based federated training.

One round: sample participants, run each one's local step (mutual
distillation for the distilling strategies, plain local SGD for the
averaging ones), ship the results uplink through the packet codec,
aggregate on the server, ship the aggregate back downlink, and have every
client apply it.  The server and all clients therefore hold bitwise
identical copies of the shared student at every round boundary, because
everyone applies the decoded downlink bytes rather than any private
intermediate.

Clients inside a round may execute on a thread pool; each owns its state
exclusively and the aggregation order is fixed by client id, so results
are independent of thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from .compression import (CompressionPolicy, CompressionStats, compress_gradient,
                          decode_packet, decompress, dynamic_threshold,
                          encode_packet, packet_size_bytes, raw_packet)
from .linalg import softmax_rows
from .losses import LossConfig, ROLE_STUDENT, ROLE_TEACHER, ce_batch, combined_loss
from .nn import Model, ModelParams, backward, forward, params_iadd_scaled

STRATEGY_FEDAVG = "FEDAVG"
STRATEGY_FEDPROX = "FEDPROX"
STRATEGY_FEDKD = "FEDKD"
STRATEGY_FEDKDX = "FEDKDX"
STRATEGIES = (STRATEGY_FEDAVG, STRATEGY_FEDPROX, STRATEGY_FEDKD, STRATEGY_FEDKDX)

_DISTILLING = (STRATEGY_FEDKD, STRATEGY_FEDKDX)

# fixed stream tags: every random decision in a run draws from
# default_rng(SeedSequence([global_seed, tag, ...])) so streams never collide
STREAM_SAMPLER = 1
STREAM_PARTITION = 2
STREAM_DATA = 3
STREAM_STUDENT_INIT = 4
STREAM_TEACHER_INIT = 5
STREAM_CLIENT = 6


def derive_rng(global_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, *tags]))


def derive_seed(global_seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([global_seed, *tags]).generate_state(1)[0])


class RoundError(RuntimeError):
    """A round could not complete; carries the offending client where known."""


@dataclass
class ClientState:
    client_id: int
    teacher: Model                  # private; never serialized
    student_view: Model             # this client's copy of the shared student
    x_train: np.ndarray
    y_train: np.ndarray
    rng: np.random.Generator        # minibatch shuffles, owned exclusively
    teacher_lr: float
    student_lr: float
    batch_size: int

    @property
    def num_train(self) -> int:
        return self.x_train.shape[0]


@dataclass
class ServerState:
    student: Model
    strategy: str
    policy: CompressionPolicy
    total_rounds: int
    join_ratio: float
    student_lr: float
    compress: bool = True
    fedprox_mu: float = 0.0
    local_epochs: int = 1
    round_index: int = 1            # next round to run, 1-based
    sampler_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not (0.0 < self.join_ratio <= 1.0):
            raise ValueError(f"join_ratio must lie in (0, 1], got {self.join_ratio}")
        if self.total_rounds < 1:
            raise ValueError(f"total_rounds must be >= 1, got {self.total_rounds}")


@dataclass
class RoundRecord:
    round: int
    strategy: str
    participants: tuple[int, ...]
    accuracy: float
    f1_macro: float
    recall_macro: float
    auc_macro: float
    bytes_up: int
    bytes_down: int
    wall_seconds: float
    svd_fallbacks: int


def sample_clients(client_ids: list[int], join_ratio: float,
                   rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample without replacement, at least one, ids ascending."""
    if not client_ids:
        raise ValueError("no clients to sample from")
    if not (0.0 < join_ratio <= 1.0):
        raise ValueError(f"join_ratio must lie in (0, 1], got {join_ratio}")
    k = len(client_ids)
    m = max(1, int(np.floor(join_ratio * k + 0.5)))
    picked = rng.choice(np.sort(np.asarray(client_ids)), size=m, replace=False)
    return tuple(int(c) for c in np.sort(picked))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Index slices covering one shuffled pass; the last slice may be short."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def client_local_step_fedkdx(state: ClientState, student: Model,
                             cfg: LossConfig, batches: int | None = None) -> ModelParams:
    """One local pass of mutual distillation.

    Per minibatch: forward teacher (training mode) and student (evaluation
    mode, so its normalization state never drifts from the shared copy),
    step the teacher by its own loss, and accumulate the student's gradient
    against the teacher outputs from before that step.  The teacher mutates
    in place; the student is read-only here, its update arrives downlink.

    ``batches`` limits the pass to that many minibatches; default is one
    epoch.  Returns the student gradient averaged over minibatches.
    """
    n = state.num_train
    if n == 0:
        raise RoundError(f"client {state.client_id}: empty training shard")
    grad_acc = student.params.zeros_like()
    done = 0
    target = batches
    while target is None or done < target:
        for idx in _epoch_batches(n, state.batch_size, state.rng):
            if target is not None and done >= target:
                break
            xb = state.x_train[idx]
            yb = state.y_train[idx]

            t_tr = forward(state.teacher, xb, "train")
            s_tr = forward(student, xb, "eval")

            _, gl_t, gf_t = combined_loss(ROLE_TEACHER, t_tr.logits, s_tr.logits,
                                          t_tr.features, s_tr.features, yb, cfg)
            t_grad = backward(state.teacher.params, t_tr, gl_t, gf_t)
            if state.teacher_lr != 0.0:
                params_iadd_scaled(state.teacher.params, t_grad, -state.teacher_lr)

            _, gl_s, gf_s = combined_loss(ROLE_STUDENT, s_tr.logits, t_tr.logits,
                                          s_tr.features, t_tr.features, yb, cfg)
            s_grad = backward(student.params, s_tr, gl_s, gf_s)
            params_iadd_scaled(grad_acc, s_grad, 1.0)
            done += 1
        if target is None:
            break
    for layer in grad_acc.layers:
        layer.values /= done
    return grad_acc


def client_local_step_fedavg(state: ClientState, prox_mu: float,
                             epochs: int = 1) -> ModelParams:
    """Local SGD from the shared model; returns the parameter delta.

    A positive ``prox_mu`` adds the proximal pull toward the round-start
    parameters (the gradient of (mu/2)||W - W_start||^2); zero leaves the
    arithmetic bitwise identical to the plain variant.
    """
    n = state.num_train
    if n == 0:
        raise RoundError(f"client {state.client_id}: empty training shard")
    start = state.student_view.params
    local = state.student_view.copy()
    for _ in range(epochs):
        for idx in _epoch_batches(n, state.batch_size, state.rng):
            tr = forward(local, state.x_train[idx], "train")
            _, gl = ce_batch(tr.logits, state.y_train[idx])
            grad = backward(local.params, tr, gl)
            if prox_mu != 0.0:
                for g, w, w0 in zip(grad.layers, local.params.layers, start.layers):
                    g.values += prox_mu * (w.values - w0.values)
            params_iadd_scaled(local.params, grad, -state.student_lr)
    delta = local.params.copy()
    params_iadd_scaled(delta, start, -1.0)
    return delta


def _client_uplink(state: ClientState, server: ServerState, cfg: LossConfig,
                   eps: float) -> tuple[bytes, CompressionStats]:
    if server.strategy in _DISTILLING:
        grad = client_local_step_fedkdx(state, state.student_view, cfg)
        if server.compress:
            pkt, stats = compress_gradient(grad, eps, server.policy)
        else:
            pkt, stats = raw_packet(grad, server.policy), CompressionStats()
    else:
        mu = server.fedprox_mu if server.strategy == STRATEGY_FEDPROX else 0.0
        delta = client_local_step_fedavg(state, mu, server.local_epochs)
        pkt, stats = raw_packet(delta, server.policy), CompressionStats()
    return encode_packet(pkt), stats


def server_aggregate(blobs: list[tuple[int, bytes]], server: ServerState,
                     eps: float, weights: dict[int, float] | None = None,
                     ) -> tuple[bytes, CompressionStats]:
    """Decode uplinks in ascending client order, average, update the shared
    student, and produce the downlink bytes.

    Distilling strategies average gradients unweighted and descend by the
    student rate; averaging strategies blend parameter deltas by the given
    weights and add the blend directly.  In both cases what the server
    applies is the reconstruction of the downlink packet itself, so clients
    applying the same bytes land on exactly the same parameters.
    """
    if not blobs:
        raise RoundError("no uplink packets to aggregate")
    template = server.student.params.zeros_like()
    acc = server.student.params.zeros_like()
    for cid, blob in sorted(blobs, key=lambda t: t[0]):
        try:
            grad = decompress(decode_packet(blob), template)
        except ValueError as e:
            raise RoundError(f"client {cid}: undecodable uplink: {e}") from e
        w = 1.0 / len(blobs) if weights is None else weights[cid]
        params_iadd_scaled(acc, grad, w)

    if server.strategy in _DISTILLING and server.compress:
        down_pkt, down_stats = compress_gradient(acc, eps, server.policy)
    else:
        down_pkt, down_stats = raw_packet(acc, server.policy), CompressionStats()
    down_blob = encode_packet(down_pkt)

    applied = decompress(decode_packet(down_blob), template)
    _apply_downlink(server.student.params, applied, server)
    return down_blob, down_stats


def _apply_downlink(params: ModelParams, applied: ModelParams, server: ServerState) -> None:
    if server.strategy in _DISTILLING:
        params_iadd_scaled(params, applied, -server.student_lr)
    else:
        params_iadd_scaled(params, applied, 1.0)


EVAL_CHUNK = 512


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Metrics of the model's softmax scores on a labeled set.

    Forwarding happens in chunks to bound the conv im2col footprint;
    evaluation mode is a pure function of the inputs so chunking is exact.
    """
    logits = np.concatenate([forward(model, x[i:i + EVAL_CHUNK], "eval").logits
                             for i in range(0, x.shape[0], EVAL_CHUNK)])
    batch = mt.EvalBatch(softmax_rows(logits, 1.0), y)
    return {"accuracy": mt.accuracy(batch),
            "f1_macro": mt.macro_f1(batch),
            "recall_macro": mt.macro_recall(batch),
            "auc_macro": mt.macro_auc_ovr(batch)}


def run_round(server: ServerState, clients: dict[int, ClientState], cfg: LossConfig,
              eval_x: np.ndarray, eval_y: np.ndarray, threads: int = 1,
              measure_time: bool = True) -> RoundRecord:
    """Execute one full communication round and score the updated student."""
    t0 = time.perf_counter() if measure_time else 0.0
    t = server.round_index
    rho = 0.0 if server.total_rounds == 1 else (t - 1) / (server.total_rounds - 1)
    eps = dynamic_threshold(rho, server.policy)

    participants = sample_clients(sorted(clients), server.join_ratio, server.sampler_rng)

    def one(cid: int) -> tuple[bytes, CompressionStats]:
        return _client_uplink(clients[cid], server, cfg, eps)

    if threads == 1:
        results = {cid: one(cid) for cid in participants}
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {cid: pool.submit(one, cid) for cid in participants}
            results = {cid: f.result() for cid, f in futures.items()}

    blobs = [(cid, results[cid][0]) for cid in participants]
    bytes_up = sum(len(b) for _, b in blobs)
    fallbacks = sum(results[cid][1].svd_fallbacks for cid in participants)

    weights = None
    if server.strategy in (STRATEGY_FEDAVG, STRATEGY_FEDPROX):
        total = sum(clients[cid].num_train for cid in participants)
        weights = {cid: clients[cid].num_train / total for cid in participants}

    down_blob, down_stats = server_aggregate(blobs, server, eps, weights)
    fallbacks += down_stats.svd_fallbacks

    # every client receives the broadcast, participant or not
    applied = decompress(decode_packet(down_blob), server.student.params.zeros_like())
    for state in clients.values():
        _apply_downlink(state.student_view.params, applied, server)
    bytes_down = len(down_blob) * len(clients)

    scores = evaluate(server.student, eval_x, eval_y)
    server.round_index += 1
    wall = time.perf_counter() - t0 if measure_time else 0.0
    return RoundRecord(round=t, strategy=server.strategy, participants=participants,
                       bytes_up=bytes_up, bytes_down=bytes_down, wall_seconds=wall,
                       svd_fallbacks=fallbacks, **scores)
