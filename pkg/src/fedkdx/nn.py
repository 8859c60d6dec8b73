"""Hand-rolled networks (1-D CNN and MLP) with explicit forward traces and
analytic backprop.

Both architectures expose, per sample, the logits and a penultimate feature
vector (the contrastive-alignment tap).  ``backward`` accepts simultaneous
upstream gradients on logits and features and returns a gradient object
with exactly the same layer structure as the parameters, which is what the
compression codec and the server aggregation operate on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ARCH_CNN = "cnn_har"
ARCH_MLP = "mlp"

CONV_KERNEL = 9
POOL_WIDTH = 2
CONV_FILTERS = (32, 64)
CNN_DENSE = (256, 128)
MLP_DENSE = (64, 32)
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"FKDX0001"

MODE_TRAIN = "train"
MODE_EVAL = "eval"


class ArchitectureError(ValueError):
    """Construction cannot produce a valid network (bad shape walk)."""


class CheckpointError(IOError):
    """Checkpoint bytes are malformed or inconsistent."""


@dataclass
class LayerParam:
    name: str
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class ModelParams:
    """Ordered, named parameter tensors plus the architecture tag.

    The same container carries gradients: a gradient is a ModelParams whose
    layer list mirrors the trainable parameters one for one.
    """

    arch: str
    layers: list[LayerParam]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")

    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    def get(self, name: str) -> np.ndarray:
        for l in self.layers:
            if l.name == name:
                return l.values
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [LayerParam(l.name, l.values.copy()) for l in self.layers],
                           dict(self.meta))

    def flatten(self) -> np.ndarray:
        return np.concatenate([l.values.ravel() for l in self.layers]) if self.layers \
            else np.empty(0)

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(l.values.size for l in self.layers)
        if vec.shape != (total,):
            raise ValueError(f"expected a flat vector of {total} values, got {vec.shape}")
        out, pos = [], 0
        for l in self.layers:
            n = l.values.size
            out.append(LayerParam(l.name, vec[pos:pos + n].reshape(l.values.shape).copy()))
            pos += n
        return ModelParams(self.arch, out, dict(self.meta))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch, [LayerParam(l.name, np.zeros_like(l.values))
                                       for l in self.layers], dict(self.meta))

    def num_values(self) -> int:
        return sum(l.values.size for l in self.layers)


def params_iadd_scaled(dst: ModelParams, src: ModelParams, scale: float) -> None:
    """dst += scale * src, layer by layer, in place."""
    if dst.names() != src.names():
        raise ValueError("parameter structures differ")
    for a, b in zip(dst.layers, src.layers):
        a.values += scale * b.values


def params_mean(items: list[ModelParams]) -> ModelParams:
    """Unweighted layer-wise mean; iteration order is the caller's order."""
    if not items:
        raise ValueError("nothing to average")
    acc = items[0].zeros_like()
    for it in items:
        params_iadd_scaled(acc, it, 1.0)
    for l in acc.layers:
        l.values /= len(items)
    return acc


@dataclass
class Model:
    """Parameters plus per-instance batch-norm running statistics.

    Running statistics are model state, not trainable parameters: they never
    appear in gradients, uplink packets, or aggregation.
    """

    params: ModelParams
    bn: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.params.copy(), {k: v.copy() for k, v in self.bn.items()})


@dataclass
class ForwardTrace:
    """Per-batch activations cached for the backward pass."""

    arch: str
    mode: str
    logits: np.ndarray      # (B, C)
    features: np.ndarray    # (B, H)
    caches: dict
    layer_shapes: tuple     # fingerprint to pair trace with its params


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def cnn_shape_walk(in_channels: int, in_length: int) -> dict:
    """Spatial sizes through the conv stack; raises naming the first layer
    that would produce an empty output."""
    if in_channels < 1:
        raise ArchitectureError(f"in_channels must be >= 1, got {in_channels}")
    l1 = in_length - CONV_KERNEL + 1
    if l1 < 1:
        raise ArchitectureError(
            f"conv1 needs in_length >= {CONV_KERNEL}, got {in_length}")
    p1 = l1 // POOL_WIDTH
    if p1 < 1:
        raise ArchitectureError(f"pool1 output empty for in_length {in_length}")
    l2 = p1 - CONV_KERNEL + 1
    if l2 < 1:
        raise ArchitectureError(
            f"conv2 output empty for in_length {in_length} (pool1 gives {p1})")
    p2 = l2 // POOL_WIDTH
    if p2 < 1:
        raise ArchitectureError(f"pool2 output empty for in_length {in_length}")
    return {"conv1": l1, "pool1": p1, "conv2": l2, "pool2": p2,
            "flat": CONV_FILTERS[1] * p2}


def build_cnn_har(in_channels: int, in_length: int, num_classes: int, seed: int) -> Model:
    """Two conv blocks (conv -> batchnorm -> relu -> maxpool) into three
    dense layers; the 128-wide dense output (post-relu) is the feature tap."""
    if num_classes < 2:
        raise ArchitectureError(f"num_classes must be >= 2, got {num_classes}")
    walk = cnn_shape_walk(in_channels, in_length)
    f1, f2 = CONV_FILTERS
    d1, d2 = CNN_DENSE
    rng = np.random.default_rng(seed)
    layers = [
        LayerParam("conv1.w", _uniform_init(rng, (f1, in_channels, CONV_KERNEL),
                                            in_channels * CONV_KERNEL)),
        LayerParam("conv1.b", np.zeros(f1)),
        LayerParam("bn1.gamma", np.ones(f1)),
        LayerParam("bn1.beta", np.zeros(f1)),
        LayerParam("conv2.w", _uniform_init(rng, (f2, f1, CONV_KERNEL), f1 * CONV_KERNEL)),
        LayerParam("conv2.b", np.zeros(f2)),
        LayerParam("bn2.gamma", np.ones(f2)),
        LayerParam("bn2.beta", np.zeros(f2)),
        LayerParam("fc1.w", _uniform_init(rng, (walk["flat"], d1), walk["flat"])),
        LayerParam("fc1.b", np.zeros(d1)),
        LayerParam("fc2.w", _uniform_init(rng, (d1, d2), d1)),
        LayerParam("fc2.b", np.zeros(d2)),
        LayerParam("head.w", _uniform_init(rng, (d2, num_classes), d2)),
        LayerParam("head.b", np.zeros(num_classes)),
    ]
    meta = {"in_channels": in_channels, "in_length": in_length,
            "num_classes": num_classes, "feature_dim": d2}
    params = ModelParams(ARCH_CNN, layers, meta)
    bn = {"bn1.running_mean": np.zeros(f1), "bn1.running_var": np.ones(f1),
          "bn2.running_mean": np.zeros(f2), "bn2.running_var": np.ones(f2)}
    return Model(params, bn)


def build_mlp(in_dim: int, num_classes: int, seed: int) -> Model:
    """Dense(64) -> relu -> Dense(32) -> Dense(C); the 32-wide affine output
    is the feature tap."""
    if num_classes < 2:
        raise ArchitectureError(f"num_classes must be >= 2, got {num_classes}")
    if in_dim < 1:
        raise ArchitectureError(f"in_dim must be >= 1, got {in_dim}")
    d1, d2 = MLP_DENSE
    rng = np.random.default_rng(seed)
    layers = [
        LayerParam("fc1.w", _uniform_init(rng, (in_dim, d1), in_dim)),
        LayerParam("fc1.b", np.zeros(d1)),
        LayerParam("fc2.w", _uniform_init(rng, (d1, d2), d1)),
        LayerParam("fc2.b", np.zeros(d2)),
        LayerParam("head.w", _uniform_init(rng, (d2, num_classes), d2)),
        LayerParam("head.b", np.zeros(num_classes)),
    ]
    meta = {"in_dim": in_dim, "num_classes": num_classes, "feature_dim": d2}
    return Model(ModelParams(ARCH_MLP, layers, meta), {})


# ---------------------------------------------------------------- forward

def _conv1d(x, w, b):
    # x (B,C,L), w (F,C,K) -> out (B,F,Lout), cache of im2col patches
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)  # (B,C,Lout,K)
    cols = win.transpose(0, 2, 1, 3).reshape(x.shape[0], -1, w.shape[1] * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.transpose(0, 2, 1), cols


def _bn_forward(x, gamma, beta, mode, running_mean, running_var):
    # channel statistics over (batch, position)
    if mode == MODE_TRAIN:
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        new_mean = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mu
        new_var = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std), (new_mean, new_var)


def _maxpool2(x):
    lp = x.shape[2] // POOL_WIDTH
    xv = x[:, :, :lp * POOL_WIDTH].reshape(x.shape[0], x.shape[1], lp, POOL_WIDTH)
    arg = xv.argmax(axis=3)
    out = np.take_along_axis(xv, arg[..., None], axis=3)[..., 0]
    return out, (arg, x.shape[2])


def forward(model: Model, x: np.ndarray, mode: str) -> ForwardTrace:
    """Run the network on a batch.

    mode="train" normalizes with batch statistics and updates the model's
    running statistics in place; mode="eval" is a pure function of
    (params, x) that normalizes with the stored running statistics.
    """
    if mode not in (MODE_TRAIN, MODE_EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    params = model.params
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input batch must be finite")
    caches: dict = {}

    if params.arch == ARCH_CNN:
        m = params.meta
        if x.ndim != 3 or x.shape[1] != m["in_channels"] or x.shape[2] != m["in_length"]:
            raise ValueError(
                f"expected input (B, {m['in_channels']}, {m['in_length']}), got {x.shape}")
        h = x
        for blk in ("1", "2"):
            h, cols = _conv1d(h, params.get(f"conv{blk}.w"), params.get(f"conv{blk}.b"))
            caches[f"conv{blk}"] = cols
            h, bn_cache, (nm, nv) = _bn_forward(
                h, params.get(f"bn{blk}.gamma"), params.get(f"bn{blk}.beta"), mode,
                model.bn[f"bn{blk}.running_mean"], model.bn[f"bn{blk}.running_var"])
            caches[f"bn{blk}"] = bn_cache
            if mode == MODE_TRAIN:
                model.bn[f"bn{blk}.running_mean"] = nm
                model.bn[f"bn{blk}.running_var"] = nv
            mask = h > 0
            caches[f"relu{blk}"] = mask
            h = h * mask
            h, pool_cache = _maxpool2(h)
            caches[f"pool{blk}"] = pool_cache
        caches["conv_out_shape"] = h.shape
        h = h.reshape(h.shape[0], -1)
        caches["fc1.in"] = h
        h = h @ params.get("fc1.w") + params.get("fc1.b")
        mask = h > 0
        caches["relu_fc1"] = mask
        h = h * mask
        caches["fc2.in"] = h
        h = h @ params.get("fc2.w") + params.get("fc2.b")
        mask = h > 0
        caches["relu_fc2"] = mask
        features = h * mask
    elif params.arch == ARCH_MLP:
        m = params.meta
        if x.ndim == 3:
            x = x.reshape(x.shape[0], -1)
        if x.ndim != 2 or x.shape[1] != m["in_dim"]:
            raise ValueError(f"expected input with {m['in_dim']} values per sample, got {x.shape}")
        caches["fc1.in"] = x
        h = x @ params.get("fc1.w") + params.get("fc1.b")
        mask = h > 0
        caches["relu_fc1"] = mask
        h = h * mask
        caches["fc2.in"] = h
        features = h @ params.get("fc2.w") + params.get("fc2.b")
    else:
        raise ValueError(f"unknown architecture {params.arch!r}")

    caches["head.in"] = features
    logits = features @ params.get("head.w") + params.get("head.b")
    return ForwardTrace(params.arch, mode, logits, features, caches,
                        tuple(l.values.shape for l in params.layers))


# --------------------------------------------------------------- backward

def _conv1d_backward(dout, cols, w, in_shape):
    b, c, l = in_shape
    f, _, k = w.shape
    lout = dout.shape[2]
    w_mat = w.reshape(f, -1)
    dw = np.einsum("bfl,blc->fc", dout, cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2))
    dcols = np.einsum("bfl,fc->blc", dout, w_mat).reshape(b, lout, c, k)
    dx = np.zeros((b, c, l))
    for kk in range(k):
        dx[:, :, kk:kk + lout] += dcols[:, :, :, kk].transpose(0, 2, 1)
    return dx, dw, db


def _bn_backward(dout, cache, gamma, mode):
    xhat, inv_std = cache
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if mode == MODE_EVAL:
        dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta
    n = dout.shape[0] * dout.shape[2]
    s1 = dxhat.sum(axis=(0, 2), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
    dx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def _maxpool2_backward(dout, cache):
    arg, l = cache
    b, f, lp = dout.shape
    dxv = np.zeros((b, f, lp, POOL_WIDTH))
    np.put_along_axis(dxv, arg[..., None], dout[..., None], axis=3)
    dx = np.zeros((b, f, l))
    dx[:, :, :lp * POOL_WIDTH] = dxv.reshape(b, f, lp * POOL_WIDTH)
    return dx


def backward(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray,
             grad_features: np.ndarray | None = None) -> ModelParams:
    """Backpropagate upstream gradients on logits (B, C) and optionally on
    the feature tap (B, H); returns gradients with the parameter structure.

    The feature gradient enters at the tap itself, downstream of the head,
    so a features-only upstream leaves the head weights untouched.
    """
    if trace.layer_shapes != tuple(l.values.shape for l in params.layers) \
            or trace.arch != params.arch:
        raise ValueError("trace does not belong to these parameters")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != trace.logits.shape:
        raise ValueError(
            f"grad_logits shape {grad_logits.shape} != logits {trace.logits.shape}")
    if grad_features is None:
        grad_features = np.zeros_like(trace.features)
    grad_features = np.asarray(grad_features, dtype=np.float64)
    if grad_features.shape != trace.features.shape:
        raise ValueError(
            f"grad_features shape {grad_features.shape} != features {trace.features.shape}")

    caches = trace.caches
    g: dict[str, np.ndarray] = {}

    feat_in = caches["head.in"]
    g["head.w"] = feat_in.T @ grad_logits
    g["head.b"] = grad_logits.sum(axis=0)
    dh = grad_logits @ params.get("head.w").T + grad_features

    if params.arch == ARCH_CNN:
        dh = dh * caches["relu_fc2"]
        g["fc2.w"] = caches["fc2.in"].T @ dh
        g["fc2.b"] = dh.sum(axis=0)
        dh = dh @ params.get("fc2.w").T
        dh = dh * caches["relu_fc1"]
        g["fc1.w"] = caches["fc1.in"].T @ dh
        g["fc1.b"] = dh.sum(axis=0)
        dh = dh @ params.get("fc1.w").T
        dh = dh.reshape(caches["conv_out_shape"])
        for blk, prev_cols in (("2", caches["conv1"]), ("1", None)):
            dh = _maxpool2_backward(dh, caches[f"pool{blk}"])
            dh = dh * caches[f"relu{blk}"]
            dh, dgamma, dbeta = _bn_backward(dh, caches[f"bn{blk}"],
                                             params.get(f"bn{blk}.gamma"), trace.mode)
            g[f"bn{blk}.gamma"] = dgamma
            g[f"bn{blk}.beta"] = dbeta
            cols = caches[f"conv{blk}"]
            w = params.get(f"conv{blk}.w")
            if blk == "2":
                b, lout_prev = prev_cols.shape[0], caches["pool1"][0].shape[2]
                in_shape = (b, CONV_FILTERS[0], lout_prev)
            else:
                m = params.meta
                in_shape = (dh.shape[0], m["in_channels"], m["in_length"])
            dh, dw, db = _conv1d_backward(dh, cols, w, in_shape)
            g[f"conv{blk}.w"] = dw
            g[f"conv{blk}.b"] = db
    elif params.arch == ARCH_MLP:
        g["fc2.w"] = caches["fc2.in"].T @ dh
        g["fc2.b"] = dh.sum(axis=0)
        dh = dh @ params.get("fc2.w").T
        dh = dh * caches["relu_fc1"]
        g["fc1.w"] = caches["fc1.in"].T @ dh
        g["fc1.b"] = dh.sum(axis=0)
    else:
        raise ValueError(f"unknown architecture {params.arch!r}")

    return ModelParams(params.arch,
                       [LayerParam(l.name, g[l.name]) for l in params.layers],
                       dict(params.meta))


# ------------------------------------------------------------- checkpoint

def _pack_record(kind: int, name: str, values: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<BH", kind, len(nb)) + nb
    dims = struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape)
    return head + dims + np.ascontiguousarray(values, dtype="<f8").tobytes()


def save_checkpoint(model: Model, path: str) -> None:
    """Serialize parameters and running statistics: versioned magic header,
    architecture tag, meta block, then length-prefixed little-endian float64
    layer records."""
    params = model.params
    arch_b = params.arch.encode("utf-8")
    meta_b = json.dumps(params.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", len(arch_b)), arch_b,
           struct.pack("<I", len(meta_b)), meta_b,
           struct.pack("<I", len(params.layers) + len(model.bn))]
    for l in params.layers:
        out.append(_pack_record(0, l.name, l.values))
    for name in sorted(model.bn):
        out.append(_pack_record(1, name, model.bn[name]))
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (arch_len,) = r.unpack("<H")
    arch = r.take(arch_len).decode("utf-8")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"unreadable meta block: {e}") from e
    (n_records,) = r.unpack("<I")
    layers: list[LayerParam] = []
    bn: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        kind, name_len = r.unpack("<BH")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(dims).copy()
        if kind == 0:
            layers.append(LayerParam(name, values))
        elif kind == 1:
            bn[name] = values
        else:
            raise CheckpointError(f"unknown record kind {kind} for layer {name!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")

    model = Model(ModelParams(arch, layers, meta), bn)
    _validate_structure(model)
    return model


def _validate_structure(model: Model) -> None:
    """Rebuild a skeleton from the stored meta and compare layer layout;
    catches structurally corrupt files with intact framing."""
    m = model.params.meta
    try:
        if model.params.arch == ARCH_CNN:
            ref = build_cnn_har(m["in_channels"], m["in_length"], m["num_classes"], seed=0)
        elif model.params.arch == ARCH_MLP:
            ref = build_mlp(m["in_dim"], m["num_classes"], seed=0)
        else:
            raise CheckpointError(f"unknown architecture {model.params.arch!r}")
    except (KeyError, ArchitectureError) as e:
        raise CheckpointError(f"inconsistent checkpoint meta: {e}") from e
    got = [(l.name, l.shape) for l in model.params.layers]
    want = [(l.name, l.shape) for l in ref.params.layers]
    if got != want:
        raise CheckpointError(f"layer layout mismatch: {got} != {want}")
    if sorted(model.bn) != sorted(ref.bn):
        raise CheckpointError("running-statistics records do not match the architecture")
