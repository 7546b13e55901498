"""CNN + multi-head attention MIL network with hand-written backprop.

A bag of windowed feature rows (N x 56) passes through three 1D conv blocks
(kernel 3, 128 filters, group norm with 8 groups, relu, inverted dropout;
block 3 adds a residual from block 2 before its dropout), then four parallel
attention heads pool instances into a concatenated 512-dim bag vector, and a
3-layer MLP produces one logit. Forward, backward, the optimizer, and the
gradient checker are all implemented directly on numpy arrays: training runs
in single precision, finite-difference verification in double precision.
Every step consumes exactly one bag because bags have variable length.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyBag, NoPositiveBags, NoUsableDays, StaleCache
from .validation import roc_auc

N_INPUT_CHANNELS = 56
N_FILTERS = 128
GN_GROUPS = 8
GN_EPS = 1e-5
N_HEADS = 4
ATTN_DIM = 64
BAG_DIM = N_HEADS * N_FILTERS  # 512
MLP_DIMS = (64, 32)
PARAM_COUNT = 189185

# canonical tensor order: initialization draws, checkpoint layout, and the
# gradient dict all follow this exact sequence
TENSOR_SHAPES: dict[str, tuple[int, ...]] = {
    "conv1_w": (N_FILTERS, N_INPUT_CHANNELS, 3),
    "conv1_b": (N_FILTERS,),
    "gn1_gamma": (N_FILTERS,),
    "gn1_beta": (N_FILTERS,),
    "conv2_w": (N_FILTERS, N_FILTERS, 3),
    "conv2_b": (N_FILTERS,),
    "gn2_gamma": (N_FILTERS,),
    "gn2_beta": (N_FILTERS,),
    "conv3_w": (N_FILTERS, N_FILTERS, 3),
    "conv3_b": (N_FILTERS,),
    "gn3_gamma": (N_FILTERS,),
    "gn3_beta": (N_FILTERS,),
    "attn_w": (N_HEADS, ATTN_DIM, N_FILTERS),
    "attn_b": (N_HEADS, ATTN_DIM),
    "attn_v": (N_HEADS, ATTN_DIM),
    "mlp1_w": (MLP_DIMS[0], BAG_DIM),
    "mlp1_b": (MLP_DIMS[0],),
    "mlp2_w": (MLP_DIMS[1], MLP_DIMS[0]),
    "mlp2_b": (MLP_DIMS[1],),
    "mlp3_w": (1, MLP_DIMS[1]),
    "mlp3_b": (1,),
}

# fan-in used for the uniform(+-sqrt(6/fan_in)) draw of each weight tensor
_WEIGHT_FAN_IN = {
    "conv1_w": N_INPUT_CHANNELS * 3,
    "conv2_w": N_FILTERS * 3,
    "conv3_w": N_FILTERS * 3,
    "attn_w": N_FILTERS,
    "attn_v": ATTN_DIM,
    "mlp1_w": BAG_DIM,
    "mlp2_w": MLP_DIMS[0],
    "mlp3_w": MLP_DIMS[1],
}


@dataclass
class MilConfig:
    dropout_block12: float = 0.4
    dropout_block3: float = 0.2
    dropout_mlp: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    learning_rate: float = 1e-3
    epochs: int = 100
    patience: int = 10
    grad_clip_norm: float = 5.0
    pos_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for rate in (self.dropout_block12, self.dropout_block3, self.dropout_mlp):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be > 0")


class MilParams:
    """Named tensors plus a version counter used to invalidate stale caches."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        if set(tensors) != set(TENSOR_SHAPES):
            missing = set(TENSOR_SHAPES) ^ set(tensors)
            raise ValueError(f"tensor name mismatch: {sorted(missing)}")
        for name, shape in TENSOR_SHAPES.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.tensors = {name: tensors[name] for name in TENSOR_SHAPES}
        self.version = 0

    @property
    def dtype(self):
        return self.tensors["conv1_w"].dtype

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "MilParams":
        return MilParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "MilParams":
        return MilParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_mil_params(seed: int, dtype=np.float32) -> MilParams:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases, unit gammas.

    Weight tensors are drawn in the canonical TENSOR_SHAPES order so a seed
    pins every parameter bit.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in TENSOR_SHAPES.items():
        if name in _WEIGHT_FAN_IN:
            bound = math.sqrt(6.0 / _WEIGHT_FAN_IN[name])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith("_gamma"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return MilParams(tensors)


# Layer primitives -------------------------------------------------------------

def _stack_taps(x: np.ndarray) -> np.ndarray:
    """(C, N) -> (3C, N) with row block t holding x shifted by tap t - 1.

    Folding the three taps into one matrix turns the convolution and both of
    its backward products into single matrix multiplies.
    """
    c_in, n = x.shape
    stacked = np.zeros((3 * c_in, n), dtype=x.dtype)
    stacked[:c_in, 1:] = x[:, : n - 1]        # tap 0 sees the left neighbor
    stacked[c_in : 2 * c_in] = x              # tap 1 sees the position itself
    stacked[2 * c_in :, : n - 1] = x[:, 1:]   # tap 2 sees the right neighbor
    return stacked


def conv1d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 kernel-3 convolution over (C_in, N) with one zero pad per end."""
    # column block t of the flattened kernel multiplies tap-t rows
    w2 = np.concatenate([w[:, :, 0], w[:, :, 1], w[:, :, 2]], axis=1)
    return w2 @ _stack_taps(x) + b[:, None]


def _conv1d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    c_in, n = x.shape
    stacked = _stack_taps(x)
    dw2 = dy @ stacked.T  # (C_out, 3C_in)
    dw = np.empty_like(w)
    for t in range(3):
        dw[:, :, t] = dw2[:, t * c_in : (t + 1) * c_in]
    w2 = np.concatenate([w[:, :, 0], w[:, :, 1], w[:, :, 2]], axis=1)
    dstacked = w2.T @ dy  # (3C_in, N)
    dx = dstacked[c_in : 2 * c_in].copy()
    dx[:, : n - 1] += dstacked[:c_in, 1:]
    dx[:, 1:] += dstacked[2 * c_in :, : n - 1]
    db = dy.sum(axis=1)
    return dw, db, dx


def group_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
    groups: int = GN_GROUPS, eps: float = GN_EPS,
) -> np.ndarray:
    out, _ = _group_norm_forward(x, gamma, beta, groups, eps)
    return out


def _group_norm_forward(x, gamma, beta, groups=GN_GROUPS, eps=GN_EPS):
    c, n = x.shape
    per = c // groups
    xg = x.reshape(groups, per * n)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = ((xg - mu) * inv).reshape(c, n)
    out = gamma[:, None] * xhat + beta[:, None]
    return out, (xhat, inv, gamma, groups)


def _group_norm_backward(dout, cache):
    xhat, inv, gamma, groups = cache
    c, n = xhat.shape
    per = c // groups
    dgamma = (dout * xhat).sum(axis=1)
    dbeta = dout.sum(axis=1)
    dxhat = (dout * gamma[:, None]).reshape(groups, per * n)
    xh = xhat.reshape(groups, per * n)
    m = per * n
    # batch-norm style backward over each group's m entries
    term = dxhat - dxhat.mean(axis=1, keepdims=True) - xh * (dxhat * xh).mean(axis=1, keepdims=True)
    dx = (inv * term).reshape(c, n)
    return dx, dgamma, dbeta


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max())
    return e / e.sum()


def weighted_bce_logit(z: float, y: float, w_pos: float) -> float:
    """w_pos*y*softplus(-z) + (1-y)*softplus(z) with overflow-safe softplus."""

    def softplus(v: float) -> float:
        return math.log1p(math.exp(-abs(v))) + max(v, 0.0)

    return w_pos * y * softplus(-z) + (1.0 - y) * softplus(z)


def bce_logit_grad(z: float, y: float, w_pos: float) -> float:
    sig = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return w_pos * y * (sig - 1.0) + (1.0 - y) * sig


@dataclass
class BagOutput:
    logit: float
    attention: np.ndarray  # (4, N), rows sum to 1
    bag_repr: np.ndarray  # (512,)


def _dropout_mask(rng, shape, rate, dtype):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return ((rng.random(shape) >= rate) / keep).astype(dtype)


def forward(
    params: MilParams,
    cfg: MilConfig,
    bag: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the network on one bag; returns (BagOutput, cache for backward)."""
    bag = np.asarray(bag)
    if bag.ndim != 2 or bag.shape[1] != N_INPUT_CHANNELS:
        raise ValueError(f"bag must be (N, {N_INPUT_CHANNELS}), got {bag.shape}")
    if bag.shape[0] == 0:
        raise EmptyBag("bag has no instances")
    if train_mode and rng is None:
        raise ValueError("train_mode forward requires an rng for dropout")

    t = params.tensors
    dt = params.dtype
    x = np.ascontiguousarray(bag.T, dtype=dt)  # (56, N)
    n = x.shape[1]

    def drop(h, rate):
        if not train_mode:
            return h, None
        mask = _dropout_mask(rng, h.shape, rate, dt)
        return (h if mask is None else h * mask), mask

    pre1 = conv1d_same(x, t["conv1_w"], t["conv1_b"])
    gn1, gn1_cache = _group_norm_forward(pre1, t["gn1_gamma"], t["gn1_beta"])
    r1 = np.maximum(gn1, 0)
    h1, mask1 = drop(r1, cfg.dropout_block12)

    pre2 = conv1d_same(h1, t["conv2_w"], t["conv2_b"])
    gn2, gn2_cache = _group_norm_forward(pre2, t["gn2_gamma"], t["gn2_beta"])
    r2 = np.maximum(gn2, 0)
    h2, mask2 = drop(r2, cfg.dropout_block12)

    pre3 = conv1d_same(h2, t["conv3_w"], t["conv3_b"])
    gn3, gn3_cache = _group_norm_forward(pre3, t["gn3_gamma"], t["gn3_beta"])
    r3 = np.maximum(gn3, 0)
    res = r3 + h2  # residual joins before block-3 dropout
    h3, mask3 = drop(res, cfg.dropout_block3)

    attn = np.empty((N_HEADS, n), dtype=dt)
    us = []
    for k in range(N_HEADS):
        u = np.tanh(t["attn_w"][k] @ h3 + t["attn_b"][k][:, None])  # (64, N)
        s = t["attn_v"][k] @ u  # (N,)
        attn[k] = _softmax(s)
        us.append(u)
    bag_repr = (h3 @ attn.T).T.reshape(BAG_DIM)  # head-major concat of (128,) blocks

    z1 = t["mlp1_w"] @ bag_repr + t["mlp1_b"]
    a1 = np.maximum(z1, 0)
    d1, mask_m1 = drop(a1, cfg.dropout_mlp)
    z2 = t["mlp2_w"] @ d1 + t["mlp2_b"]
    a2 = np.maximum(z2, 0)
    d2, mask_m2 = drop(a2, cfg.dropout_mlp)
    logit = float((t["mlp3_w"] @ d2 + t["mlp3_b"])[0])

    cache = {
        "version": params.version,
        "params": params,
        "x": x,
        "gn1": gn1_cache, "gn1_out": gn1, "h1": h1, "mask1": mask1,
        "gn2": gn2_cache, "gn2_out": gn2, "h2": h2, "mask2": mask2,
        "gn3": gn3_cache, "gn3_out": gn3, "h3": h3, "mask3": mask3,
        "us": us, "attn": attn, "bag_repr": bag_repr,
        "z1": z1, "d1": d1, "mask_m1": mask_m1,
        "z2": z2, "d2": d2, "mask_m2": mask_m2,
    }
    return BagOutput(logit=logit, attention=attn, bag_repr=bag_repr), cache


def backward(cache: dict, d_logit: float) -> dict[str, np.ndarray]:
    """Exact gradients of the loss for every parameter tensor."""
    params: MilParams = cache["params"]
    if cache["version"] != params.version:
        raise StaleCache("parameters changed since this forward pass")
    t = params.tensors
    dt = params.dtype
    g = {name: np.zeros(shape, dtype=dt) for name, shape in TENSOR_SHAPES.items()}
    dz = np.asarray(d_logit, dtype=dt)

    # MLP head
    d2 = cache["d2"]
    g["mlp3_w"][:] = dz * d2[None, :]
    g["mlp3_b"][:] = dz
    dd2 = dz * t["mlp3_w"][0]
    if cache["mask_m2"] is not None:
        dd2 = dd2 * cache["mask_m2"]
    dz2 = dd2 * (cache["z2"] > 0)
    g["mlp2_w"][:] = np.outer(dz2, cache["d1"])
    g["mlp2_b"][:] = dz2
    dd1 = t["mlp2_w"].T @ dz2
    if cache["mask_m1"] is not None:
        dd1 = dd1 * cache["mask_m1"]
    dz1 = dd1 * (cache["z1"] > 0)
    g["mlp1_w"][:] = np.outer(dz1, cache["bag_repr"])
    g["mlp1_b"][:] = dz1
    dbag = t["mlp1_w"].T @ dz1  # (512,)

    # attention pooling
    h3 = cache["h3"]
    attn = cache["attn"]
    dh3 = np.zeros_like(h3)
    for k in range(N_HEADS):
        dbag_k = dbag[k * N_FILTERS : (k + 1) * N_FILTERS]  # (128,)
        a = attn[k]
        dh3 += np.outer(dbag_k, a)
        da = h3.T @ dbag_k  # (N,)
        ds = a * (da - float(a @ da))  # softmax backward
        u = cache["us"][k]
        g["attn_v"][k] = u @ ds
        dpre = (t["attn_v"][k][:, None] * ds[None, :]) * (1.0 - u * u)  # (64, N)
        g["attn_w"][k] = dpre @ h3.T
        g["attn_b"][k] = dpre.sum(axis=1)
        dh3 += t["attn_w"][k].T @ dpre

    # block 3 (residual joined before dropout)
    dres = dh3 if cache["mask3"] is None else dh3 * cache["mask3"]
    dr3 = dres * (cache["gn3_out"] > 0)
    dpre3, g["gn3_gamma"][:], g["gn3_beta"][:] = _group_norm_backward(dr3, cache["gn3"])
    dw3, db3, dh2 = _conv1d_backward(dpre3, cache["h2"], t["conv3_w"])
    g["conv3_w"][:] = dw3
    g["conv3_b"][:] = db3
    dh2 += dres  # residual branch

    # block 2
    dr2 = dh2 if cache["mask2"] is None else dh2 * cache["mask2"]
    dgn2 = dr2 * (cache["gn2_out"] > 0)
    dpre2, g["gn2_gamma"][:], g["gn2_beta"][:] = _group_norm_backward(dgn2, cache["gn2"])
    dw2, db2, dh1 = _conv1d_backward(dpre2, cache["h1"], t["conv2_w"])
    g["conv2_w"][:] = dw2
    g["conv2_b"][:] = db2

    # block 1
    dr1 = dh1 if cache["mask1"] is None else dh1 * cache["mask1"]
    dgn1 = dr1 * (cache["gn1_out"] > 0)
    dpre1, g["gn1_gamma"][:], g["gn1_beta"][:] = _group_norm_backward(dgn1, cache["gn1"])
    dw1, db1, _ = _conv1d_backward(dpre1, cache["x"], t["conv1_w"])
    g["conv1_w"][:] = dw1
    g["conv1_b"][:] = db1
    return g


# Gradient verification ---------------------------------------------------------

def grad_check(
    params: MilParams,
    cfg: MilConfig,
    bag: np.ndarray,
    y: float,
    step: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in double precision with dropout disabled. At least n_samples
    coordinates are probed, spread over every tensor proportionally to size,
    with a minimum of two per tensor. Relative error uses the symmetric
    denominator max(1e-8, |g_a| + |g_n|).
    """
    p64 = params.astype(np.float64)
    bag64 = np.asarray(bag, dtype=np.float64)

    def loss_now() -> float:
        out, _ = forward(p64, cfg, bag64, train_mode=False)
        return weighted_bce_logit(out.logit, y, cfg.pos_weight)

    out, cache = forward(p64, cfg, bag64, train_mode=False)
    analytic = backward(cache, bce_logit_grad(out.logit, y, cfg.pos_weight))

    rng = np.random.default_rng(seed)
    total = p64.size()
    worst = 0.0
    for name, tensor in p64.tensors.items():
        k = min(tensor.size, max(2, round(n_samples * tensor.size / total) + 1))
        for flat in rng.choice(tensor.size, size=k, replace=False):
            orig = tensor.flat[flat]
            tensor.flat[flat] = orig + step
            lo_hi = loss_now()
            tensor.flat[flat] = orig - step
            lo_lo = loss_now()
            tensor.flat[flat] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            ana = analytic[name].flat[flat]
            rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            worst = max(worst, rel)
    return worst


# Optimizer and training ----------------------------------------------------------

class AdamState:
    def __init__(self, params: MilParams):
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: MilParams, grads: dict[str, np.ndarray], cfg: MilConfig) -> None:
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in params.tensors.items():
            gr = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * gr
            v *= b2
            v += (1.0 - b2) * gr * gr
            p -= (cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)).astype(
                p.dtype
            )
        params.bump()


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class MilModel:
    params: MilParams
    config: MilConfig
    best_epoch: int
    train_log: list[dict] = field(default_factory=list)  # epoch, train_loss, val_auc


def predict_bag(params: MilParams, cfg: MilConfig, bag: np.ndarray) -> float:
    out, _ = forward(params, cfg, bag, train_mode=False)
    z = out.logit
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def predict_subject(model: MilModel, day_bags: Sequence[np.ndarray]) -> float:
    """Mean of per-day probabilities in eval mode."""
    if len(day_bags) == 0:
        raise NoUsableDays("subject has no day bags")
    probs = [predict_bag(model.params, model.config, bag) for bag in day_bags]
    # fsum is exact, so the mean is invariant to day order
    return math.fsum(probs) / len(probs)


def train_mil(
    cfg: MilConfig,
    bags: Sequence[np.ndarray],
    labels: Sequence[float],
    val_subject_bags: Sequence[Sequence[np.ndarray]],
    val_subject_labels: Sequence[float],
) -> MilModel:
    """One-bag-per-step training with early stopping on validation subject AUC.

    Bags carry their subject's label. Validation subjects are scored with the
    day-mean rule after each epoch; training stops once the AUC has not
    strictly improved for `patience` epochs and the best-epoch parameters are
    returned.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(bags) != len(labels):
        raise ValueError("bags and labels length mismatch")
    if not np.any(labels == 1.0):
        raise NoPositiveBags("training set has no positive bags")
    val_labels = np.asarray(val_subject_labels, dtype=np.float64)

    rng = np.random.default_rng(cfg.seed)
    params = init_mil_params(cfg.seed)
    adam = AdamState(params)
    model = MilModel(params=params, config=cfg, best_epoch=0)

    best_auc = -math.inf
    best_params = params.copy()
    best_epoch = 0
    since_best = 0
    log: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(bags))
        total_loss = 0.0
        for i in order:
            out, cache = forward(params, cfg, bags[i], train_mode=True, rng=rng)
            total_loss += weighted_bce_logit(out.logit, labels[i], cfg.pos_weight)
            grads = backward(cache, bce_logit_grad(out.logit, labels[i], cfg.pos_weight))
            clip_global_norm(grads, cfg.grad_clip_norm)
            adam.step(params, grads, cfg)
        val_probs = [
            predict_subject(model, subject_bags) for subject_bags in val_subject_bags
        ]
        val_auc = roc_auc(val_labels, np.asarray(val_probs))
        log.append(
            {"epoch": epoch, "train_loss": float(total_loss) / len(bags), "val_auc": val_auc}
        )
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break

    return MilModel(params=best_params, config=cfg, best_epoch=best_epoch, train_log=log)


# Persistence -----------------------------------------------------------------

def save_mil(model: MilModel, path: Path | str, extras: dict | None = None) -> None:
    """Checkpoint: 8-byte LE header length, JSON header, raw LE tensor bytes."""
    tensors = model.params.tensors
    header = {
        "format": "vibemil-mil-v1",
        "dtype": str(model.params.dtype),
        "tensor_order": list(TENSOR_SHAPES),
        "shapes": {k: list(v) for k, v in TENSOR_SHAPES.items()},
        "config": asdict(model.config),
        "seed": model.config.seed,
        "best_epoch": model.best_epoch,
        "train_log": model.train_log,
        "extras": extras or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in TENSOR_SHAPES:
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())


def load_mil(path: Path | str) -> tuple[MilModel, dict]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        dtype = np.dtype(header["dtype"]).newbyteorder("<")
        tensors = {}
        for name in header["tensor_order"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape))
            raw = fh.read(count * dtype.itemsize)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    params = MilParams({k: v.astype(np.dtype(header["dtype"])) for k, v in tensors.items()})
    cfg = MilConfig(**header["config"])
    model = MilModel(
        params=params,
        config=cfg,
        best_epoch=header["best_epoch"],
        train_log=header.get("train_log", []),
    )
    return model, header.get("extras", {})


def write_mil_log_csv(model: MilModel, path: Path | str, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            for key, value in meta.items():
                fh.write(f"# {key}={value}\n")
        fh.write("epoch,train_loss,val_auc\n")
        for entry in model.train_log:
            fh.write(f"{entry['epoch']},{entry['train_loss']!r},{entry['val_auc']!r}\n")


def export_attention(
    model: MilModel, bag: np.ndarray, subject_id: str, day_index: int
) -> dict:
    out, _ = forward(model.params, model.config, bag, train_mode=False)
    return {
        "subject_id": subject_id,
        "day_index": day_index,
        "n_instances": int(bag.shape[0]),
        "weights": [[float(v) for v in row] for row in out.attention],
    }


def write_attention_json(entries: list[dict], path: Path | str, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "entries": entries}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")
