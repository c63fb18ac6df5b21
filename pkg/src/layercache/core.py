"""Small float32 tensor engine: layer forward/backward, distillation loss,
optimizers, training loop and per-layer FLOPs.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 with a leading
batch axis.  Shapes passed around as "per-sample shapes" omit that axis.

All matrix products go through stacked (per-sample) matmuls so a sample's
activations do not depend on which other samples share its batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

KINDS = (
    "input",
    "dense",
    "conv2d",
    "relu",
    "maxpool2d",
    "flatten",
    "global-average-pool",
    "softmax",
    "log-softmax",
    "batchnorm-frozen",
    "dropout",
    "add",
)
PARAMETERIZED = ("dense", "conv2d", "batchnorm-frozen")
# kinds that do nothing (or only apply a frozen transform) at inference time
_INACTIVE_BY_DEFAULT = ("dropout", "batchnorm-frozen")


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LayerSpec:
    kind: str
    config: dict = field(default_factory=dict)
    inference_active: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.inference_active is None:
            self.inference_active = self.kind not in _INACTIVE_BY_DEFAULT

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": dict(self.config),
                "inference_active": self.inference_active}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("config", {})), d.get("inference_active"))

    def __str__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config.items())
        return f"{self.kind}({cfg})"


def dense(in_features: int, units: int) -> LayerSpec:
    return LayerSpec("dense", {"in_features": int(in_features), "units": int(units)})


def conv2d(in_channels, out_channels, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv2d", {"in_channels": int(in_channels), "out_channels": int(out_channels),
                                "kernel": int(kernel), "stride": int(stride), "padding": int(padding)})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(kernel: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", {"kernel": int(kernel), "stride": int(stride or kernel)})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global-average-pool")


def softmax_layer() -> LayerSpec:
    return LayerSpec("softmax")


def log_softmax_layer() -> LayerSpec:
    return LayerSpec("log-softmax")


def batchnorm_frozen(channels: int) -> LayerSpec:
    return LayerSpec("batchnorm-frozen", {"channels": int(channels)})


def dropout(rate: float = 0.5) -> LayerSpec:
    return LayerSpec("dropout", {"rate": float(rate)})


def input_layer(shape: Sequence[int]) -> LayerSpec:
    return LayerSpec("input", {"shape": [int(s) for s in shape]})


def add() -> LayerSpec:
    return LayerSpec("add")


# ---------------------------------------------------------------------------
# shapes and parameters


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def output_shape(layer: LayerSpec, in_shape: Sequence[int]) -> tuple:
    """Per-sample output shape, or ShapeError if ``in_shape`` does not fit."""
    in_shape = tuple(int(s) for s in in_shape)
    c = layer.config
    k = layer.kind

    def bad(expected):
        return ShapeError(f"layer {layer}: expected input shape {expected}, got {in_shape}")

    if k == "input":
        if tuple(c["shape"]) != in_shape:
            raise bad(tuple(c["shape"]))
        return in_shape
    if k == "dense":
        if in_shape != (c["in_features"],):
            raise bad((c["in_features"],))
        return (c["units"],)
    if k == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != c["in_channels"]:
            raise bad((c["in_channels"], "H", "W"))
        ho = _conv_out(in_shape[1], c["kernel"], c["stride"], c["padding"])
        wo = _conv_out(in_shape[2], c["kernel"], c["stride"], c["padding"])
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {layer}: input {in_shape} too small for kernel")
        return (c["out_channels"], ho, wo)
    if k == "maxpool2d":
        if len(in_shape) != 3:
            raise bad(("C", "H", "W"))
        ho = _conv_out(in_shape[1], c["kernel"], c["stride"], 0)
        wo = _conv_out(in_shape[2], c["kernel"], c["stride"], 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {layer}: input {in_shape} too small for pooling window")
        return (in_shape[0], ho, wo)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "global-average-pool":
        if len(in_shape) != 3:
            raise bad(("C", "H", "W"))
        return (in_shape[0],)
    if k in ("softmax", "log-softmax"):
        if len(in_shape) != 1:
            raise bad(("classes",))
        return in_shape
    if k == "batchnorm-frozen":
        if len(in_shape) < 1 or in_shape[0] != c["channels"]:
            raise bad((c["channels"], "..."))
        return in_shape
    # relu, dropout, add
    return in_shape


def param_shapes(layer: LayerSpec) -> list:
    c = layer.config
    if layer.kind == "dense":
        return [(c["in_features"], c["units"]), (c["units"],)]
    if layer.kind == "conv2d":
        k = c["kernel"]
        return [(c["out_channels"], c["in_channels"], k, k), (c["out_channels"],)]
    if layer.kind == "batchnorm-frozen":
        return [(c["channels"],), (c["channels"],)]
    return []


def init_params(layer: LayerSpec, rng: np.random.Generator) -> list:
    """Kaiming-uniform weights, zero biases; identity for frozen batchnorm."""
    shapes = param_shapes(layer)
    if not shapes:
        return []
    if layer.kind == "batchnorm-frozen":
        return [np.ones(shapes[0], DTYPE), np.zeros(shapes[1], DTYPE)]
    w_shape, b_shape = shapes
    fan_in = int(np.prod(w_shape[1:])) if layer.kind == "conv2d" else w_shape[0]
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=w_shape).astype(DTYPE)
    return [w, np.zeros(b_shape, DTYPE)]


def layer_flops(layer: LayerSpec, in_shape: Sequence[int]) -> int:
    """FLOPs for one sample; one multiply-accumulate counts as 2."""
    out = output_shape(layer, in_shape)
    n_in = int(np.prod(in_shape))
    n_out = int(np.prod(out))
    c = layer.config
    k = layer.kind
    if k == "dense":
        return 2 * c["in_features"] * c["units"]
    if k == "conv2d":
        return 2 * c["kernel"] ** 2 * c["in_channels"] * c["out_channels"] * out[1] * out[2]
    if k in ("softmax", "log-softmax"):
        return 5 * n_out
    if k == "maxpool2d":
        return c["kernel"] ** 2 * n_out
    if k in ("relu", "batchnorm-frozen", "global-average-pool", "add"):
        return n_in
    # input, flatten, dropout move no numbers
    return 0


def sequence_flops(layers: Sequence[LayerSpec], in_shape) -> int:
    total = 0
    shape = tuple(in_shape)
    for layer in layers:
        total += layer_flops(layer, shape)
        shape = output_shape(layer, shape)
    return total


# ---------------------------------------------------------------------------
# numerics


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _im2col(x, k, s, p):
    """(B, C, H, W) -> (B, Ho*Wo, C*k*k) patch matrix, plus (Ho, Wo)."""
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, ch, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, ch * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, k, s, p, ho, wo):
    b, ch, h, w = x_shape
    d = dcols.reshape(b, ho, wo, ch, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((b, ch, h + 2 * p, w + 2 * p), DTYPE)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[:, :, i, j]
    if p:
        dx = dx[:, :, p:p + h, p:p + w]
    return dx


def _check_input(layer, x):
    if x.ndim < 1:
        raise ShapeError(f"layer {layer}: input has no batch axis")
    output_shape(layer, x.shape[1:])


def forward(layer: LayerSpec, x: np.ndarray, params: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Inference forward pass of one layer on a batch."""
    return forward_train(layer, x, params)[0]


def forward_train(layer, x, params=()):
    """Forward pass that also returns the context needed by :func:`backward`."""
    x = np.asarray(x, dtype=DTYPE)
    _check_input(layer, x)
    k = layer.kind
    c = layer.config
    if k in ("input", "dropout", "add"):
        return x, None
    if k == "dense":
        w, b = params
        y = np.matmul(x[:, None, :], w)[:, 0, :] + b
        return y, x
    if k == "conv2d":
        w, b = params
        ks, s, p = c["kernel"], c["stride"], c["padding"]
        cols, ho, wo = _im2col(x, ks, s, p)
        wm = w.reshape(w.shape[0], -1).T
        y = np.matmul(cols, wm) + b
        y = np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(x.shape[0], w.shape[0], ho, wo)
        return y, (x.shape, cols, ho, wo)
    if k == "relu":
        y = np.maximum(x, 0)
        return y, x > 0
    if k == "maxpool2d":
        ks, s = c["kernel"], c["stride"]
        win = sliding_window_view(x, (ks, ks), axis=(2, 3))[:, :, ::s, ::s]
        b, ch, ho, wo = win.shape[:4]
        flat = win.reshape(b, ch, ho, wo, ks * ks)
        idx = np.argmax(flat, axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if k == "global-average-pool":
        return x.mean(axis=(2, 3), dtype=DTYPE), x.shape
    if k == "softmax":
        y = softmax(x)
        return y, y
    if k == "log-softmax":
        y = log_softmax(x)
        return y, y
    if k == "batchnorm-frozen":
        scale, shift = params
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        y = x * scale.reshape(bshape) + shift.reshape(bshape)
        return y.astype(DTYPE), x
    raise ValueError(f"no forward rule for {k}")


def backward(layer: LayerSpec, params, ctx, gy: np.ndarray):
    """Return (grad wrt input, list of grads wrt params)."""
    k = layer.kind
    c = layer.config
    gy = np.asarray(gy, dtype=DTYPE)
    if k in ("input", "dropout", "add"):
        return gy, []
    if k == "dense":
        w, _ = params
        x = ctx
        gx = np.matmul(gy[:, None, :], w.T)[:, 0, :]
        return gx, [x.T @ gy, gy.sum(axis=0)]
    if k == "conv2d":
        w, _ = params
        x_shape, cols, ho, wo = ctx
        g = np.ascontiguousarray(gy.reshape(gy.shape[0], gy.shape[1], -1).transpose(0, 2, 1))
        wm = w.reshape(w.shape[0], -1)
        gw = np.tensordot(g, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gb = g.sum(axis=(0, 1))
        dcols = np.matmul(g, wm)
        gx = _col2im(dcols, x_shape, c["kernel"], c["stride"], c["padding"], ho, wo)
        return gx, [gw.astype(DTYPE), gb]
    if k == "relu":
        return gy * ctx, []
    if k == "maxpool2d":
        x_shape, idx = ctx
        ks, s = c["kernel"], c["stride"]
        b, ch, ho, wo = idx.shape
        gx = np.zeros(x_shape, DTYPE)
        di, dj = np.divmod(idx, ks)
        bi, ci, hi, wi = np.indices(idx.shape)
        np.add.at(gx, (bi, ci, hi * s + di, wi * s + dj), gy)
        return gx, []
    if k == "flatten":
        return gy.reshape(ctx), []
    if k == "global-average-pool":
        b, ch, h, w = ctx
        gx = np.broadcast_to(gy[:, :, None, None] / (h * w), ctx)
        return np.ascontiguousarray(gx, dtype=DTYPE), []
    if k == "softmax":
        y = ctx
        return y * (gy - np.sum(gy * y, axis=-1, keepdims=True)), []
    if k == "log-softmax":
        p = np.exp(ctx)
        return gy - p * np.sum(gy, axis=-1, keepdims=True), []
    if k == "batchnorm-frozen":
        scale, _ = params
        x = ctx
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        red = (0,) + tuple(range(2, x.ndim))
        return gy * scale.reshape(bshape), [np.sum(gy * x, axis=red), np.sum(gy, axis=red)]
    raise ValueError(f"no backward rule for {k}")


def kl_div_loss(student_log_pd, teacher_pd, atol: float = 1e-5):
    """Batch-mean KL(teacher || student).

    ``student_log_pd`` holds log-probabilities.  The returned gradient is taken
    with respect to the logits that produced them through a log-softmax, i.e.
    ``(softmax(student) - teacher) / batch``.
    """
    lq = np.asarray(student_log_pd, dtype=DTYPE)
    p = np.asarray(teacher_pd, dtype=DTYPE)
    if lq.shape != p.shape or lq.ndim != 2:
        raise ShapeError(f"kl_div_loss: student {lq.shape} vs teacher {p.shape}")
    if not (np.all(np.isfinite(lq)) and np.all(np.isfinite(p))):
        raise ValueError("kl_div_loss: non-finite entries")
    sums = p.sum(axis=1, dtype=np.float64)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValueError(f"kl_div_loss: teacher row {bad[0]} sums to {sums[bad[0]]:.7f}")
    p64 = p.astype(np.float64)
    plogp = np.where(p64 > 0, p64 * np.log(np.where(p64 > 0, p64, 1.0)), 0.0)
    n = p.shape[0]
    loss = float(np.sum(plogp - p64 * lq) / n)
    grad = ((np.exp(lq) - p) / n).astype(DTYPE)
    return max(loss, 0.0), grad


# ---------------------------------------------------------------------------
# sequential networks and training


class Sequential:
    """A chain of layers with its own parameters."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape, params=None, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(output_shape(layer, self.shapes[-1]))
        if params is None:
            rng = np.random.default_rng(seed)
            params = [init_params(layer, rng) for layer in self.layers]
        self.params = [[np.asarray(p, dtype=DTYPE) for p in ps] for ps in params]
        for layer, ps in zip(self.layers, self.params):
            got = [p.shape for p in ps]
            if got != [tuple(s) for s in param_shapes(layer)]:
                raise ShapeError(f"layer {layer}: parameter shapes {got} != {param_shapes(layer)}")

    @property
    def output_shape(self):
        return self.shapes[-1]

    def flops(self) -> int:
        return sequence_flops(self.layers, self.input_shape)

    def copy_params(self):
        return [[p.copy() for p in ps] for ps in self.params]

    def _head(self):
        """Index where the trailing (log-)softmax starts, or len(layers)."""
        if self.layers and self.layers[-1].kind in ("softmax", "log-softmax"):
            return len(self.layers) - 1
        return len(self.layers)

    def forward(self, x, upto=None):
        x = np.asarray(x, dtype=DTYPE)
        for layer, ps in zip(self.layers[:upto], self.params[:upto]):
            x = forward(layer, x, ps)
        return x

    def logits(self, x):
        """Output of the last layer before the trailing (log-)softmax."""
        return self.forward(x, upto=self._head())

    def loss_and_grads(self, x, teacher):
        head = self._head()
        ctxs = []
        h = np.asarray(x, dtype=DTYPE)
        for layer, ps in zip(self.layers[:head], self.params[:head]):
            h, ctx = forward_train(layer, h, ps)
            ctxs.append(ctx)
        if not np.all(np.isfinite(h)):
            raise TrainingDiverged("non-finite logits")
        loss, g = kl_div_loss(log_softmax(h), teacher)
        grads = [None] * head
        for i in range(head - 1, -1, -1):
            g, grads[i] = backward(self.layers[i], self.params[i], ctxs[i], g)
        return loss, grads

    def eval_loss(self, x, teacher, chunk: int = 1024) -> float:
        total = 0.0
        n = len(x)
        for i in range(0, n, chunk):
            xb = x[i:i + chunk]
            z = self.logits(xb)
            if not np.all(np.isfinite(z)):
                raise TrainingDiverged("non-finite logits")
            loss, _ = kl_div_loss(log_softmax(z), teacher[i:i + chunk])
            total += loss * len(xb)
        return total / n


@dataclass
class TrainConfig:
    lr: float = 1e-2
    optimizer: str = "adam"
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def to_dict(self):
        return dict(lr=self.lr, optimizer=self.optimizer, batch_size=self.batch_size,
                    max_epochs=self.max_epochs, patience=self.patience, seed=self.seed)


class _Optimizer:
    def __init__(self, kind, lr, params, momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.lr, self.momentum, self.betas, self.eps = kind, lr, momentum, betas, eps
        self.m = [[np.zeros_like(p) for p in ps] for ps in params]
        self.v = [[np.zeros_like(p) for p in ps] for ps in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        for ps, gs, ms, vs in zip(params, grads, self.m, self.v):
            for p, g, m, v in zip(ps, gs, ms, vs):
                if self.kind == "sgd-momentum":
                    m *= self.momentum
                    m += g
                    p -= DTYPE(self.lr) * m
                else:
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    mhat = m / (1 - b1 ** self.t)
                    vhat = v / (1 - b2 ** self.t)
                    p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(DTYPE)


@dataclass
class TrainResult:
    params: list
    train_loss: list
    val_loss: list
    best_epoch: int  # 0 means the initial weights were kept


def train(net: Sequential, train_data, cfg: TrainConfig, val_data=None,
          trainable: Sequence[int] | None = None) -> TrainResult:
    """Minimise KL(teacher || net) with minibatches and early stopping.

    ``train_data`` and ``val_data`` are ``(inputs, teacher_pd)`` pairs.  Only
    the layers listed in ``trainable`` (default: all) are updated.  ``net`` is
    left untouched; the weights with the lowest validation loss are returned.
    """
    x, t = (np.asarray(a, dtype=DTYPE) for a in train_data)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(t):
        raise ShapeError(f"{len(x)} inputs vs {len(t)} teacher rows")
    if val_data is None:
        val_data = (x, t)
    vx, vt = (np.asarray(a, dtype=DTYPE) for a in val_data)

    work = Sequential(net.layers, net.input_shape, net.copy_params())
    frozen = set(range(len(net.layers))) - set(trainable if trainable is not None
                                                 else range(len(net.layers)))
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg.optimizer, cfg.lr, work.params)
    best = work.copy_params()
    best_loss = work.eval_loss(vx, vt)
    best_epoch = 0
    history, val_history = [], []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads = work.loss_and_grads(x[idx], t[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={cfg.lr})")
            grads = grads + [[] for _ in range(len(work.layers) - len(grads))]
            for j in frozen:
                grads[j] = [np.zeros_like(p) for p in work.params[j]]
            opt.step(work.params, grads)
            if not all(np.all(np.isfinite(p)) for ps in work.params for p in ps):
                raise TrainingDiverged(f"non-finite weights at epoch {epoch} (lr={cfg.lr})")
            total += loss * len(idx)
        history.append(total / len(x))
        vloss = work.eval_loss(vx, vt)
        if not math.isfinite(vloss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch} (lr={cfg.lr})")
        val_history.append(vloss)
        if vloss < best_loss:
            best_loss, best, best_epoch, stale = vloss, work.copy_params(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best, history, val_history, best_epoch)
