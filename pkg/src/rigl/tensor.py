"""Dense-tensor engine: FC and conv2d layers, softmax cross-entropy,
backpropagation, SGD with momentum and a finite-difference oracle.

Tensors are float64 numpy arrays.  Images are ``(batch, H, W, C)``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from rigl import kernels
from rigl.arch import CONV, FC, ArchitectureSpec
from rigl.params import MaskedParameter

# Below this density an FC layer runs through the sparse kernels.
SPARSE_DENSITY_THRESHOLD = 0.35


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class StaleCacheError(RuntimeError):
    pass


class Model:
    """A feed-forward stack: ReLU on hidden layers, identity on the output."""

    def __init__(self, arch: ArchitectureSpec, weights, biases):
        if len(weights) != len(arch.layers) or len(biases) != len(arch.layers):
            raise ShapeError("one weight and one bias per layer required")
        self.arch = arch
        self.weights = []
        self.biases = []
        for spec, w, b in zip(arch.layers, weights, biases):
            if not isinstance(w, MaskedParameter):
                w = MaskedParameter(w)
            if w.shape != spec.weight_shape:
                raise ShapeError(f"weight shape {w.shape} != {spec.weight_shape}")
            b = np.array(b if b is not None else np.zeros(spec.num_bias), dtype=np.float64)
            if b.shape != (spec.num_bias,):
                raise ShapeError(f"bias shape {b.shape} != ({spec.num_bias},)")
            self.weights.append(w)
            self.biases.append(b)
        self.revision = 0

    @property
    def num_layers(self):
        return len(self.weights)

    def touch(self):
        """Mark parameters as changed; invalidates outstanding caches."""
        self.revision += 1

    def copy(self):
        return Model(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def get_flat(self):
        """All weights then bias, layer by layer, as one vector."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.values.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def flat_mask(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.mask.reshape(-1))
            parts.append(np.ones(b.size, dtype=bool))
        return np.concatenate(parts)

    def set_flat(self, vector):
        """Load a vector produced by :meth:`get_flat`; masks are left alone."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.num_flat:
            raise ShapeError(f"vector length {vector.size} != {self.num_flat}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w.values[...] = vector[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vector[pos:pos + b.size]
            pos += b.size
        self.touch()

    @property
    def num_flat(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(arch: ArchitectureSpec, seed=0):
    """Dense model with uniform fan-in init U(-sqrt(6/fan_in), sqrt(6/fan_in))
    and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in arch.layers:
        fan_in = spec.fan_in * spec.kernel_w * spec.kernel_h
        bound = math.sqrt(6.0 / fan_in)
        weights.append(MaskedParameter(rng.uniform(-bound, bound, size=spec.weight_shape)))
        biases.append(np.zeros(spec.num_bias))
    return Model(arch, weights, biases)


# --------------------------------------------------------------------------
# layer primitives


def _pad_same(kh, kw):
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return (top, kh - 1 - top), (left, kw - 1 - left)


def _im2col(x, kh, kw):
    (pt, pb), (pl, pr) = _pad_same(kh, kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    b, h, w, c = x.shape
    # (B, H, W, C, kh, kw) -> rows ordered (c, i, j), matching the weight layout
    return np.ascontiguousarray(win).reshape(b * h * w, c * kh * kw)


def _col2im(dcols, x_shape, kh, kw):
    b, h, w, c = x_shape
    (pt, pb), (pl, pr) = _pad_same(kh, kw)
    d = dcols.reshape(b, h, w, c, kh, kw)
    dxp = np.zeros((b, h + kh - 1, w + kw - 1, c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return dxp[:, pt:pt + h, pl:pl + w, :]


def _conv_matrix(values):
    cin, cout, kh, kw = values.shape
    return values.transpose(0, 2, 3, 1).reshape(cin * kh * kw, cout)


def _use_sparse(w, spec, backend):
    if backend == "dense" or spec.kind != FC or w.is_dense:
        return False
    if backend == "sparse":
        return True
    return w.nnz < SPARSE_DENSITY_THRESHOLD * w.size


@dataclass
class Cache:
    revision: int
    model_id: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post_shapes: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    sparse: list = field(default_factory=list)
    dlogits: np.ndarray = None
    weight_decay: float = 0.0
    used: bool = False


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _as_labels(targets, batch):
    y = np.asarray(targets)
    if y.shape[0] != batch:
        raise ShapeError(f"{batch} inputs but {y.shape[0]} targets")
    return y


def predict(model, inputs, backend="auto"):
    """Logits for a batch."""
    logits, _ = _forward_pass(model, inputs, backend, keep=False)
    return logits


def _forward_pass(model, inputs, backend, keep):
    x = np.asarray(inputs, dtype=np.float64)
    arch = model.arch
    if x.ndim == 3:
        x = x[..., None]
    if arch.layers[0].kind == FC:
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != arch.layers[0].fan_in:
            raise ShapeError(f"input has {x.shape[1]} features, expected {arch.layers[0].fan_in}")
    elif x.shape[1:] != arch.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != {arch.input_shape}")
    cache = Cache(model.revision, id(model)) if keep else None
    last = model.num_layers - 1
    for l, (spec, w, b) in enumerate(zip(arch.layers, model.weights, model.biases)):
        sparse = False
        cols = None
        if spec.kind == FC:
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            sparse = _use_sparse(w, spec, backend)
            if sparse:
                idx = w.sparse_index()
                z = kernels.active.spmm(x, idx, w.values.reshape(-1)[idx.flat])
            else:
                z = x @ w.values
        else:
            cols = _im2col(x, spec.kernel_h, spec.kernel_w)
            z = (cols @ _conv_matrix(w.values)).reshape(x.shape[0], x.shape[1], x.shape[2], spec.fan_out)
        if spec.has_bias:
            z = z + b
        if keep:
            cache.inputs.append(x)
            cache.pre.append(z)
            cache.cols.append(cols)
            cache.sparse.append(sparse)
        a = z if l == last else np.maximum(z, 0.0)
        if spec.pool > 1:
            p = spec.pool
            n, h, ww, c = a.shape
            a = a.reshape(n, h // p, p, ww // p, p, c).mean(axis=(2, 4))
        x = a
    return x, cache


def l2_penalty(model, weight_decay):
    if not weight_decay:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.dot(w.values.reshape(-1), w.values.reshape(-1)))
                                    for w in model.weights)


def forward(model, batch_inputs, batch_targets, weight_decay=0.0, loss="xent", backend="auto"):
    """Mean loss over the batch plus ``0.5 * weight_decay * ||W||^2``.

    ``loss="xent"`` takes integer labels; ``loss="mse"`` takes real targets
    of the output shape and uses ``0.5 * ||out - y||^2`` per sample.
    ``backend`` is ``"auto"``, ``"dense"`` or ``"sparse"``.
    Returns ``(loss, cache)``.
    """
    logits, cache = _forward_pass(model, batch_inputs, backend, keep=True)
    n = logits.shape[0]
    y = _as_labels(batch_targets, n)
    if loss == "xent":
        logp = _log_softmax(logits)
        data_loss = -float(np.mean(logp[np.arange(n), y]))
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        cache.dlogits = d / n
    elif loss == "mse":
        y = np.asarray(y, dtype=np.float64).reshape(logits.shape)
        diff = logits - y
        data_loss = 0.5 * float(np.sum(diff * diff)) / n
        cache.dlogits = diff / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    total = data_loss + l2_penalty(model, weight_decay)
    if not math.isfinite(total):
        raise NumericalError(f"non-finite loss {total}")
    cache.weight_decay = weight_decay
    return total, cache


def backward(model, cache, dense=True):
    """Gradients ``[(dW, db), ...]`` shaped like each layer's parameters.

    With ``dense=True`` every weight entry gets its true partial derivative,
    inactive ones included (evaluated at their current value of zero).  With
    ``dense=False`` sparse-kernel layers only fill active entries; inactive
    entries are left at zero.
    """
    if cache is None or cache.model_id != id(model) or cache.revision != model.revision:
        raise StaleCacheError("cache does not match the model's current parameters")
    if cache.used:
        raise StaleCacheError("cache already consumed by backward")
    cache.used = True
    arch = model.arch
    grads = [None] * model.num_layers
    delta = cache.dlogits
    last = model.num_layers - 1
    for l in range(last, -1, -1):
        spec, w = arch.layers[l], model.weights[l]
        z, x = cache.pre[l], cache.inputs[l]
        if spec.pool > 1:
            p = spec.pool
            n, h, ww, c = z.shape
            delta = delta.reshape(n, h // p, ww // p, c)
            delta = np.repeat(np.repeat(delta, p, axis=1), p, axis=2) / (p * p)
        if delta.shape != z.shape:
            delta = delta.reshape(z.shape)
        if l != last:
            delta = delta * (z > 0.0)
        db = delta.reshape(-1, spec.fan_out).sum(axis=0) if spec.has_bias else np.zeros(0)
        need_dx = l > 0
        if spec.kind == FC:
            if cache.sparse[l] and not dense:
                idx = w.sparse_index()
                g = kernels.active.sddmm(x, delta, idx)
                if cache.weight_decay:
                    g += cache.weight_decay * w.values.reshape(-1)[idx.flat]
                dw = np.zeros(w.size)
                dw[idx.flat] = g
                dw = dw.reshape(w.shape)
            else:
                dw = x.T @ delta
                if cache.weight_decay:
                    dw += cache.weight_decay * w.values
            if need_dx:
                if cache.sparse[l]:
                    idx = w.sparse_index()
                    dx = kernels.active.spmm_t(delta, idx, w.values.reshape(-1)[idx.flat])
                else:
                    dx = delta @ w.values.T
        else:
            cin, cout, kh, kw = w.shape
            dz = delta.reshape(-1, cout)
            dwm = cache.cols[l].T @ dz
            dw = dwm.reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
            if need_dx:
                dcols = dz @ _conv_matrix(w.values).T
                dx = _col2im(dcols, x.shape, kh, kw)
        if spec.kind != FC and cache.weight_decay:
            dw = dw + cache.weight_decay * w.values
        grads[l] = (np.ascontiguousarray(dw), db)
        if need_dx:
            delta = dx
    return grads


def loss_and_grad(model, inputs, targets, weight_decay=0.0, dense=True, loss="xent", backend="auto"):
    value, cache = forward(model, inputs, targets, weight_decay, loss=loss, backend=backend)
    return value, backward(model, cache, dense=dense)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    """SGD with momentum and piecewise-constant learning-rate decay.

    The learning rate is ``lr * lr_decay ** (number of anchors <= t)``.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_anchors: tuple = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        self.lr_anchors = tuple(int(a) for a in self.lr_anchors)
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if list(self.lr_anchors) != sorted(self.lr_anchors):
            raise ValueError("lr_anchors must be increasing")

    def lr_at(self, t):
        drops = sum(1 for a in self.lr_anchors if t >= a)
        return self.lr * self.lr_decay ** drops


class OptimizerState:
    def __init__(self, model, config: OptimizerConfig):
        self.config = config
        self.weight_buffers = [np.zeros(w.shape) for w in model.weights]
        self.bias_buffers = [np.zeros(b.shape) for b in model.biases]

    def reset_inactive(self, model, layer, positions=None):
        """Zero momentum at inactive entries and at the given flat positions."""
        buf = self.weight_buffers[layer]
        buf[~model.weights[layer].mask] = 0.0
        if positions is not None and len(positions):
            buf.reshape(-1)[positions] = 0.0


def sgd_momentum_step(model, grads, state: OptimizerState, t):
    """``buf = mu * buf + g; param -= lr(t) * buf`` over active weights and all biases."""
    if len(grads) != model.num_layers:
        raise ShapeError("one gradient pair per layer required")
    cfg = state.config
    lr = cfg.lr_at(t)
    mu = cfg.momentum
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        dw, db = grads[l]
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeError(f"layer {l}: gradient shape mismatch")
        buf = state.weight_buffers[l]
        if w.is_dense:
            buf *= mu
            buf += dw
            w.values -= lr * buf
        else:
            flat = w.active_flat()
            bv, vv = buf.reshape(-1), w.values.reshape(-1)
            step = mu * bv[flat] + dw.reshape(-1)[flat]
            bv[flat] = step
            vv[flat] -= lr * step
        bbuf = state.bias_buffers[l]
        bbuf *= mu
        bbuf += db
        b -= lr * bbuf
    model.touch()


# --------------------------------------------------------------------------
# finite differences

MAX_FD_PARAMS = 100_000


def finite_difference_gradient(model, inputs, targets, epsilon=1e-5, weight_decay=0.0,
                               loss="xent", count=None, max_params=MAX_FD_PARAMS):
    """Central-difference gradient of the loss for every parameter entry.

    Entries are visited in :meth:`Model.get_flat` order; with ``count`` only
    the first ``count`` are evaluated and the rest are NaN.  Masked weights
    are perturbed like any other entry.
    """
    total = model.num_flat
    n_eval = total if count is None else min(int(count), total)
    if n_eval > max_params:
        raise ValueError(f"refusing finite differences over {n_eval} parameters (limit {max_params})")
    base = model.get_flat()
    out = np.full(total, np.nan)
    probe = model.copy()

    def f(vec):
        probe.set_flat(vec)
        value, _ = forward(probe, inputs, targets, weight_decay, loss=loss, backend="dense")
        return value

    vec = base.copy()
    for i in range(n_eval):
        orig = vec[i]
        vec[i] = orig + epsilon
        up = f(vec)
        vec[i] = orig - epsilon
        down = f(vec)
        vec[i] = orig
        out[i] = (up - down) / (2.0 * epsilon)
    return unflatten(model, out)


def flatten_grads(grads):
    return np.concatenate([np.concatenate([dw.reshape(-1), db]) for dw, db in grads])


def unflatten(model, vector):
    res, pos = [], 0
    for w, b in zip(model.weights, model.biases):
        dw = vector[pos:pos + w.size].reshape(w.shape)
        pos += w.size
        db = vector[pos:pos + b.size]
        pos += b.size
        res.append((dw, db))
    return res


def relative_error(a, b, floor=1e-6):
    """Entry-wise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def dataset_loss(model, inputs, targets, weight_decay=0.0, batch_size=1000, backend="auto"):
    """Mean cross-entropy over a dataset, accumulated in fixed-order chunks."""
    n = len(targets)
    total = 0.0
    for start in range(0, n, batch_size):
        xb, yb = inputs[start:start + batch_size], targets[start:start + batch_size]
        logits = predict(model, xb, backend)
        logp = _log_softmax(logits)
        total += -float(np.sum(logp[np.arange(len(yb)), yb]))
    return total / n + l2_penalty(model, weight_decay)


def error_rate(model, inputs, targets, batch_size=1000, backend="auto"):
    wrong = 0
    for start in range(0, len(targets), batch_size):
        logits = predict(model, inputs[start:start + batch_size], backend)
        wrong += int(np.sum(np.argmax(logits, axis=1) != targets[start:start + batch_size]))
    return wrong / len(targets)
