"""Losses, the BP / DFA / shallow backward passes, optimizers and the epoch loop.

Sign convention: every backward returns dL/dparam. The descent step (the
minus sign of the update rules) lives in :func:`optimizer_step`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .feedback import ConfigurationError
from .network import ContractError, ForwardTrace, Network, check_shapes
from .tensor import DTYPE, ParameterError, SeededRng, ShapeError

GradientSet = dict  # parameter name -> dL/dparam

LOSSES = ("mse", "softmax_cross_entropy")


# --------------------------------------------------------------------------
# losses


def _as_targets(y, n_rows: int, n_cols: int) -> np.ndarray:
    y = np.asarray(y)
    if np.issubdtype(y.dtype, np.integer) and y.size == n_rows:
        onehot = np.zeros((n_rows, n_cols), dtype=DTYPE)
        onehot[np.arange(n_rows), y.reshape(-1)] = 1.0
        return onehot
    y2 = y.reshape(-1, y.shape[-1]).astype(DTYPE) if y.ndim else y
    if y2.shape != (n_rows, n_cols):
        raise ShapeError(f"targets of shape {y.shape} do not match predictions ({n_rows}, {n_cols})")
    return y2


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_error(kind: str, y_hat: np.ndarray, y, mask=None):
    """Mean loss over the (masked) rows and the top error delta_ay = dL/da_y.

    ``mse``: per-row squared error summed over outputs, averaged over rows,
    so delta_ay = 2 (y_hat - y) / rows. ``softmax_cross_entropy``: mean
    negative log-likelihood of softmax(y_hat), delta_ay = (softmax - y) / rows.
    ``y`` may be one-hot / real targets or integer class ids.
    """
    if kind not in LOSSES:
        raise ParameterError(f"unknown loss {kind!r}")
    shape = y_hat.shape
    z = y_hat.reshape(-1, shape[-1])
    rows, cols = z.shape
    t = _as_targets(y, rows, cols)
    w = np.ones(rows, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    if w.shape != (rows,):
        raise ShapeError(f"mask of shape {np.shape(mask)} does not match {rows} rows")
    count = w.sum()
    if count == 0:
        raise ParameterError("loss over an empty selection of rows")
    if kind == "mse":
        diff = z - t
        loss = float(((diff**2).sum(axis=1) * w).sum() / count)
        delta = 2.0 * diff * (w / count)[:, None]
    else:
        logp = log_softmax(z)
        loss = float(-((t * logp).sum(axis=1) * w).sum() / count)
        delta = (np.exp(logp) - t) * (w / count)[:, None]
    return loss, delta.reshape(shape)


# --------------------------------------------------------------------------
# backward passes


def backward_bp(net: Network, trace: ForwardTrace, delta_ay: np.ndarray, signals: dict | None = None) -> GradientSet:
    """Exact chain-rule gradients through every region.

    If ``signals`` is given it receives, per region name, the gradient that
    arrived at that region's output (the W_{i+1}^T delta a_{i+1} term).
    """
    check_shapes(net, trace)
    grads: GradientSet = {}
    g = delta_ay.reshape(trace.outputs[-1].shape)
    for idx in reversed(range(len(net.regions))):
        region = net.regions[idx]
        if signals is not None:
            signals[region.name] = g
        rg, g = region.backward(trace.caches[idx], g)
        grads.update(rg)
        if g is None:
            break
    return grads


def region_update(net: Network, trace: ForwardTrace, delta_ay: np.ndarray, idx: int) -> GradientSet:
    """One DFA task: inject this region's signal and run its internal backward."""
    signal = net.dfa_signal(idx, delta_ay, trace.outputs[idx].shape)
    grads, _ = net.regions[idx].backward(trace.caches[idx], signal)
    return grads


def backward_dfa(net: Network, trace: ForwardTrace, delta_ay: np.ndarray) -> GradientSet:
    """Hidden regions get B_i delta_ay at their output; the top gets delta_ay itself."""
    check_shapes(net, trace)
    for r in net.hidden:
        if r.name not in net.feedback:
            raise ConfigurationError(f"no feedback matrix for hidden region {r.name!r}")
    grads: GradientSet = {}
    for idx in range(len(net.regions)):
        grads.update(region_update(net, trace, delta_ay, idx))
    return grads


def backward_shallow(net: Network, trace: ForwardTrace, delta_ay: np.ndarray) -> GradientSet:
    check_shapes(net, trace)
    grads, _ = net.top.backward(trace.caches[-1], delta_ay.reshape(trace.outputs[-1].shape))
    return grads


def compute_gradients(net: Network, trace: ForwardTrace, delta_ay: np.ndarray, workers: int = 1) -> GradientSet:
    if net.mode == "bp":
        return backward_bp(net, trace, delta_ay)
    if net.mode == "shallow":
        return backward_shallow(net, trace, delta_ay)
    if workers > 1:
        from .parallel import execute_concurrent, plan_updates
        return execute_concurrent(plan_updates(net, trace, delta_ay), workers).grads
    return backward_dfa(net, trace, delta_ay)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")


def init_optimizer(kind: str, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, weight_decay: float = 0.0) -> OptimizerState:
    opt = OptimizerState(kind, lr, beta1, beta2, eps, weight_decay)
    if kind == "adam":
        opt.m = {k: np.zeros_like(p) for k, p in params.items()}
        opt.v = {k: np.zeros_like(p) for k, p in params.items()}
    return opt


def optimizer_step(opt: OptimizerState, params: dict, grads: GradientSet) -> dict:
    """Descend in place. L2 weight decay (if any) applies to matrix-shaped parameters."""
    missing = set(grads) - set(params)
    if missing:
        raise ContractError(f"gradients for unknown parameters: {sorted(missing)}")
    opt.step_count += 1
    t = opt.step_count
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if opt.weight_decay and p.ndim >= 2:
            g = g + opt.weight_decay * p
        if opt.kind == "sgd":
            p -= opt.lr * g
            continue
        if name not in opt.m or name not in opt.v:
            raise ContractError(f"no Adam moment buffer for {name!r}")
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    factor: float = 0.2
    patience: int = 1
    mode: str = "min"
    best_metric: float | None = None
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ParameterError(f"plateau factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.mode not in ("min", "max"):
            raise ParameterError(f"mode must be 'min' or 'max', got {self.mode!r}")

    def _improved(self, metric: float) -> bool:
        if self.best_metric is None:
            return True
        return metric < self.best_metric if self.mode == "min" else metric > self.best_metric

    def step(self, metric: float, opt: OptimizerState) -> bool:
        if self._improved(metric):
            self.best_metric = metric
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            opt.lr *= self.factor
            self.wait = 0
            return True
        return False


# --------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_metric: float
    val_loss: float
    val_metric: float
    test_loss: float | None
    test_metric: float | None
    lr: float


def _metric_value(kind: str, total_loss: float, correct: float, count: float) -> float:
    if kind == "perplexity":
        return math.exp(total_loss / count)
    return correct / count


def _batch_stats(net: Network, logits: np.ndarray, batch):
    """(summed loss, correct predictions, row count) for a batch with integer labels."""
    z = logits.reshape(-1, logits.shape[-1])
    labels = np.asarray(batch.y).reshape(-1)
    w = np.ones(z.shape[0], dtype=bool) if batch.mask is None else np.asarray(batch.mask, bool).reshape(-1)
    count = int(w.sum())
    if count == 0:
        return 0.0, 0.0, 0
    loss, _ = loss_and_error(net.loss, z, labels, w)
    correct = float((z.argmax(axis=1) == labels)[w].sum())
    return loss * count, correct, count


def evaluate(net: Network, dataset, split: str, batch_size: int | None = None):
    """(mean loss, metric) over a split, without dropout."""
    total = correct = count = 0.0
    for batch in dataset.eval_batches(split, batch_size):
        logits = net.predict(batch.x)
        l, c, n = _batch_stats(net, logits, batch)
        total += l
        correct += c
        count += n
    if count == 0:
        raise ParameterError(f"split {split!r} is empty")
    return total / count, _metric_value(dataset.metric, total, correct, count)


def train_epoch(net: Network, dataset, opt: OptimizerState, scheduler: PlateauScheduler | None = None, *,
                shuffle_rng: SeededRng, dropout_rng: SeededRng | None = None, batch_size: int = 32,
                epoch: int = 0, workers: int = 1, eval_test: bool = True) -> EpochMetrics:
    """One pass over the shuffled training batches, then held-out evaluation."""
    total = correct = count = 0.0
    n_batches = 0
    for batch in dataset.train_batches(shuffle_rng, batch_size):
        trace = net.forward_trace(batch.x, dropout_rng)
        loss, delta = loss_and_error(net.loss, trace.predictions, batch.y, batch.mask)
        grads = compute_gradients(net, trace, delta, workers)
        l, c, n = _batch_stats(net, trace.predictions, batch)
        total += l
        correct += c
        count += n
        optimizer_step(opt, net.params, grads)
        n_batches += 1
    if n_batches == 0:
        raise ParameterError("training split produced no batches")
    lr_used = opt.lr
    val_loss, val_metric = evaluate(net, dataset, "val", batch_size)
    test_loss = test_metric = None
    if eval_test:
        test_loss, test_metric = evaluate(net, dataset, "test", batch_size)
    if scheduler is not None:
        scheduler.step(val_metric, opt)
    return EpochMetrics(epoch, total / count, _metric_value(dataset.metric, total, correct, count),
                        val_loss, val_metric, test_loss, test_metric, lr_used)
