"""Sparse training methods sharing one loop.

Methods: ``dense``, ``static``, ``snip``, ``set``, ``snfs``, ``rigl`` and
``pruning`` (gradual magnitude pruning).  They differ only in how the mask
is initialized and updated.  On a connectivity-update step the mask is
rewired instead of taking an optimizer step.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from rigl import flops as flops_mod
from rigl.data import BatchStream
from rigl.params import nonzero_budget
from rigl.schedules import (PruningScheduleConfig, UpdateScheduleConfig, drop_count,
                            is_prune_step, is_update_step, pruning_sparsity_at)
from rigl.sparsity import overall_sparsity, sparsify_model
from rigl.tensor import (NumericalError, OptimizerConfig, OptimizerState, backward,
                         error_rate, forward, init_model, loss_and_grad, sgd_momentum_step)

log = logging.getLogger(__name__)

METHODS = flops_mod.METHODS
DYNAMIC = ("set", "snfs", "rigl")
SPARSE_INIT = ("static", "set", "snfs", "rigl")
TRACE_COLUMNS = ("step", "train_loss", "test_error", "sparsity",
                 "cumulative_train_flops", "drop_grow_overlap")


# --------------------------------------------------------------------------
# selection


def argtopk(scores, k, candidates):
    """The ``k`` candidates with the largest scores, ties to the lower index.

    ``candidates`` must be sorted ascending.  Returns ``(indices, ties)``
    where ``ties`` is the number of candidates sharing the k-th score.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    k = min(int(k), candidates.size)
    if k <= 0:
        return np.empty(0, dtype=np.int64), 0
    key = scores[candidates]
    order = np.argsort(-key, kind="stable")
    chosen = candidates[order[:k]]
    ties = int(np.count_nonzero(key == key[order[k - 1]])) if k < candidates.size else 0
    return np.sort(chosen), ties


@dataclass
class MaskUpdateOutcome:
    k: int = 0
    drop: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    grow: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    drop_ties: int = 0
    grow_ties: int = 0

    @property
    def overlap(self):
        """Positions dropped and regrown in the same update."""
        return int(np.intersect1d(self.drop, self.grow, assume_unique=True).size)


def _clamp(param, k, exclude_dropped):
    active = param.nnz
    if k > active:
        log.warning("drop count %d exceeds %d active connections; clamping", k, active)
        k = active
    if exclude_dropped:
        k = min(k, param.size - active)
    return k


def _grow_candidates(param, drop, exclude_dropped):
    free = ~param.mask.reshape(-1)
    if not exclude_dropped:
        free = free.copy()
        free[drop] = True
    return np.flatnonzero(free)


def drop_and_grow(param, k, grow_scores=None, rng=None, exclude_dropped=False):
    """Drop the ``k`` smallest-magnitude active weights and grow ``k`` new ones.

    Growth takes the top ``grow_scores`` among candidates, or a uniform
    sample when ``rng`` is given instead.  Grown weights start at zero.
    Candidates are all positions outside the surviving active set (so a
    just-dropped position may be regrown) unless ``exclude_dropped``.
    """
    if param.is_dense or k <= 0:
        return MaskUpdateOutcome()
    k = _clamp(param, k, exclude_dropped)
    if k <= 0:
        return MaskUpdateOutcome()
    active = param.active_flat()
    drop, drop_ties = argtopk(-np.abs(param.values.reshape(-1)), k, active)
    cand = _grow_candidates(param, drop, exclude_dropped)
    if rng is not None:
        grow, grow_ties = np.sort(rng.choice(cand, size=k, replace=False)), 0
    else:
        grow, grow_ties = argtopk(np.abs(np.asarray(grow_scores).reshape(-1)), k, cand)
    if drop_ties > 1 or grow_ties > 1:
        log.debug("tie groups at selection boundary: drop=%d grow=%d", drop_ties, grow_ties)
    param.apply_update(drop, grow)
    return MaskUpdateOutcome(k, drop, grow, drop_ties, grow_ties)


def rigl_update(param, dense_grad, t, schedule, exclude_dropped=False):
    """Grow where the dense gradient is largest in magnitude."""
    k = drop_count(t, schedule, param.nnz)
    return drop_and_grow(param, k, grow_scores=dense_grad, exclude_dropped=exclude_dropped)


def set_update(param, t, schedule, rng, exclude_dropped=False):
    """Grow uniformly at random."""
    k = drop_count(t, schedule, param.nnz)
    return drop_and_grow(param, k, rng=rng, exclude_dropped=exclude_dropped)


class SnfsState:
    """Dense momentum of the gradient, updated every step."""

    def __init__(self, model, coefficient=0.99):
        if not 0.0 <= coefficient < 1.0:
            raise ValueError("SNFS momentum must be in [0, 1)")
        self.coefficient = coefficient
        self.accumulators = [np.zeros(w.shape) for w in model.weights]

    def accumulate(self, grads):
        for acc, (dw, _) in zip(self.accumulators, grads):
            acc *= self.coefficient
            acc += dw


def snfs_update(param, accumulator, t, schedule, exclude_dropped=False):
    """Grow where the accumulated gradient momentum is largest in magnitude."""
    k = drop_count(t, schedule, param.nnz)
    return drop_and_grow(param, k, grow_scores=accumulator, exclude_dropped=exclude_dropped)


def snip_prune(model, inputs, targets, allocation):
    """Keep the top ``|w * dL/dw|`` entries of each layer at the allocated budget."""
    _, grads = loss_and_grad(model, inputs, targets, 0.0, dense=True, backend="dense")
    for w, (dw, _), s in zip(model.weights, grads, allocation.sparsities):
        if s <= 0.0:
            continue
        saliency = np.abs(w.values * dw).reshape(-1)
        keep, _ = argtopk(saliency, nonzero_budget(s, w.size), np.arange(w.size))
        mask = np.zeros(w.size, dtype=bool)
        mask[keep] = True
        w.set_mask(mask.reshape(w.shape))
    model.touch()
    return allocation


def gradual_prune_step(model, t, cfg: PruningScheduleConfig, allocation):
    """Shrink each layer's mask toward its ramped target by magnitude.

    Returns the number of connections removed per layer.
    """
    removed = []
    for w, s_final in zip(model.weights, allocation.sparsities):
        if s_final <= 0.0:
            removed.append(0)
            continue
        keep = nonzero_budget(pruning_sparsity_at(t, cfg, final=s_final), w.size)
        n_drop = w.nnz - keep
        if n_drop <= 0:
            removed.append(0)
            continue
        drop, _ = argtopk(-np.abs(w.values.reshape(-1)), n_drop, w.active_flat())
        w.apply_update(drop, np.empty(0, dtype=np.int64))
        removed.append(int(n_drop))
    model.touch()
    return removed


# --------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, step, trace):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class TrainConfig:
    method: str = "rigl"
    steps: int = 1000
    batch_size: int = 100
    schedule: UpdateScheduleConfig = field(default_factory=UpdateScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pruning: PruningScheduleConfig = None
    eval_interval: int = 100
    eval_size: int = None
    exclude_dropped: bool = False
    snfs_momentum: float = 0.99
    augment: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method == "pruning" and self.pruning is None:
            raise ValueError("pruning method needs a PruningScheduleConfig")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = UpdateScheduleConfig(**d["schedule"])
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if d.get("pruning") is not None:
            d["pruning"] = PruningScheduleConfig(**d["pruning"])
        return cls(**d)


class Trainer:
    """Owns one model, its optimizer state and the method's auxiliary state.

    ``model`` must already carry the method's initial masks (see
    :func:`prepare_model`).  ``allocation`` gives the per-layer targets that
    SNIP and pruning move toward.
    """

    def __init__(self, model, train_data, test_data, config: TrainConfig, seed=0, allocation=None):
        self.model = model
        self.config = config
        self.seed = int(seed)
        self.allocation = allocation
        self.test_data = test_data
        seeds = np.random.SeedSequence(self.seed).spawn(4)
        self.stream = BatchStream(train_data, config.batch_size,
                                  int(seeds[2].generate_state(1)[0]), config.augment)
        self.rng = np.random.default_rng(seeds[3])
        self.opt = OptimizerState(model, config.optimizer)
        self.snfs = SnfsState(model, config.snfs_momentum) if config.method == "snfs" else None
        self.t = 0
        self.cumulative_flops = 0.0
        self.overlap_total = 0
        self.trace = []
        self.best_error = math.inf
        self._loss_sum = 0.0
        self._loss_count = 0
        self._f_dense = flops_mod.model_inference_flops(model.arch)
        self._f_sparse = None
        self.flops_sparsity_trace = []
        self._check_amortization()

    def _check_amortization(self):
        if self.config.method != "rigl" or self.config.schedule.alpha == 0:
            return
        s = overall_sparsity(self.model)
        if s < 1.0 and self.config.schedule.delta_t < 1.0 / (1.0 - s):
            raise ValueError(f"delta_t={self.config.schedule.delta_t} < 1/(1-S)={1 / (1 - s):.1f}: "
                             "dense-gradient cost would not be amortized")

    def f_sparse(self):
        if self._f_sparse is None:
            self._f_sparse = flops_mod.model_inference_flops(
                self.model.arch, [w.sparsity for w in self.model.weights])
        return self._f_sparse

    def _wants_update(self, t):
        c = self.config
        return c.method in DYNAMIC and c.schedule.alpha > 0 and is_update_step(t, c.schedule)

    def step(self, t):
        c = self.config
        x, y = self.stream.batch(t)
        update = self._wants_update(t)
        prune = c.method == "pruning" and is_prune_step(t, c.pruning)
        need_dense = c.method == "snfs" or (c.method == "rigl" and update)
        wd = c.optimizer.weight_decay
        loss, cache = forward(self.model, x, y, wd)
        grads = backward(self.model, cache, dense=need_dense)
        if self.snfs is not None:
            self.snfs.accumulate(grads)

        f_s, f_d = self.f_sparse(), self._f_dense
        if c.method == "snfs" or (c.method == "rigl" and update):
            cost = 2.0 * f_s + f_d
        else:
            cost = 3.0 * f_s
        self.cumulative_flops += cost * c.batch_size
        if c.method == "pruning":
            self.flops_sparsity_trace.append(1.0 - f_s / f_d)

        if update:
            for l, w in enumerate(self.model.weights):
                if c.method == "rigl":
                    out = rigl_update(w, grads[l][0], t, c.schedule, c.exclude_dropped)
                elif c.method == "set":
                    out = set_update(w, t, c.schedule, self.rng, c.exclude_dropped)
                else:
                    out = snfs_update(w, self.snfs.accumulators[l], t, c.schedule, c.exclude_dropped)
                self.overlap_total += out.overlap
                self.opt.reset_inactive(self.model, l, out.grow)
            self.model.touch()
        elif prune:
            gradual_prune_step(self.model, t, c.pruning, self.allocation)
            for l in range(self.model.num_layers):
                self.opt.reset_inactive(self.model, l)
            self._f_sparse = None
        else:
            sgd_momentum_step(self.model, grads, self.opt, t)
        return loss

    def evaluate(self):
        d = self.test_data
        if d is None:
            return math.nan
        if self.config.eval_size:
            d = d.subset(self.config.eval_size)
        return error_rate(self.model, d.images, d.labels)

    def run(self, until=None, on_eval=None):
        """Train up to step ``until`` (default: the configured total)."""
        end = self.config.steps if until is None else min(until, self.config.steps)
        while self.t < end:
            t = self.t
            try:
                loss = self.step(t)
            except NumericalError:
                raise TrainingDiverged(t, self.trace) from None
            self._loss_sum += loss
            self._loss_count += 1
            self.t = t + 1
            if self.t % self.config.eval_interval == 0 or self.t == self.config.steps:
                self._record()
                if on_eval is not None:
                    on_eval(self)
        return self.model, self.trace

    def _record(self):
        err = self.evaluate()
        if err < self.best_error:
            self.best_error = err
        self.trace.append({
            "step": self.t,
            "train_loss": self._loss_sum / max(self._loss_count, 1),
            "test_error": err,
            "sparsity": overall_sparsity(self.model),
            "cumulative_train_flops": self.cumulative_flops,
            "drop_grow_overlap": self.overlap_total,
        })
        self._loss_sum = 0.0
        self._loss_count = 0

    @property
    def final_error(self):
        return self.trace[-1]["test_error"] if self.trace else math.nan


def prepare_model(arch, method, allocation, seed, train_data=None, batch_size=100):
    """Initial model for ``method`` and a copy of its dense initialization.

    Sparse-init methods get random masks from ``allocation``; SNIP is pruned
    on the first training batch; dense and pruning runs start dense.
    """
    seeds = np.random.SeedSequence(int(seed)).spawn(4)
    model = init_model(arch, seeds[0])
    initial = model.copy()
    if method in SPARSE_INIT:
        sparsify_model(model, allocation, seeds[1])
    elif method == "snip":
        if train_data is None:
            raise ValueError("snip needs training data for its calibration batch")
        stream = BatchStream(train_data, batch_size, int(seeds[2].generate_state(1)[0]))
        x, y = stream.batch(0)
        snip_prune(model, x, y, allocation)
    return model, initial


def train(method, model, data, schedule, optimizer_cfg, seed, allocation=None, **kwargs):
    """Run one method end to end.  ``data`` is ``(train, test)``.

    Extra keyword arguments go to :class:`TrainConfig`.
    """
    train_data, test_data = data
    cfg = TrainConfig(method=method, schedule=schedule, optimizer=optimizer_cfg, **kwargs)
    trainer = Trainer(model, train_data, test_data, cfg, seed, allocation)
    return trainer.run()


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in TRACE_COLUMNS})


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("step", "drop_grow_overlap") else float(v))
                         for k, v in row.items()})
        return rows
