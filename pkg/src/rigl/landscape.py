"""Loss along linear and Bezier paths between two solutions.

Points are flat parameter vectors in :meth:`Model.get_flat` order.  Losses
are the data cross-entropy only; the L2 term is left out.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from rigl.data import BatchStream, Dataset
from rigl.tensor import NumericalError, backward, dataset_loss, flatten_grads, forward

SPACES = ("dense", "sparse")
LOSS_NOTE = "data cross-entropy without the L2 term"


class LandscapeDiverged(RuntimeError):
    def __init__(self, iteration, trace):
        super().__init__(f"non-finite curve loss at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class BezierPath:
    """Endpoints ``start``/``end`` plus ``order - 1`` free control points.

    ``support`` (boolean, same length) restricts every point to a subspace;
    in sparse mode it is the union of the endpoint supports.
    """

    start: np.ndarray
    end: np.ndarray
    controls: list = field(default_factory=list)
    support: np.ndarray = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        if self.start.shape != self.end.shape:
            raise ValueError("endpoints must come from the same architecture")
        self.controls = [np.array(c, dtype=np.float64) for c in self.controls]
        if len(self.controls) > 2:
            raise ValueError("curves above cubic order are not supported")

    @property
    def order(self):
        return len(self.controls) + 1

    def points(self):
        return [self.start, *self.controls, self.end]


def bernstein(order, t):
    return np.array([math.comb(order, i) * t ** i * (1.0 - t) ** (order - i) for i in range(order + 1)])


def path_point(path: BezierPath, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return path.start.copy()
    if t == 1.0:
        return path.end.copy()
    if path.order == 1:
        p = (1.0 - t) * path.start + t * path.end
    else:
        p = np.zeros_like(path.start)
        for w, q in zip(bernstein(path.order, t), path.points()):
            p += w * q
    if path.support is not None:
        p[~path.support] = 0.0
    return p


def linear_path(model_a, model_b, space="dense"):
    return chord_path(model_a, model_b, order=1, space=space)


def chord_path(model_a, model_b, order=2, space="dense", noise=0.0, seed=0):
    """Controls evenly spaced on the chord, which traces the straight line,
    optionally perturbed by seeded Gaussian noise of std ``noise``."""
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}")
    if model_a.arch != model_b.arch:
        raise ValueError("endpoints must share one architecture")
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    a, b = model_a.get_flat(), model_b.get_flat()
    support = (model_a.flat_mask() | model_b.flat_mask()) if space == "sparse" else None
    rng = np.random.default_rng(seed)
    controls = []
    for i in range(1, order):
        c = a + (i / order) * (b - a)
        if noise:
            c = c + rng.normal(0.0, noise, size=c.shape)
        if support is not None:
            c[~support] = 0.0
        controls.append(c)
    return BezierPath(a, b, controls, support)


def _probe(template):
    probe = template.copy()
    for w in probe.weights:
        w.set_mask(np.ones(w.shape, dtype=bool))
    return probe


def point_loss(probe, vector, images, labels, batch_size=1000):
    probe.set_flat(vector)
    return dataset_loss(probe, images, labels, 0.0, batch_size, backend="dense")


def evaluate_path(path, model_template, data: Dataset, num_points=11, batch_size=1000):
    """``[(t, loss), ...]`` at ``num_points`` evenly spaced t including 0 and 1."""
    if num_points < 2:
        raise ValueError("need at least the two endpoints")
    probe = _probe(model_template)
    ts = np.linspace(0.0, 1.0, num_points)
    return [(float(t), point_loss(probe, path_point(path, float(t)), data.images, data.labels, batch_size))
            for t in ts]


def bezier_objective_and_grad(path, probe, images, labels, t):
    """Loss at ``path(t)`` and its gradient with respect to each control point."""
    probe.set_flat(path_point(path, t))
    loss, cache = forward(probe, images, labels, 0.0, backend="dense")
    g = flatten_grads(backward(probe, cache, dense=True))
    if path.support is not None:
        g[~path.support] = 0.0
    weights = bernstein(path.order, t)[1:-1]
    return loss, [w * g for w in weights]


def optimize_bezier(model_a, model_b, data: Dataset, order=2, space="dense", iterations=1000,
                    lr=0.01, seed=0, batch_size=100, momentum=0.9, noise=0.0):
    """Fit the free control points by SGD on ``E_t[L(path(t))]``, one uniform t
    per step.  Returns ``(path, trace)`` with trace rows ``(iteration, t, loss)``.
    """
    if order < 2:
        raise ValueError("optimization needs order >= 2")
    path = chord_path(model_a, model_b, order, space, noise, seed)
    seeds = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    stream = BatchStream(data, batch_size, int(seeds[1].generate_state(1)[0]))
    probe = _probe(model_a)
    velocity = [np.zeros_like(c) for c in path.controls]
    trace = []
    for it in range(iterations):
        t = float(rng.uniform(0.0, 1.0))
        x, y = stream.batch(it)
        try:
            loss, grads = bezier_objective_and_grad(path, probe, x, y, t)
        except NumericalError:
            raise LandscapeDiverged(it, trace) from None
        for c, v, g in zip(path.controls, velocity, grads):
            v *= momentum
            v += g
            c -= lr * v
        trace.append((it, t, loss))
    return path, trace


def barrier_height(curve):
    """Largest interior loss minus the larger endpoint loss, floored at 0."""
    losses = [loss for _, loss in curve]
    if len(losses) < 3:
        return 0.0
    return max(0.0, max(losses[1:-1]) - max(losses[0], losses[-1]))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "loss"])
        for t, loss in curve:
            w.writerow([repr(t), repr(loss)])
