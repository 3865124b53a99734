"""Post-training analysis: dead-neuron compaction, storage size, input
heatmaps and lottery-ticket rewinds."""
import csv
import math
from dataclasses import dataclass

import numpy as np

from rigl.arch import FC, ArchitectureSpec, LayerSpec
from rigl.params import MaskedParameter
from rigl.tensor import Model

FLOAT_BYTES = 4


class UnsupportedModelError(ValueError):
    pass


# --------------------------------------------------------------------------
# size


def size_bytes(num_params, nnz, num_bias):
    """Bit-mask storage: sparse layers cost ``4 * nnz + ceil(N / 8)``, dense
    layers ``4 * N``; every bias costs 4 bytes."""
    total = 0
    for n, k, nb in zip(num_params, nnz, num_bias):
        if k >= n:
            total += FLOAT_BYTES * n
        else:
            total += FLOAT_BYTES * k + math.ceil(n / 8)
        total += FLOAT_BYTES * nb
    return total


def model_size_bytes(model):
    return size_bytes([w.size for w in model.weights], [w.nnz for w in model.weights],
                      [b.size for b in model.biases])


# --------------------------------------------------------------------------
# compaction


@dataclass
class CompactionResult:
    architecture: str
    kept: list  # kept indices per neuron group: input, hidden..., output
    removed: list
    model: Model
    nnz: int
    size_bytes: int

    def select_inputs(self, inputs):
        """Restrict flattened inputs to the surviving input dimensions."""
        x = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
        return x[:, self.kept[0]]

    def report(self):
        lines = [f"architecture: {self.architecture}",
                 f"nonzeros: {self.nnz}",
                 f"size_bytes: {self.size_bytes}"]
        names = ["input"] + [f"hidden{i}" for i in range(1, len(self.kept) - 1)] + ["output"]
        for name, kept, removed in zip(names, self.kept, self.removed):
            lines.append(f"{name}: kept {len(kept)}, removed {len(removed)}")
        return "\n".join(lines)


def compact_dead_neurons(model):
    """Remove neurons that cannot influence the output, to a fixed point.

    A hidden neuron without incoming connections outputs the constant
    ``relu(bias)``; that constant is folded into the next layer's bias before
    the neuron is dropped.  Neurons without outgoing connections and input
    dimensions without outgoing connections are dropped directly.
    """
    if any(spec.kind != FC for spec in model.arch.layers):
        raise UnsupportedModelError("compaction supports fully-connected models only")
    masks = [w.mask.copy() for w in model.weights]
    values = [w.values.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    L = len(masks)
    # alive[g] covers neuron group g: 0 = input, L = output (always kept)
    alive = [np.ones(masks[0].shape[0], dtype=bool)] + [np.ones(m.shape[1], dtype=bool) for m in masks]

    changed = True
    while changed:
        changed = False
        for g in range(L):
            # group g feeds layer g
            out_deg = masks[g].sum(axis=1)
            dead_out = alive[g] & (out_deg == 0)
            if g > 0:
                in_deg = masks[g - 1].sum(axis=0)
                dead_in = alive[g] & (in_deg == 0) & ~dead_out
                for j in np.flatnonzero(dead_in):
                    const = max(biases[g - 1][j], 0.0)
                    if const:
                        cols = np.flatnonzero(masks[g][j])
                        biases[g][cols] += const * values[g][j, cols]
                    masks[g][j, :] = False
                    values[g][j, :] = 0.0
                dead = dead_out | dead_in
            else:
                dead = dead_out
            if dead.any():
                changed = True
                alive[g] &= ~dead
                masks[g][dead, :] = False
                if g > 0:
                    masks[g - 1][:, dead] = False
                    values[g - 1][:, dead] = 0.0

    kept = [np.flatnonzero(a) for a in alive]
    removed = [np.flatnonzero(~a) for a in alive]
    layers, weights, new_biases = [], [], []
    for l in range(L):
        rows, cols = kept[l], kept[l + 1]
        sub = np.ix_(rows, cols)
        spec = model.arch.layers[l]
        layers.append(LayerSpec(FC, len(rows), len(cols), has_bias=spec.has_bias, name=spec.name))
        weights.append(MaskedParameter(values[l][sub], masks[l][sub]))
        new_biases.append(biases[l][cols] if spec.has_bias else np.zeros(0))
    sizes = [len(k) for k in kept]
    arch = ArchitectureSpec(model.arch.name + "-compact", (1, 1, sizes[0]), tuple(layers))
    compact = Model(arch, weights, new_biases)
    label = "-".join(str(s) for s in sizes[:-1])
    nnz = sum(w.nnz for w in compact.weights)
    return CompactionResult(label, kept, removed, compact, nnz, model_size_bytes(compact))


# --------------------------------------------------------------------------
# heatmap


def input_connection_heatmap(model):
    """Outgoing first-layer connections per input pixel, shaped ``(H, W)``
    (summed over channels)."""
    spec = model.arch.layers[0]
    if spec.kind != FC:
        raise UnsupportedModelError("heatmap needs a fully-connected first layer")
    h, w, c = model.arch.input_shape
    counts = model.weights[0].mask.sum(axis=1)
    if counts.size != h * w * c:
        raise UnsupportedModelError("first layer does not read the raw image")
    return counts.reshape(h, w, c).sum(axis=2).astype(np.int64)


def write_heatmap_csv(path, grid):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(grid.tolist())


def write_pgm(path, grid):
    """Binary PGM (P5), linearly scaled so the maximum count is white."""
    grid = np.asarray(grid)
    top = grid.max()
    img = np.zeros(grid.shape, dtype=np.uint8) if top == 0 else np.round(grid * (255.0 / top)).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def center_border_means(grid, center=14):
    """Mean count over the central ``center x center`` block and over the
    outermost ring of pixels."""
    h, w = grid.shape
    top, left = (h - center) // 2, (w - center) // 2
    inner = grid[top:top + center, left:left + center].mean()
    ring = np.ones(grid.shape, dtype=bool)
    ring[1:-1, 1:-1] = False
    return float(inner), float(grid[ring].mean())


# --------------------------------------------------------------------------
# lottery rewind


@dataclass
class RewindRecord:
    initial: Model  # dense initialization
    masks: list
    seed: int

    @classmethod
    def from_run(cls, initial, final_model, seed):
        return cls(initial.copy(), [w.mask.copy() for w in final_model.weights], int(seed))

    def rewound_model(self):
        weights = [MaskedParameter(w.values, m) for w, m in zip(self.initial.weights, self.masks)]
        return Model(self.initial.arch, weights, [b.copy() for b in self.initial.biases])


def lottery_rewind_train(record: RewindRecord, method, train_data, test_data, config, allocation=None,
                         arch=None):
    """Retrain ``record``'s final mask from its original initialization.

    ``config`` is the original :class:`rigl.trainers.TrainConfig`; its method
    is replaced by ``method`` (``"static"`` or ``"rigl"``).  Returns the trainer.
    """
    from dataclasses import replace

    from rigl.trainers import Trainer

    if method not in ("static", "rigl"):
        raise ValueError("rewind supports the static and rigl methods")
    if arch is not None and arch != record.initial.arch:
        raise ValueError("record architecture does not match")
    for w, m in zip(record.initial.weights, record.masks):
        if m.shape != w.shape:
            raise ValueError("mask shapes do not match the initialization")
    model = record.rewound_model()
    trainer = Trainer(model, train_data, test_data, replace(config, method=method), record.seed, allocation)
    trainer.run()
    return trainer
