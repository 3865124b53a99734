"""Per-layer sparsity allocation (Uniform, Erdos-Renyi, ERK) and random masks."""
from dataclasses import dataclass

import numpy as np

from rigl.arch import FC, ArchitectureSpec
from rigl.params import MaskedParameter, nonzero_budget

__all__ = [
    "MaskedParameter", "SparsityAllocation", "allocate", "allocate_uniform",
    "allocate_er", "allocate_erk", "allocate_custom", "random_sparsify",
    "sparsify_model", "overall_sparsity", "nonzero_budget",
]

UNIFORM, ER, ERK, CUSTOM = "uniform", "erdos-renyi", "erk", "custom"


@dataclass(frozen=True)
class SparsityAllocation:
    arch: ArchitectureSpec
    sparsities: tuple
    target: float
    kind: str
    dense_layers: tuple = ()

    def nonzeros(self):
        return [nonzero_budget(s, spec.num_params) for s, spec in zip(self.sparsities, self.arch.layers)]

    def realized_sparsity(self, eligible_only=False):
        """Zero fraction after floor rounding; ``eligible_only`` ignores exempt layers."""
        layers = list(zip(self.arch.layers, self.nonzeros()))
        if eligible_only:
            layers = [p for i, p in enumerate(layers) if i not in self.dense_layers]
        total = sum(spec.num_params for spec, _ in layers)
        return 1.0 - sum(nnz for _, nnz in layers) / total

    def table(self):
        names = self.arch.layer_names()
        width = max(len(n) for n in names + ["layer"])
        lines = [f"{'layer':<{width}}  sparsity"]
        lines += [f"{n:<{width}}  {s:.6f}" for n, s in zip(names, self.sparsities)]
        return "\n".join(lines)


def _check_target(S):
    if not 0.0 < S < 1.0:
        raise ValueError(f"global sparsity must be in (0, 1), got {S}")


def allocate_uniform(arch, S, dense_layers=(0,)):
    """Every layer at ``S`` except ``dense_layers`` (the first, by default)."""
    _check_target(S)
    dense = tuple(sorted(set(dense_layers)))
    sp = tuple(0.0 if i in dense else float(S) for i in range(len(arch.layers)))
    return SparsityAllocation(arch, sp, float(S), UNIFORM, dense)


def _scale_factor(spec, kernel):
    if kernel and spec.kind != FC:
        num = spec.fan_in + spec.fan_out + spec.kernel_w + spec.kernel_h
        return num / spec.num_params
    return (spec.fan_in + spec.fan_out) / (spec.fan_in * spec.fan_out)


def _erdos_renyi(arch, S, dense_layers, kernel):
    _check_target(S)
    n = [spec.num_params for spec in arch.layers]
    r = [_scale_factor(spec, kernel) for spec in arch.layers]
    budget = (1.0 - S) * sum(n)
    dense = set(dense_layers)
    density = [1.0] * len(n)
    for _ in range(len(n) + 1):
        eligible = [i for i in range(len(n)) if i not in dense]
        remaining = budget - sum(n[i] for i in dense)
        if not eligible or remaining <= 0:
            raise ValueError(f"sparsity {S} is infeasible with dense layers {sorted(dense)}")
        eps = remaining / sum(r[i] * n[i] for i in eligible)
        clipped = [i for i in eligible if eps * r[i] >= 1.0]
        if not clipped:
            for i in eligible:
                density[i] = eps * r[i]
            break
        dense.update(clipped)
    sp = tuple(0.0 if i in dense else 1.0 - density[i] for i in range(len(n)))
    return sp, tuple(sorted(dense))


def allocate_er(arch, S, dense_layers=()):
    """Layer density proportional to ``(n_in + n_out) / (n_in * n_out)``."""
    sp, dense = _erdos_renyi(arch, S, dense_layers, kernel=False)
    return SparsityAllocation(arch, sp, float(S), ER, dense)


def allocate_erk(arch, S, dense_layers=()):
    """Like ER, but conv layers add ``w + h`` to the numerator and divide by
    ``w * h``; FC layers keep the ER factor."""
    sp, dense = _erdos_renyi(arch, S, dense_layers, kernel=True)
    return SparsityAllocation(arch, sp, float(S), ERK, dense)


def allocate_custom(arch, sparsities):
    """Explicit per-layer sparsities, e.g. ``(0.99, 0.89, 0.0)`` for LeNet-300-100."""
    sp = tuple(float(s) for s in sparsities)
    if len(sp) != len(arch.layers):
        raise ValueError(f"{len(sp)} sparsities for {len(arch.layers)} layers")
    if not all(0.0 <= s < 1.0 for s in sp):
        raise ValueError("layer sparsities must be in [0, 1)")
    n = [spec.num_params for spec in arch.layers]
    S = sum(s * k for s, k in zip(sp, n)) / sum(n)
    dense = tuple(i for i, s in enumerate(sp) if s == 0.0)
    return SparsityAllocation(arch, sp, S, CUSTOM, dense)


def allocate(kind, arch, S=None, dense_layers=None, sparsities=None):
    if kind == CUSTOM:
        return allocate_custom(arch, sparsities)
    if kind == UNIFORM:
        return allocate_uniform(arch, S, (0,) if dense_layers is None else dense_layers)
    fn = {ER: allocate_er, "er": allocate_er, ERK: allocate_erk}.get(kind)
    if fn is None:
        raise ValueError(f"unknown sparsity distribution {kind!r}")
    return fn(arch, S, () if dense_layers is None else dense_layers)


def random_sparsify(values, sparsity, rng_seed):
    """Keep ``floor((1 - s) * N)`` entries chosen uniformly without replacement."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("layer sparsity must be in [0, 1)")
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    keep = nonzero_budget(sparsity, n)
    mask = np.zeros(n, dtype=bool)
    if keep == n:
        mask[:] = True
    else:
        rng = np.random.default_rng(rng_seed)
        mask[rng.choice(n, size=keep, replace=False)] = True
    return MaskedParameter(values, mask.reshape(values.shape))


def sparsify_model(model, allocation, seed):
    """Replace every layer's weights by a random mask realizing ``allocation``.

    Per-layer streams are spawned from ``seed`` so each layer's mask is
    independent of the others.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(model.num_layers)
    for l, (w, s) in enumerate(zip(model.weights, allocation.sparsities)):
        model.weights[l] = random_sparsify(w.values, s, seeds[l])
    model.touch()
    return model


def overall_sparsity(model):
    """Fraction of inactive weights over all layers (biases excluded)."""
    total = sum(w.size for w in model.weights)
    return 1.0 - sum(w.nnz for w in model.weights) / total
