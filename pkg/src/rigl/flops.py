"""Closed-form inference and training FLOPs.

One multiply-add counts as 2 FLOPs.  Sparse layers are assumed to cost
exactly their density times the dense cost; bias additions are counted
dense.  Batch norm, activations, pooling and the loss are not counted, nor
is the cost of selecting connections to drop or grow.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from rigl.arch import CONV

METHODS = ("dense", "static", "snip", "set", "snfs", "rigl", "pruning")


def layer_inference_flops(spec, sparsity, spatial_size=1):
    """Per-sample forward FLOPs of one layer at ``sparsity``.

    ``spatial_size`` is the number of output positions (H*W) for conv
    layers and is ignored for fully-connected ones.
    """
    positions = spatial_size if spec.kind == CONV else 1
    mults = 2.0 * (1.0 - sparsity) * spec.num_params * positions
    return mults + spec.num_bias * positions


def model_inference_flops(arch, sparsities=None):
    if sparsities is None:
        sparsities = [0.0] * len(arch.layers)
    return float(sum(layer_inference_flops(spec, s, hw)
                     for spec, s, hw in zip(arch.layers, sparsities, arch.spatial_sizes())))


def layer_flops_table(arch, sparsities):
    return [
        {"layer": name, "sparsity": float(s),
         "dense_flops": layer_inference_flops(spec, 0.0, hw),
         "sparse_flops": layer_inference_flops(spec, s, hw)}
        for name, spec, s, hw in zip(arch.layer_names(), arch.layers, sparsities, arch.spatial_sizes())
    ]


def training_flops_per_sample(method, f_sparse, f_dense, delta_t=100, pruning_trace=None):
    """Average FLOPs to compute one sample's gradient under ``method``.

    Backward passes cost twice the forward pass.  ``pruning_trace`` is the
    per-step sequence of FLOPs sparsities ``s_t`` for the pruning method.
    """
    if method == "dense":
        return 3.0 * f_dense
    if method in ("static", "snip", "set"):
        return 3.0 * f_sparse
    if method == "snfs":
        return 2.0 * f_sparse + f_dense
    if method == "rigl":
        if delta_t < 1:
            raise ValueError("delta_t must be >= 1")
        return (3.0 * f_sparse * delta_t + 2.0 * f_sparse + f_dense) / (delta_t + 1)
    if method == "pruning":
        if pruning_trace is None or len(pruning_trace) == 0:
            raise ValueError("pruning needs a per-step sparsity trace")
        s = np.asarray(pruning_trace, dtype=np.float64)
        return float(np.mean(3.0 * f_dense * (1.0 - s)))
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def total_training_flops(per_sample, batch_size, steps):
    return per_sample * batch_size * steps


@dataclass
class FlopsReport:
    architecture: str
    f_dense: float
    f_sparse: float
    delta_t: int
    train_per_sample: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)
    exempt_layers: list = field(default_factory=list)

    @property
    def inference_ratio(self):
        return self.f_sparse / self.f_dense

    def train_ratio(self, method):
        return self.train_per_sample[method] / (3.0 * self.f_dense)

    def to_dict(self):
        d = asdict(self)
        d["inference_ratio"] = self.inference_ratio
        d["train_ratio"] = {m: self.train_ratio(m) for m in self.train_per_sample}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, results=None):
        """Method | Top-1/loss | FLOPs (train) | FLOPs (test), normalized to dense.

        ``results`` optionally maps method to a metric string.
        """
        results = results or {}
        lines = [f"{'Method':<10}{'Top-1/loss':>14}{'FLOPs (Train)':>16}{'FLOPs (Test)':>15}"]
        for m in self.train_per_sample:
            test = 1.0 if m == "dense" else self.inference_ratio
            lines.append(f"{m:<10}{results.get(m, '-'):>14}{self.train_ratio(m):>15.3f}x{test:>14.3f}x")
        lines.append(f"dense: {self.f_dense:.4g} FLOPs/sample (forward)")
        for d in self.layers:
            tag = "  (exempt, dense)" if d["layer"] in self.exempt_layers else ""
            lines.append(f"  {d['layer']:<8} s={d['sparsity']:.4f}  {d['sparse_flops']:.4g} / {d['dense_flops']:.4g}{tag}")
        return "\n".join(lines)


def build_report(arch, sparsities, delta_t=100, methods=METHODS, pruning_trace=None, exempt_layers=()):
    f_d = model_inference_flops(arch)
    f_s = model_inference_flops(arch, sparsities)
    per = {}
    for m in methods:
        if m == "pruning" and pruning_trace is None:
            continue
        per[m] = training_flops_per_sample(m, f_s, f_d, delta_t, pruning_trace)
    names = arch.layer_names()
    return FlopsReport(arch.name, f_d, f_s, delta_t, per, layer_flops_table(arch, sparsities),
                       [names[i] for i in exempt_layers])
