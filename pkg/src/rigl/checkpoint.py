"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SRGL" | u16 version | u32 header length | JSON header (UTF-8)
    per layer: f64 values[N] | mask bits (packed LSB-first, ceil(N/8) bytes)
               | f64 bias[n_out] | f64 weight momentum[N] | f64 bias momentum[n_out]
               | f64 accumulator[N]  (only when the header says so)
    f64 extra[header["extra_len"]]
    u32 CRC32 of every preceding byte
"""
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rigl.arch import ArchitectureSpec
from rigl.params import MaskedParameter
from rigl.tensor import Model

MAGIC = b"SRGL"
VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    arch: ArchitectureSpec
    step: int
    weights: list
    biases: list
    weight_buffers: list = None
    bias_buffers: list = None
    accumulators: list = None
    rng_state: dict = None
    meta: dict = field(default_factory=dict)
    extra: np.ndarray = None

    def model(self):
        return Model(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def from_model(cls, model, step=0, meta=None):
        return cls(model.arch, step, [w.copy() for w in model.weights],
                   [b.copy() for b in model.biases], meta=dict(meta or {}))


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(path, ckpt: Checkpoint):
    n_layers = len(ckpt.weights)
    zeros_w = [np.zeros(w.shape) for w in ckpt.weights]
    zeros_b = [np.zeros(b.shape) for b in ckpt.biases]
    extra = np.zeros(0) if ckpt.extra is None else np.asarray(ckpt.extra, dtype=np.float64)
    header = {
        "arch": ckpt.arch.to_dict(),
        "step": int(ckpt.step),
        "layers": n_layers,
        "has_momentum": ckpt.weight_buffers is not None,
        "has_accumulator": ckpt.accumulators is not None,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "extra_len": int(extra.size),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes]
    wbuf = ckpt.weight_buffers or zeros_w
    bbuf = ckpt.bias_buffers or zeros_b
    for l in range(n_layers):
        w = ckpt.weights[l]
        parts.append(_f64(w.values))
        parts.append(np.packbits(w.mask.reshape(-1), bitorder="little").tobytes())
        parts.append(_f64(ckpt.biases[l]))
        parts.append(_f64(wbuf[l]))
        parts.append(_f64(bbuf[l]))
        if ckpt.accumulators is not None:
            parts.append(_f64(ckpt.accumulators[l]))
    parts.append(_f64(extra))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def f64(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 14:
        raise CheckpointError(f"{path}: truncated at byte {len(raw)}")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    body = raw[:-4]
    r = _Reader(body, path)
    r.take(10)
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    arch = ArchitectureSpec.from_dict(header["arch"])
    weights, biases, wbuf, bbuf, acc = [], [], [], [], []
    for spec in arch.layers:
        shape, n = spec.weight_shape, spec.num_params
        values = r.f64(shape)
        bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(shape)
        weights.append(MaskedParameter(values, mask))
        biases.append(r.f64((spec.num_bias,)))
        wbuf.append(r.f64(shape))
        bbuf.append(r.f64((spec.num_bias,)))
        if header["has_accumulator"]:
            acc.append(r.f64(shape))
    extra = r.f64((header["extra_len"],))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} unexpected trailing bytes")
    if zlib.crc32(body) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return Checkpoint(
        arch, header["step"], weights, biases,
        wbuf if header["has_momentum"] else None,
        bbuf if header["has_momentum"] else None,
        acc if header["has_accumulator"] else None,
        header["rng_state"], header["meta"], extra,
    )


# --------------------------------------------------------------------------
# trainer state


def checkpoint_from_trainer(trainer):
    meta = {
        "seed": trainer.seed,
        "config": trainer.config.to_dict(),
        "allocation": None if trainer.allocation is None else {
            "sparsities": list(trainer.allocation.sparsities),
            "target": trainer.allocation.target,
            "kind": trainer.allocation.kind,
            "dense_layers": list(trainer.allocation.dense_layers),
        },
        "cumulative_flops": trainer.cumulative_flops,
        "overlap_total": trainer.overlap_total,
        "best_error": trainer.best_error,
        "loss_sum": trainer._loss_sum,
        "loss_count": trainer._loss_count,
        "trace": trainer.trace,
    }
    m = trainer.model
    return Checkpoint(
        m.arch, trainer.t, [w.copy() for w in m.weights], [b.copy() for b in m.biases],
        [b.copy() for b in trainer.opt.weight_buffers], [b.copy() for b in trainer.opt.bias_buffers],
        None if trainer.snfs is None else [a.copy() for a in trainer.snfs.accumulators],
        trainer.rng.bit_generator.state, meta, np.asarray(trainer.flops_sparsity_trace),
    )


def restore_trainer(ckpt: Checkpoint, train_data, test_data):
    """A :class:`rigl.trainers.Trainer` that continues exactly where ``ckpt`` left off."""
    from rigl.sparsity import SparsityAllocation
    from rigl.trainers import TrainConfig, Trainer

    meta = ckpt.meta
    if "config" not in meta:
        raise CheckpointError("checkpoint carries no trainer state")
    cfg = TrainConfig.from_dict(meta["config"])
    alloc = None
    if meta.get("allocation") is not None:
        a = meta["allocation"]
        alloc = SparsityAllocation(ckpt.arch, tuple(a["sparsities"]), a["target"], a["kind"],
                                   tuple(a["dense_layers"]))
    model = ckpt.model()
    trainer = Trainer(model, train_data, test_data, cfg, meta["seed"], alloc)
    trainer.t = ckpt.step
    if ckpt.weight_buffers is not None:
        trainer.opt.weight_buffers = [b.copy() for b in ckpt.weight_buffers]
        trainer.opt.bias_buffers = [b.copy() for b in ckpt.bias_buffers]
    if ckpt.accumulators is not None:
        trainer.snfs.accumulators = [a.copy() for a in ckpt.accumulators]
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    trainer.cumulative_flops = meta["cumulative_flops"]
    trainer.overlap_total = meta["overlap_total"]
    trainer.best_error = meta["best_error"]
    trainer._loss_sum = meta["loss_sum"]
    trainer._loss_count = meta["loss_count"]
    trainer.trace = [dict(row) for row in meta["trace"]]
    trainer.flops_sparsity_trace = [float(v) for v in ckpt.extra]
    return trainer
