"""Layer and architecture descriptions, plus the two built-in presets."""
from dataclasses import dataclass, field

FC = "fc"
CONV = "conv2d"


@dataclass(frozen=True)
class LayerSpec:
    """One weight layer.

    Weights are stored as ``(fan_in, fan_out)`` for fully-connected layers
    and ``(fan_in, fan_out, kernel_h, kernel_w)`` for convolutions.  ``pool``
    is an average-pooling factor applied after the nonlinearity (1 = none).
    """

    kind: str
    fan_in: int
    fan_out: int
    kernel_w: int = 1
    kernel_h: int = 1
    has_bias: bool = True
    pool: int = 1
    name: str = ""

    def __post_init__(self):
        if self.kind not in (FC, CONV):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for attr in ("fan_in", "fan_out", "kernel_w", "kernel_h", "pool"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if self.kind == FC and (self.kernel_w != 1 or self.kernel_h != 1):
            raise ValueError("fully-connected layers have a 1x1 kernel")
        if self.kind == FC and self.pool != 1:
            raise ValueError("pooling is only supported after conv2d layers")

    @property
    def num_params(self):
        return self.fan_in * self.fan_out * self.kernel_w * self.kernel_h

    @property
    def num_bias(self):
        return self.fan_out if self.has_bias else 0

    @property
    def weight_shape(self):
        if self.kind == FC:
            return (self.fan_in, self.fan_out)
        return (self.fan_in, self.fan_out, self.kernel_h, self.kernel_w)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered layers over an input of shape ``(H, W, C)``."""

    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.spatial_sizes()  # validates

    @property
    def num_params(self):
        return sum(spec.num_params for spec in self.layers)

    @property
    def num_classes(self):
        return self.layers[-1].fan_out

    def spatial_sizes(self):
        """Output spatial positions (H*W) for each layer; 1 for FC layers."""
        h, w, c = self.input_shape
        flat = False
        sizes = []
        for i, spec in enumerate(self.layers):
            if spec.kind == CONV:
                if flat:
                    raise ValueError(f"layer {i}: conv2d after a fully-connected layer")
                if spec.fan_in != c:
                    raise ValueError(f"layer {i}: fan_in {spec.fan_in} != {c} input channels")
                sizes.append(h * w)
                if h % spec.pool or w % spec.pool:
                    raise ValueError(f"layer {i}: pool {spec.pool} does not divide {h}x{w}")
                h, w, c = h // spec.pool, w // spec.pool, spec.fan_out
            else:
                expected = c if flat else h * w * c
                if spec.fan_in != expected:
                    raise ValueError(f"layer {i}: fan_in {spec.fan_in} != {expected}")
                flat = True
                c = spec.fan_out
                sizes.append(1)
        return sizes

    def layer_names(self):
        return [spec.name or f"layer{i}" for i, spec in enumerate(self.layers)]

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [
                {
                    "kind": s.kind, "fan_in": s.fan_in, "fan_out": s.fan_out,
                    "kernel_w": s.kernel_w, "kernel_h": s.kernel_h,
                    "has_bias": s.has_bias, "pool": s.pool, "name": s.name,
                }
                for s in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["input_shape"]),
                   tuple(LayerSpec(**layer) for layer in d["layers"]))


def mlp(name, sizes, input_shape=None):
    """Fully-connected network with widths ``sizes[0] -> ... -> sizes[-1]``."""
    if input_shape is None:
        input_shape = (1, 1, sizes[0])
    layers = [LayerSpec(FC, a, b, name=f"fc{i + 1}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
    return ArchitectureSpec(name, input_shape, tuple(layers))


def lenet_300_100():
    return mlp("lenet-300-100", [784, 300, 100, 10], input_shape=(28, 28, 1))


def small_conv_cifar():
    layers = (
        LayerSpec(CONV, 3, 16, 3, 3, pool=2, name="conv1"),
        LayerSpec(CONV, 16, 32, 3, 3, pool=2, name="conv2"),
        LayerSpec(CONV, 32, 64, 3, 3, pool=2, name="conv3"),
        LayerSpec(FC, 4 * 4 * 64, 256, name="fc1"),
        LayerSpec(FC, 256, 10, name="fc2"),
    )
    return ArchitectureSpec("small-conv-cifar", (32, 32, 3), layers)


PRESETS = {
    "lenet-300-100": lenet_300_100,
    "small-conv-cifar": small_conv_cifar,
}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; "
                         f"choose from {sorted(PRESETS)}") from None
