"""Experiment configuration: INI files with fixed sections and keys.

Example::

    [experiment]
    dataset = mnist
    arch = lenet-300-100
    method = rigl
    distribution = custom
    layer_sparsities = 0.99, 0.89, 0.0
    steps = 36000
    seeds = 0, 1, 2

    [schedule]
    delta_t = 100
    alpha = 0.3

    [optimizer]
    lr = 0.2
    lr_anchors = 18000, 27000
"""
import configparser
import logging
from dataclasses import dataclass, field

from rigl.arch import PRESETS, preset
from rigl.schedules import DECAYS, PruningScheduleConfig, UpdateScheduleConfig
from rigl.sparsity import allocate
from rigl.tensor import OptimizerConfig
from rigl.trainers import DYNAMIC, METHODS, TrainConfig

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("uniform", "erdos-renyi", "erk", "custom")


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> parser
SCHEMA = {
    "experiment": {
        "dataset": str, "arch": str, "method": str, "sparsity": float,
        "distribution": str, "layer_sparsities": _floats, "dense_layers": _ints,
        "steps": int, "batch_size": int, "seeds": _ints, "multiplier": int,
        "eval_interval": int, "eval_size": _opt_int, "checkpoint_interval": int,
        "exclude_dropped": _bool, "augment": _bool, "snfs_momentum": float,
        "data_path": str,
    },
    "schedule": {"delta_t": int, "alpha": float, "t_end": int, "decay": str, "power": float},
    "optimizer": {"lr": float, "momentum": float, "weight_decay": float,
                  "lr_anchors": _ints, "lr_decay": float},
    "pruning": {"t_start": int, "t_end": int, "frequency": int},
    "landscape": {"iterations": int, "lr": float, "num_points": int, "eval_size": _opt_int,
                  "batch_size": int, "noise": float},
}


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    arch: str = "lenet-300-100"
    method: str = "rigl"
    sparsity: float = None
    distribution: str = "custom"
    layer_sparsities: tuple = (0.99, 0.89, 0.0)
    dense_layers: tuple = None
    steps: int = 36000
    batch_size: int = 100
    seeds: tuple = (0,)
    multiplier: int = 1
    eval_interval: int = 1000
    eval_size: int = None
    checkpoint_interval: int = 0
    exclude_dropped: bool = False
    augment: bool = False
    snfs_momentum: float = 0.99
    data_path: str = None
    schedule: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    pruning: dict = field(default_factory=dict)
    landscape: dict = field(default_factory=dict)
    source_text: str = ""

    # derived objects -------------------------------------------------------

    def architecture(self):
        return preset(self.arch)

    def allocation(self):
        arch = self.architecture()
        return allocate(self.distribution, arch, self.sparsity, self.dense_layers, self.layer_sparsities)

    @property
    def total_steps(self):
        return self.steps * self.multiplier

    def update_schedule(self):
        s = dict(self.schedule)
        m = self.multiplier
        t_end = s.pop("t_end", int(0.75 * self.steps)) * m
        return UpdateScheduleConfig(t_end=t_end, **s)

    def optimizer_config(self):
        o = dict(self.optimizer)
        if "lr_anchors" in o:
            o["lr_anchors"] = tuple(a * self.multiplier for a in o["lr_anchors"])
        return OptimizerConfig(**o)

    def pruning_config(self):
        if self.method != "pruning":
            return None
        alloc = self.allocation()
        p = dict(self.pruning)
        m = self.multiplier
        t_start = p.pop("t_start", self.steps // 10) * m
        t_end = p.pop("t_end", int(0.75 * self.steps)) * m
        return PruningScheduleConfig(alloc.target, t_start, t_end, **p)

    def train_config(self):
        return TrainConfig(
            method=self.method, steps=self.total_steps, batch_size=self.batch_size,
            schedule=self.update_schedule(), optimizer=self.optimizer_config(),
            pruning=self.pruning_config(), eval_interval=self.eval_interval,
            eval_size=self.eval_size, exclude_dropped=self.exclude_dropped,
            snfs_momentum=self.snfs_momentum, augment=self.augment,
        )


def _validate(cfg):
    if cfg.arch not in PRESETS:
        raise ConfigError("experiment.arch", f"unknown preset {cfg.arch!r}; choose from {sorted(PRESETS)}")
    if cfg.method not in METHODS:
        raise ConfigError("experiment.method", f"unknown method {cfg.method!r}; choose from {METHODS}")
    if cfg.dataset not in ("mnist", "cifar10"):
        raise ConfigError("experiment.dataset", f"unknown dataset {cfg.dataset!r}")
    if cfg.distribution not in DISTRIBUTIONS:
        raise ConfigError("experiment.distribution", f"choose from {DISTRIBUTIONS}")
    if cfg.multiplier < 1:
        raise ConfigError("experiment.multiplier", "must be >= 1")
    if cfg.steps < 1 or cfg.batch_size < 1 or cfg.eval_interval < 1:
        raise ConfigError("experiment.steps", "steps, batch_size and eval_interval must be positive")
    if not cfg.seeds:
        raise ConfigError("experiment.seeds", "at least one seed required")
    if cfg.method != "dense":
        if cfg.distribution == "custom":
            if cfg.layer_sparsities is None:
                raise ConfigError("experiment.layer_sparsities", "required for the custom distribution")
        elif cfg.sparsity is None or not 0.0 < cfg.sparsity < 1.0:
            raise ConfigError("experiment.sparsity", "must be in (0, 1) for sparse methods")
    decay = cfg.schedule.get("decay")
    if decay is not None and decay not in DECAYS:
        raise ConfigError("schedule.decay", f"choose from {DECAYS}")
    if cfg.method not in DYNAMIC and cfg.schedule:
        log.warning("method %s does not update its mask; [schedule] keys %s are ignored",
                    cfg.method, sorted(cfg.schedule))
    # surface constructor errors with the section name
    for name, build in (("schedule", cfg.update_schedule), ("optimizer", cfg.optimizer_config),
                        ("pruning", cfg.pruning_config), ("experiment", cfg.allocation)):
        if name == "experiment" and cfg.method == "dense":
            continue
        try:
            build()
        except (ValueError, TypeError) as exc:
            raise ConfigError(name, str(exc)) from None


def parse_config(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    values = {"schedule": {}, "optimizer": {}, "pruning": {}, "landscape": {}}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, f"unknown section; expected one of {sorted(SCHEMA)}")
        keys = SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{section}.{key}", "unknown key")
            try:
                value = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", str(exc)) from None
            if section == "experiment":
                values[key] = value
            else:
                values[section][key] = value
    cfg = ExperimentConfig(source_text=text, **values)
    _validate(cfg)
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
