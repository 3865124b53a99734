"""Mask-update timetable, drop-fraction decay, and the gradual pruning ramp."""
import math
from dataclasses import dataclass

COSINE, CONSTANT, INVERSE_POWER = "cosine", "constant", "inverse-power"
DECAYS = (COSINE, CONSTANT, INVERSE_POWER)


@dataclass(frozen=True)
class UpdateScheduleConfig:
    """Connectivity updates every ``delta_t`` steps while ``t < t_end``.

    ``alpha`` is the initial fraction of active connections rewired; ``power``
    is the exponent of the inverse-power decay (1 = linear).
    """

    delta_t: int = 100
    t_end: int = 75_000
    alpha: float = 0.3
    decay: str = COSINE
    power: float = 3.0

    def __post_init__(self):
        if self.delta_t < 1 or self.t_end < 1:
            raise ValueError("delta_t and t_end must be positive")
        if self.delta_t > self.t_end:
            raise ValueError("delta_t must not exceed t_end")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.decay not in DECAYS:
            raise ValueError(f"unknown decay {self.decay!r}; choose from {DECAYS}")
        if self.decay == INVERSE_POWER and self.power <= 0:
            raise ValueError("power must be positive")


def f_decay(t, cfg: UpdateScheduleConfig):
    """Fraction of connections updated at step ``t`` (0 <= t <= t_end)."""
    if not 0 <= t <= cfg.t_end:
        raise ValueError(f"t={t} outside [0, {cfg.t_end}]")
    if cfg.decay == CONSTANT:
        return cfg.alpha
    if cfg.decay == COSINE:
        if t == cfg.t_end:
            return 0.0
        return 0.5 * cfg.alpha * (1.0 + math.cos(t * math.pi / cfg.t_end))
    return cfg.alpha * (1.0 - t / cfg.t_end) ** cfg.power


def is_update_step(t, cfg: UpdateScheduleConfig):
    """True on multiples of ``delta_t`` strictly between 0 and ``t_end``."""
    return 0 < t < cfg.t_end and t % cfg.delta_t == 0


def drop_count(t, cfg, active):
    """``floor(f_decay(t) * active)``."""
    return max(0, int(math.floor(f_decay(t, cfg) * active + 1e-9)))


@dataclass(frozen=True)
class PruningScheduleConfig:
    """Cubic sparsity ramp from 0 at ``t_start`` to ``final_sparsity`` at ``t_end``."""

    final_sparsity: float
    t_start: int
    t_end: int
    frequency: int = 100

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be < t_end")
        if not 0.0 < self.final_sparsity < 1.0:
            raise ValueError("final_sparsity must be in (0, 1)")
        if self.frequency < 1:
            raise ValueError("frequency must be positive")


def pruning_sparsity_at(t, cfg: PruningScheduleConfig, final=None):
    """``s_f * (1 - (1 - progress)^3)``, clamped to the ramp's endpoints.

    ``final`` overrides ``cfg.final_sparsity`` for per-layer targets.
    """
    s_f = cfg.final_sparsity if final is None else final
    if t <= cfg.t_start:
        return 0.0
    if t >= cfg.t_end:
        return s_f
    progress = (t - cfg.t_start) / (cfg.t_end - cfg.t_start)
    return s_f * (1.0 - (1.0 - progress) ** 3)


def is_prune_step(t, cfg: PruningScheduleConfig):
    """Frequency multiples past ``t_start`` inside the ramp, plus ``t_end`` itself."""
    if t == cfg.t_end:
        return True
    return cfg.t_start <= t < cfg.t_end and (t - cfg.t_start) % cfg.frequency == 0
