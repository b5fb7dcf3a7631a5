"""Hard-concrete gates: medians with exact zeros and the closed-form expected L0."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class GateConstants:
    gamma: float = -0.1
    zeta: float = 1.1
    temperature: float = 2.0 / 3.0

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got {self.gamma}, {self.zeta}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def l0_offset(self) -> float:
        """Shift added to log_phi inside the expected-L0 sigmoid (+1.5986 at defaults)."""
        return -self.temperature * math.log(-self.gamma / self.zeta)

    @property
    def zero_threshold(self) -> float:
        """Largest log_phi whose median gate is exactly zero."""
        q = -self.gamma / (self.zeta - self.gamma)
        return self.temperature * math.log(q / (1.0 - q))


DEFAULT_CONSTANTS = GateConstants()


@dataclass
class GateGroup:
    """One structured mask: a latent log_phi per gated input unit."""

    log_phi: Tensor
    constants: GateConstants = field(default_factory=GateConstants)

    def __len__(self) -> int:
        return self.log_phi.shape[-1]


def _log_phi(g) -> tuple[Tensor, GateConstants]:
    if isinstance(g, GateGroup):
        return g.log_phi, g.constants
    return ad.as_tensor(g), DEFAULT_CONSTANTS


def median_gate(g, constants: GateConstants | None = None) -> Tensor:
    """Deterministic median z = clamp01(sigmoid(log_phi / T) * (zeta - gamma) + gamma).

    Accepts a GateGroup or a raw log_phi tensor of any shape (e.g. [M, X]).
    """
    log_phi, c = _log_phi(g)
    c = constants or c
    s = ad.sigmoid(ad.scale(log_phi, 1.0 / c.temperature))
    s = ad.add(ad.scale(s, c.zeta - c.gamma), c.gamma)
    return ad.clamp01(s)


def median_gate_values(log_phi: np.ndarray, constants: GateConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    c = constants
    s = ad._sigmoid(np.asarray(log_phi, dtype=np.float64) / c.temperature)
    return np.clip(s * (c.zeta - c.gamma) + c.gamma, 0.0, 1.0)


def sample_gate(g, u, constants: GateConstants | None = None) -> Tensor:
    """Stretched hard-concrete sample for uniform noise ``u`` in the open interval (0, 1)."""
    log_phi, c = _log_phi(g)
    c = constants or c
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    noise = np.log(u) - np.log1p(-u)
    s = ad.sigmoid(ad.scale(ad.add(log_phi, noise), 1.0 / c.temperature))
    s = ad.add(ad.scale(s, c.zeta - c.gamma), c.gamma)
    return ad.clamp01(s)


def expected_active_prob(g, constants: GateConstants | None = None) -> Tensor:
    """P(z != 0) = sigmoid(log_phi - T * log(-gamma / zeta))."""
    log_phi, c = _log_phi(g)
    c = constants or c
    return ad.sigmoid(ad.add(log_phi, c.l0_offset))


def init_log_phi(
    target_active_prob: float,
    noise_std: float,
    rng: np.random.Generator,
    shape,
    constants: GateConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    """Gaussian log_phi whose mean gives P(z != 0) = target_active_prob."""
    if not 0.0 < target_active_prob < 1.0:
        raise ValueError(f"target_active_prob must be in (0, 1), got {target_active_prob}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    p = target_active_prob
    mean = math.log(p / (1.0 - p)) - constants.l0_offset
    if noise_std == 0:
        return np.full(shape, mean)
    return rng.normal(mean, noise_std, size=shape)


def exact_zero_fraction(z) -> float:
    z = z.values if isinstance(z, Tensor) else np.asarray(z)
    if z.size == 0:
        return 0.0
    return float(np.count_nonzero(z == 0.0)) / z.size
