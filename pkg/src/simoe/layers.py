"""Sparse interpolated expert layers anchored to frozen seed weights.

A wrapped weight theta_pre [Y, X] gains one shared trainable delta [Y, X] and
M gate rows over the X input units. Because the gates act on input columns,
the routed merge sum_i alpha_i * (z_i broadcast over columns) * delta applied
to x equals delta @ (g * x) with g = alpha @ Z. The runtime only ever uses the
latter form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .gates import DEFAULT_CONSTANTS, GateConstants, GateGroup, init_log_phi, median_gate, median_gate_values
from .model import Dense, Gain, LayerId, TinyTransformer, layer_ids


class AttachmentError(ValueError):
    pass


def _check_alphas(alphas: np.ndarray | Tensor, m: int) -> None:
    a = alphas.values if isinstance(alphas, Tensor) else np.asarray(alphas)
    if a.shape[-1] != m:
        raise ValueError(f"expected {m} expert activations, got shape {a.shape}")


class _Gated:
    theta_pre: Tensor
    theta_delta: Tensor
    log_phi: Tensor
    layer_id: LayerId
    constants: GateConstants

    @property
    def n_experts(self) -> int:
        return self.log_phi.shape[0]

    @property
    def gates(self) -> list[GateGroup]:
        return [GateGroup(ad.getitem(self.log_phi, i), self.constants) for i in range(self.n_experts)]

    def medians(self) -> Tensor:
        """[M, X] median gates, differentiable wrt log_phi."""
        return median_gate(self.log_phi, self.constants)

    def median_values(self) -> np.ndarray:
        return median_gate_values(self.log_phi.values, self.constants)

    def effective_gate(self, alphas) -> Tensor:
        """g = sum_i alpha_i * z_i; alphas [..., M] -> g [..., X]."""
        _check_alphas(alphas, self.n_experts)
        return _mix(alphas, self.medians())

    def parameters(self) -> list[Tensor]:
        return [self.theta_delta, self.log_phi]

    @property
    def out_dim(self) -> int:
        """Delta parameters controlled by one gate entry."""
        return self.theta_delta.shape[0] if self.theta_delta.ndim == 2 else 1


def _mix(alphas, z: Tensor) -> Tensor:
    a = ad.as_tensor(alphas)
    if a.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(a, (1, -1)), z), (z.shape[1],))
    return ad.matmul(a, z)


class SIMoELinear(_Gated):
    def __init__(self, theta_pre: np.ndarray, n_experts: int, layer_id: LayerId,
                 log_phi: np.ndarray | None = None, theta_delta: np.ndarray | None = None,
                 constants: GateConstants = DEFAULT_CONSTANTS):
        theta_pre = np.array(theta_pre, dtype=np.float64)
        if theta_pre.ndim != 2:
            raise DimensionError(f"SIMoELinear needs a matrix, got shape {theta_pre.shape}")
        Y, X = theta_pre.shape
        self.layer_id = layer_id
        self.constants = constants
        self.theta_pre = Tensor(theta_pre, name=f"{layer_id.name}.theta_pre")
        delta = np.zeros((Y, X)) if theta_delta is None else np.array(theta_delta, dtype=np.float64)
        self.theta_delta = Tensor(delta, requires_grad=True, name=f"{layer_id.name}.theta_delta")
        lp = np.zeros((n_experts, X)) if log_phi is None else np.array(log_phi, dtype=np.float64)
        if lp.shape != (n_experts, X):
            raise DimensionError(f"log_phi shape {lp.shape} != {(n_experts, X)}")
        self.log_phi = Tensor(lp, requires_grad=True, name=f"{layer_id.name}.log_phi")

    def __call__(self, x: Tensor, alphas) -> Tensor:
        if alphas is None:
            raise ValueError(f"{self.layer_id.name}: SIMoE layer needs expert activations")
        x = ad.as_tensor(x)
        if x.shape[-1] != self.theta_pre.shape[1]:
            raise DimensionError(f"{self.layer_id.name}: input {x.shape} vs weight {self.theta_pre.shape}")
        g = self.effective_gate(alphas)
        return ad.add(ad.linear(x, self.theta_pre), ad.linear(ad.mul(x, g), self.theta_delta))

    forward = __call__

    def merged_weights(self, alphas) -> np.ndarray:
        """Explicit theta_pre + sum_i alpha_i * (delta with column j scaled by z_ij)."""
        a = np.asarray(alphas, dtype=np.float64)
        _check_alphas(a, self.n_experts)
        z = self.median_values()
        w = self.theta_pre.values.copy()
        for i in range(self.n_experts):
            w = w + a[i] * (self.theta_delta.values * z[i][None, :])
        return w


class SIMoEVector(_Gated):
    """Elementwise-gated vector parameter (RMS-norm gain)."""

    def __init__(self, theta_pre: np.ndarray, n_experts: int, layer_id: LayerId,
                 log_phi: np.ndarray | None = None, theta_delta: np.ndarray | None = None,
                 constants: GateConstants = DEFAULT_CONSTANTS, eps: float = 1e-6):
        theta_pre = np.array(theta_pre, dtype=np.float64)
        (X,) = theta_pre.shape
        self.layer_id = layer_id
        self.constants = constants
        self.eps = eps
        self.theta_pre = Tensor(theta_pre, name=f"{layer_id.name}.theta_pre")
        delta = np.zeros(X) if theta_delta is None else np.array(theta_delta, dtype=np.float64)
        self.theta_delta = Tensor(delta, requires_grad=True, name=f"{layer_id.name}.theta_delta")
        lp = np.zeros((n_experts, X)) if log_phi is None else np.array(log_phi, dtype=np.float64)
        self.log_phi = Tensor(lp, requires_grad=True, name=f"{layer_id.name}.log_phi")

    def gain(self, alphas) -> Tensor:
        g = self.effective_gate(alphas)
        return ad.add(self.theta_pre, ad.mul(self.theta_delta, g))

    def __call__(self, x: Tensor, alphas) -> Tensor:
        if alphas is None:
            raise ValueError(f"{self.layer_id.name}: SIMoE layer needs expert activations")
        return ad.rmsnorm(x, self.gain(alphas), self.eps)

    def merged_weights(self, alphas) -> np.ndarray:
        a = np.asarray(alphas, dtype=np.float64)
        _check_alphas(a, self.n_experts)
        return self.theta_pre.values + self.theta_delta.values * (a @ self.median_values())


def effective_gate(alphas, layer: _Gated) -> Tensor:
    a = np.asarray(alphas.values if isinstance(alphas, Tensor) else alphas, dtype=np.float64)
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("expert activations must lie on the simplex")
    return layer.effective_gate(alphas)


def merged_weights(layer: _Gated, alphas) -> np.ndarray:
    return layer.merged_weights(alphas)


# ---------------------------------------------------------------- pruning


@dataclass
class PrunedLayer:
    """Export form: frozen weight plus delta columns some expert still uses."""

    layer_id: LayerId
    theta_pre: np.ndarray
    theta_delta: np.ndarray        # [Y, K] for matrices, [K] for vectors
    masks: np.ndarray              # [M, K] median gate values on kept units
    kept: np.ndarray               # [K] input-unit indices
    eps: float = 1e-6

    @property
    def is_vector(self) -> bool:
        return self.theta_pre.ndim == 1

    @property
    def binary_masks(self) -> np.ndarray:
        return self.masks != 0.0

    def gate(self, alphas) -> np.ndarray:
        return np.asarray(alphas, dtype=np.float64) @ self.masks

    def __call__(self, x, alphas) -> Tensor:
        x = ad.as_tensor(x)
        g = self.gate(alphas.values if isinstance(alphas, Tensor) else alphas)
        if self.is_vector:
            gain = self.theta_pre.copy()
            if self.kept.size:
                gain = gain + np.zeros(np.shape(g)[:-1] + gain.shape)
                gain[..., self.kept] += self.theta_delta * g
            return ad.rmsnorm(x, gain, self.eps)
        y = ad.linear(x, self.theta_pre)
        if self.kept.size == 0:
            return y
        xs = x.values[..., self.kept]
        return ad.add(y, ad.linear(xs * g, self.theta_delta))

    def parameters(self) -> list[Tensor]:
        return []


def prune(layer: _Gated) -> PrunedLayer:
    z = layer.median_values()
    kept = np.flatnonzero((z != 0.0).any(axis=0))
    if layer.theta_delta.ndim == 2:
        delta = layer.theta_delta.values[:, kept].copy()
    else:
        delta = layer.theta_delta.values[kept].copy()
    return PrunedLayer(layer.layer_id, layer.theta_pre.values.copy(), delta, z[:, kept].copy(), kept,
                       getattr(layer, "eps", 1e-6))


# ---------------------------------------------------------------- attachment


@dataclass
class AttachmentPolicy:
    """Which seed tensors get wrapped: "all_linear", "ffn_only" or an explicit name list."""

    mode: str | Sequence[str] = "all_linear"
    include_lm_head: bool = True
    include_norms: bool = True

    def select(self, ids: Sequence[LayerId]) -> list[LayerId]:
        if self.mode == "all_linear":
            return [lid for lid in ids
                    if (self.include_norms or not lid.is_norm)
                    and (self.include_lm_head or lid.kind != "lm_head")]
        if self.mode == "ffn_only":
            return [lid for lid in ids if lid.kind.startswith("ffn_")]
        if isinstance(self.mode, str):
            raise AttachmentError(f"unknown attachment mode {self.mode!r}")
        by_name = {lid.name: lid for lid in ids}
        unknown = [n for n in self.mode if n not in by_name]
        if unknown:
            raise AttachmentError(f"unknown layer ids: {unknown}")
        return [by_name[n] for n in self.mode]

    @classmethod
    def parse(cls, spec: str) -> "AttachmentPolicy":
        if spec in ("all", "all_linear"):
            return cls("all_linear")
        if spec in ("ffn", "ffn_only"):
            return cls("ffn_only")
        return cls([s.strip() for s in spec.split(",") if s.strip()])


@dataclass
class GateInit:
    target_active_prob: float = 0.95
    noise_std: float = 0.01
    constants: GateConstants = field(default_factory=GateConstants)


def attach(seed: TinyTransformer, policy: AttachmentPolicy, n_experts: int,
           gate_init: GateInit | None = None, rng: np.random.Generator | None = None) -> TinyTransformer:
    """Wrap the selected seed tensors; everything else stays frozen and shared."""
    gate_init = gate_init or GateInit()
    rng = np.random.default_rng(0) if rng is None else rng
    cfg = seed.cfg
    ids = layer_ids(cfg)
    chosen = {lid.name for lid in policy.select(ids)}
    for name, layer in seed.layers.items():
        if not np.isfinite(layer.weight.values).all():
            raise ValueError(f"seed weight {name} is not finite")
    layers = {}
    for lid in ids:
        w = seed.layers[lid.name].weight.values
        if lid.name not in chosen:
            frozen = Tensor(w.copy(), name=lid.name)
            layers[lid.name] = Gain(frozen, cfg.norm_eps) if lid.is_norm else Dense(frozen)
            continue
        X = w.shape[-1]
        lp = init_log_phi(gate_init.target_active_prob, gate_init.noise_std, rng, (n_experts, X),
                          gate_init.constants)
        if lid.is_norm:
            layers[lid.name] = SIMoEVector(w, n_experts, lid, lp, constants=gate_init.constants, eps=cfg.norm_eps)
        else:
            layers[lid.name] = SIMoELinear(w, n_experts, lid, lp, constants=gate_init.constants)
    embed = Tensor(seed.embed.values.copy(), name="embed")
    return TinyTransformer(cfg, embed, layers)


def gated_layers(model: TinyTransformer) -> list[_Gated]:
    return [layer for layer in model.layers.values() if isinstance(layer, _Gated)]


def pruned_model(model: TinyTransformer) -> TinyTransformer:
    layers = {name: (prune(layer) if isinstance(layer, _Gated) else layer)
              for name, layer in model.layers.items()}
    return TinyTransformer(model.cfg, model.embed, layers)
