"""Llama-style tiny decoder: RMS norm, rotary attention, gated FFN, no biases."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LINEAR_KINDS = ("query", "key", "value", "attn_out", "ffn_gate", "ffn_up", "ffn_down")
NORM_KINDS = ("attn_norm", "ffn_norm")


@dataclass
class TinyTransformerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 256
    vocab: int = 64
    max_seq: int = 48
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return asdict(self)


class LayerId(NamedTuple):
    name: str
    depth: int  # -1 for layers outside the blocks
    kind: str   # query | key | value | attn_out | ffn_gate | ffn_up | ffn_down | norm | lm_head

    @property
    def is_norm(self) -> bool:
        return self.kind == "norm"


def layer_ids(cfg: TinyTransformerConfig) -> list[LayerId]:
    """Every gateable tensor in forward order (token embedding excluded)."""
    out = []
    for d in range(cfg.n_layers):
        out.append(LayerId(f"blocks.{d}.attn_norm", d, "norm"))
        for k in ("query", "key", "value", "attn_out"):
            out.append(LayerId(f"blocks.{d}.{k}", d, k))
        out.append(LayerId(f"blocks.{d}.ffn_norm", d, "norm"))
        for k in ("ffn_gate", "ffn_up", "ffn_down"):
            out.append(LayerId(f"blocks.{d}.{k}", d, k))
    out.append(LayerId("final_norm", cfg.n_layers, "norm"))
    out.append(LayerId("lm_head", cfg.n_layers, "lm_head"))
    return out


def param_shapes(cfg: TinyTransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.ffn_hidden, cfg.vocab
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for lid in layer_ids(cfg):
        if lid.is_norm:
            shapes[lid.name] = (d,)
        elif lid.kind in ("ffn_gate", "ffn_up"):
            shapes[lid.name] = (f, d)
        elif lid.kind == "ffn_down":
            shapes[lid.name] = (d, f)
        elif lid.kind == "lm_head":
            shapes[lid.name] = (v, d)
        else:
            shapes[lid.name] = (d, d)
    return shapes


def init_params(cfg: TinyTransformerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.ones(shape)
        elif name == "embed":
            params[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            std = 1.0 / np.sqrt(shape[1])
            if name.endswith(("attn_out", "ffn_down")):
                std /= np.sqrt(2.0 * cfg.n_layers)
            params[name] = rng.normal(0.0, std, size=shape)
    return params


class Dense:
    """Plain bias-free linear map, weight stored [out, in]."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    def __call__(self, x: Tensor, alphas=None) -> Tensor:
        return ad.linear(x, self.weight)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.weight.requires_grad else []


class Gain:
    """Plain RMS-norm gain vector."""

    def __init__(self, weight: Tensor, eps: float = 1e-6):
        self.weight = weight
        self.eps = eps

    def __call__(self, x: Tensor, alphas=None) -> Tensor:
        return ad.rmsnorm(x, self.weight, self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.weight.requires_grad else []


def _rope_tables(cfg: TinyTransformerConfig, T: int):
    hd = cfg.d_model // cfg.n_heads
    half = hd // 2
    freqs = cfg.rope_base ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * freqs[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1)
    # x @ rot == concat(-x2, x1)
    rot = np.zeros((hd, hd))
    rot[half:, :half] = -np.eye(half)
    rot[:half, half:] = np.eye(half)
    return cos, sin, rot


class TinyTransformer:
    """Decoder whose linear/norm slots are pluggable layer objects.

    ``layers`` maps each name from ``layer_ids`` to a callable ``(x, alphas)``;
    plain Dense/Gain for the seed model, SIMoE wrappers after upcycling.
    ``alphas`` is None or an array broadcastable to [B, T, M].
    """

    def __init__(self, cfg: TinyTransformerConfig, embed: Tensor, layers: dict):
        self.cfg = cfg
        self.embed = embed
        self.layers = layers

    @classmethod
    def from_params(cls, cfg: TinyTransformerConfig, params: dict[str, np.ndarray],
                    trainable: bool = False) -> "TinyTransformer":
        embed = Tensor(params["embed"].copy(), requires_grad=trainable, name="embed")
        layers = {}
        for lid in layer_ids(cfg):
            w = Tensor(params[lid.name].copy(), requires_grad=trainable, name=lid.name)
            layers[lid.name] = Gain(w, cfg.norm_eps) if lid.is_norm else Dense(w)
        return cls(cfg, embed, layers)

    def parameters(self) -> list[Tensor]:
        ps = [self.embed] if self.embed.requires_grad else []
        for layer in self.layers.values():
            ps += layer.parameters()
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        """Name -> weight array for an unwrapped (dense) decoder."""
        out = {"embed": self.embed.values}
        for name, layer in self.layers.items():
            out[name] = layer.weight.values
        return out

    def hidden(self, ids: np.ndarray, alphas=None) -> Tensor:
        """Final-norm hidden states [B, T, d]."""
        cfg = self.cfg
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > cfg.max_seq:
            raise ValueError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
        H = cfg.n_heads
        hd = cfg.d_model // H
        cos, sin, rot = _rope_tables(cfg, T)
        causal = np.tril(np.ones((T, T), dtype=bool))
        L = self.layers
        x = ad.embedding_gather(self.embed, ids)
        for d in range(cfg.n_layers):
            p = f"blocks.{d}."
            h = L[p + "attn_norm"](x, alphas)
            q = self._heads(L[p + "query"](h, alphas), B, T, H, hd)
            k = self._heads(L[p + "key"](h, alphas), B, T, H, hd)
            v = self._heads(L[p + "value"](h, alphas), B, T, H, hd)
            q = ad.add(ad.mul(q, cos), ad.mul(ad.matmul(q, rot), sin))
            k = ad.add(ad.mul(k, cos), ad.mul(ad.matmul(k, rot), sin))
            att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
            att = ad.softmax(att, where=causal)
            o = ad.matmul(att, v)
            o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = ad.add(x, L[p + "attn_out"](o, alphas))
            h = L[p + "ffn_norm"](x, alphas)
            f = ad.mul(ad.silu(L[p + "ffn_gate"](h, alphas)), L[p + "ffn_up"](h, alphas))
            x = ad.add(x, L[p + "ffn_down"](f, alphas))
        return L["final_norm"](x, alphas)

    def logits_from_hidden(self, h: Tensor, alphas=None) -> Tensor:
        return self.layers["lm_head"](h, alphas)

    def __call__(self, ids: np.ndarray, alphas=None) -> Tensor:
        return self.logits_from_hidden(self.hidden(ids, alphas), alphas)

    @staticmethod
    def _heads(x: Tensor, B: int, T: int, H: int, hd: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (B, T, H, hd)), (0, 2, 1, 3))


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))
