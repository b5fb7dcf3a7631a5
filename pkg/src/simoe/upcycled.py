"""The upcycled model: frozen seed, wrapped decoder and router in one object."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import Batch, make_batch
from .gates import GateConstants
from .layers import (AttachmentPolicy, GateInit, PrunedLayer, SIMoELinear, SIMoEVector, _Gated, attach,
                     gated_layers)
from .model import Dense, Gain, TinyTransformer, TinyTransformerConfig, layer_ids
from .router import RouterNet, instance_embeddings, token_embeddings


class SIMoEModel:
    def __init__(self, seed: TinyTransformer, net: TinyTransformer, router: RouterNet):
        self.seed = seed
        self.net = net
        self.router = router
        self._emb: dict[tuple[int, ...], np.ndarray] = {}

    @classmethod
    def upcycle(cls, seed: TinyTransformer, policy: AttachmentPolicy, n_experts: int,
                routing: str = "instance", gate_init: GateInit | None = None,
                d_router: int | None = None, seed_value: int = 0) -> "SIMoEModel":
        rng = np.random.default_rng([seed_value, 1])
        net = attach(seed, policy, n_experts, gate_init, rng)
        router = RouterNet(seed.cfg.d_model, n_experts, d_router, routing, np.random.default_rng([seed_value, 2]))
        return cls(seed, net, router)

    @property
    def cfg(self) -> TinyTransformerConfig:
        return self.net.cfg

    @property
    def routing(self) -> str:
        return self.router.mode

    @property
    def n_experts(self) -> int:
        return self.router.n_experts

    @property
    def gated(self) -> list[_Gated]:
        return gated_layers(self.net)

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.gated:
            ps += layer.parameters()
        return ps + self.router.parameters()

    # ------------------------------------------------------------ routing

    def cache_embeddings(self, prompts: Sequence[Sequence[int]]) -> None:
        missing = list(dict.fromkeys(tuple(p) for p in prompts if tuple(p) not in self._emb))
        if missing:
            embs = instance_embeddings(self.seed, missing)
            for p, e in zip(missing, embs):
                self._emb[p] = e

    def instance_embeddings(self, prompts: Sequence[Sequence[int]]) -> np.ndarray:
        self.cache_embeddings(prompts)
        return np.stack([self._emb[tuple(p)] for p in prompts])

    def alphas(self, ids: np.ndarray, prompts: Sequence[Sequence[int]]) -> Tensor:
        """[B, 1, M] (instance) or [B, T, M] (token) expert activations."""
        if self.routing == "instance":
            a = self.router(self.instance_embeddings(prompts))
            return ad.reshape(a, (a.shape[0], 1, a.shape[1]))
        return self.router(token_embeddings(self.seed, ids))

    def __call__(self, ids: np.ndarray, prompts: Sequence[Sequence[int]]) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        return self.net(ids, self.alphas(ids, prompts))

    def batch_logits(self, batch: Batch) -> Tensor:
        return self(batch.inputs, [ex.prompt for ex in batch.examples])

    def fit_router_inputs(self, examples: Sequence, chunk: int = 256) -> None:
        """Freeze router input statistics from the seed's embeddings of ``examples``.

        Instance mode uses the last-prompt-token states; token mode uses every
        non-pad position of the teacher-forced inputs.
        """
        if self.routing == "instance":
            self.router.set_input_stats(self.instance_embeddings([ex.prompt for ex in examples]))
            return
        rows = []
        for s in range(0, len(examples), chunk):
            part = list(examples[s:s + chunk])
            b = make_batch(part)
            n = np.array([len(ex.prompt) + len(ex.target) - 1 for ex in part])
            h = token_embeddings(self.seed, b.inputs)
            rows.append(h[np.arange(b.inputs.shape[1])[None, :] < n[:, None]])
        self.router.set_input_stats(np.concatenate(rows))

    # ------------------------------------------------------------ (de)serialisation

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"embed": self.net.embed.values}
        for name, layer in self.net.layers.items():
            if isinstance(layer, _Gated):
                out[f"{name}.theta_pre"] = layer.theta_pre.values
                out[f"{name}.theta_delta"] = layer.theta_delta.values
                out[f"{name}.log_phi"] = layer.log_phi.values
            else:
                out[name] = layer.weight.values
        out["router.w_hidden"] = self.router.w_hidden.values
        out["router.w_out"] = self.router.w_out.values
        out["router.in_mean"] = self.router.in_mean
        out["router.in_std"] = self.router.in_std
        return out

    def save(self, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None):
        meta = dict(meta or {})
        meta.update(kind="simoe", architecture=self.cfg.to_dict(), routing=self.routing,
                    n_experts=self.n_experts, gated=[l.layer_id.name for l in self.gated],
                    gate_constants=_consts(self.gated))
        tensors = self.state_tensors()
        tensors.update(extra or {})
        return checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path, seed: TinyTransformer | None = None) -> "SIMoEModel":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "simoe":
            raise checkpoint.CheckpointError(f"{path} is not a SIMoE checkpoint")
        cfg = TinyTransformerConfig(**meta["architecture"])
        c = GateConstants(**meta["gate_constants"]) if meta.get("gate_constants") else GateConstants()
        m = meta["n_experts"]
        gated = set(meta["gated"])
        layers = {}
        for lid in layer_ids(cfg):
            if lid.name in gated:
                kw = dict(log_phi=tensors[f"{lid.name}.log_phi"], theta_delta=tensors[f"{lid.name}.theta_delta"],
                          constants=c)
                pre = tensors[f"{lid.name}.theta_pre"]
                layers[lid.name] = (SIMoEVector(pre, m, lid, eps=cfg.norm_eps, **kw) if lid.is_norm
                                    else SIMoELinear(pre, m, lid, **kw))
            else:
                w = Tensor(tensors[lid.name], name=lid.name)
                layers[lid.name] = Gain(w, cfg.norm_eps) if lid.is_norm else Dense(w)
        net = TinyTransformer(cfg, Tensor(tensors["embed"], name="embed"), layers)
        router = RouterNet(cfg.d_model, m, tensors["router.w_hidden"].shape[0], meta["routing"])
        router.w_hidden.values[...] = tensors["router.w_hidden"]
        router.w_out.values[...] = tensors["router.w_out"]
        load_input_stats(router, tensors)
        if seed is None:
            seed = seed_from_wrapped(net)
        return cls(seed, net, router)


def load_input_stats(router: RouterNet, tensors: dict[str, np.ndarray]) -> None:
    if "router.in_mean" in tensors:
        router.in_mean = tensors["router.in_mean"].copy()
        router.in_std = tensors["router.in_std"].copy()


def _consts(gated) -> dict | None:
    if not gated:
        return None
    c = gated[0].constants
    return {"gamma": c.gamma, "zeta": c.zeta, "temperature": c.temperature}


def seed_from_wrapped(net: TinyTransformer) -> TinyTransformer:
    """Rebuild the frozen seed decoder from the anchors kept inside the wrappers."""
    params = {"embed": net.embed.values}
    for name, layer in net.layers.items():
        params[name] = layer.theta_pre if isinstance(layer, PrunedLayer) else (
            layer.theta_pre.values if isinstance(layer, _Gated) else layer.weight.values)
    return TinyTransformer.from_params(net.cfg, params)
