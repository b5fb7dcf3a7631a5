"""Diagnostics on trained SIMoE models: mask overlap, capacity, routing tree, parameter counts."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .autodiff import DegenerateInputError, Tensor
from .layers import PrunedLayer, _Gated, prune
from .model import Dense, Gain, LayerId, TinyTransformer, TinyTransformerConfig, layer_ids
from .router import RouterNet
from .upcycled import SIMoEModel, _consts, load_input_stats


# ---------------------------------------------------------------- overlap


def overlap_ratio(zi, zj) -> float:
    """Jaccard index of the nonzero supports; 0 when both are empty."""
    zi, zj = np.asarray(zi), np.asarray(zj)
    if zi.shape != zj.shape:
        raise ValueError(f"mask length mismatch: {zi.shape} vs {zj.shape}")
    a, b = zi != 0, zj != 0
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b)) / union if union else 0.0


def expert_masks(model: SIMoEModel) -> np.ndarray:
    """[M, total gated units]: each expert's medians concatenated over layers."""
    return np.concatenate([l.median_values() for l in model.gated], axis=1)


def overlap_matrix(masks: np.ndarray) -> np.ndarray:
    m = masks.shape[0]
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = overlap_ratio(masks[i], masks[j])
    return out


def mean_off_diagonal(mat: np.ndarray) -> float:
    m = mat.shape[0]
    if m < 2:
        return 0.0
    return float((mat.sum() - np.trace(mat)) / (m * (m - 1)))


def overlap_report(model: SIMoEModel) -> dict:
    mat = overlap_matrix(expert_masks(model))
    per_layer = {l.layer_id.name: overlap_matrix(l.median_values()).tolist() for l in model.gated}
    return {"matrix": mat.tolist(), "mean_off_diagonal": mean_off_diagonal(mat), "per_layer": per_layer}


# ---------------------------------------------------------------- capacity


def layer_fractions(layer) -> np.ndarray:
    """Per-expert fraction of this layer's delta entries under a nonzero gate."""
    z = layer.median_values() if isinstance(layer, _Gated) else layer
    return (np.asarray(z) != 0).mean(axis=1)


def capacity_report(model: SIMoEModel) -> dict:
    """Nonzero expert-parameter fraction per layer, then aggregated by layer type and depth.

    Aggregates weight each layer by its delta size; mean/std are taken across experts.
    """
    per_layer = {}
    by_kind: dict[str, list] = defaultdict(list)
    by_depth: dict[int, list] = defaultdict(list)
    for l in model.gated:
        fr = layer_fractions(l)
        size = l.theta_delta.values.size
        lid = l.layer_id
        per_layer[lid.name] = {"kind": lid.kind, "depth": lid.depth, "per_expert": fr.tolist(),
                               "mean": float(fr.mean()), "std": float(fr.std())}
        by_kind[lid.kind].append((fr, size))
        by_depth[lid.depth].append((fr, size))

    def agg(groups):
        out = {}
        for key, items in groups.items():
            w = np.array([s for _, s in items], dtype=float)
            fr = np.stack([f for f, _ in items])          # [layers, M]
            per_expert = (fr * w[:, None]).sum(0) / w.sum()
            out[str(key)] = {"mean": float(per_expert.mean()), "std": float(per_expert.std()),
                             "per_expert": per_expert.tolist()}
        return out

    return {"per_layer": per_layer, "by_kind": agg(by_kind), "by_depth": agg(by_depth)}


# ---------------------------------------------------------------- parameter counts


def active_param_count(model: SIMoEModel, pruned: bool = True) -> dict:
    """Parameters needed at inference.

    Pruned: seed weights + kept delta columns * Y + per-expert mask entries on
    kept units + router. Unpruned: seed + full deltas + all gate latents + router.
    """
    cfg = model.cfg
    seed = model.cfg.vocab * cfg.d_model  # token embedding
    delta = masks = 0
    per_layer = {}
    for name in (lid.name for lid in layer_ids(cfg)):
        layer = model.net.layers[name]
        if isinstance(layer, _Gated):
            seed += layer.theta_pre.values.size
            z = layer.median_values()
            if pruned:
                kept = int(np.count_nonzero((z != 0).any(axis=0)))
                delta += kept * layer.out_dim
                masks += kept * z.shape[0]
            else:
                delta += layer.theta_delta.values.size
                masks += z.size
            per_layer[name] = float((z != 0).mean())
        else:
            seed += layer.weight.values.size
    router = sum(p.values.size for p in model.router.parameters())
    return {"total": int(seed + delta + masks + router), "seed": int(seed), "delta": int(delta),
            "masks": int(masks), "router": int(router), "nonzero_fraction_per_layer": per_layer}


def nonzero_expert_params(model: SIMoEModel) -> int:
    """Expert parameters (delta entry x expert) under a nonzero median gate."""
    return int(sum(l.out_dim * np.count_nonzero(l.median_values()) for l in model.gated))


def trainable_param_count(model: SIMoEModel) -> int:
    return int(sum(p.values.size for p in model.parameters()))


# ---------------------------------------------------------------- routing dendrogram


@dataclass
class DendrogramNode:
    id: int
    children: tuple | None   # (left, right) node ids, None for leaves
    distance: float
    members: tuple[str, ...]

    def to_json(self, nodes: dict[int, "DendrogramNode"]) -> dict:
        if self.children is None:
            return {"leaf": self.members[0]}
        l, r = self.children
        return {"distance": self.distance, "members": list(self.members),
                "children": [nodes[l].to_json(nodes), nodes[r].to_json(nodes)]}


def cosine_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine distance of a zero vector")
    return float(max(0.0, 1.0 - (u @ v) / (nu * nv)))


def routing_dendrogram(vectors: dict[str, Sequence[float]]) -> list[DendrogramNode]:
    """Average-linkage agglomerative clustering under cosine distance.

    Returns all nodes; leaves first (sorted by name), the root last. Ties are
    broken by the lexicographically smallest (min-name, max-name) pair of the
    two clusters' first members.
    """
    names = sorted(vectors)
    if len(names) < 2:
        raise ValueError("need at least two domains to cluster")
    for n in names:
        if not np.any(np.asarray(vectors[n], dtype=float)):
            raise DegenerateInputError(f"activation vector for {n!r} is all zeros")
    d = {(a, b): cosine_distance(vectors[a], vectors[b]) for a in names for b in names}
    nodes = [DendrogramNode(i, None, 0.0, (n,)) for i, n in enumerate(names)]
    active = list(range(len(names)))
    while len(active) > 1:
        best = None
        for x in range(len(active)):
            for y in range(x + 1, len(active)):
                A, B = nodes[active[x]], nodes[active[y]]
                dist = float(np.mean([d[a, b] for a in A.members for b in B.members]))
                key = (dist, tuple(sorted((min(A.members), min(B.members)))))
                if best is None or key < best[0]:
                    best = (key, active[x], active[y])
        (dist, _), i, j = best
        members = tuple(sorted(nodes[i].members + nodes[j].members))
        left, right = sorted((i, j), key=lambda k: min(nodes[k].members))
        nodes.append(DendrogramNode(len(nodes), (left, right), dist, members))
        active = [k for k in active if k not in (i, j)] + [len(nodes) - 1]
    return nodes


def dendrogram_json(nodes: list[DendrogramNode]) -> dict:
    by_id = {n.id: n for n in nodes}
    merges = [{"members": list(n.members), "distance": n.distance} for n in nodes if n.children is not None]
    return {"tree": nodes[-1].to_json(by_id), "merges": merges}


def pairwise_cosine(vectors: dict[str, Sequence[float]]) -> dict:
    names = sorted(vectors)
    return {f"{a}|{b}": cosine_distance(vectors[a], vectors[b]) for i, a in enumerate(names) for b in names[i + 1:]}


# ---------------------------------------------------------------- pruned export


def export_pruned(model: SIMoEModel, path, meta: dict | None = None):
    """Write the pruned model: per-layer kept indices, compact deltas, masks and bitmasks."""
    tensors: dict[str, np.ndarray] = {"embed": model.net.embed.values}
    layers_meta = {}
    for lid in layer_ids(model.cfg):
        layer = model.net.layers[lid.name]
        if isinstance(layer, _Gated):
            p = prune(layer)
            tensors[f"{lid.name}.theta_pre"] = p.theta_pre
            tensors[f"{lid.name}.kept"] = p.kept
            tensors[f"{lid.name}.theta_delta"] = p.theta_delta
            tensors[f"{lid.name}.masks"] = p.masks
            bits = np.packbits(p.binary_masks.astype(np.uint8), axis=1) if p.kept.size else np.zeros((p.masks.shape[0], 0))
            tensors[f"{lid.name}.bitmask"] = bits.astype(np.int64)
            layers_meta[lid.name] = {"kept": int(p.kept.size), "units": int(layer.log_phi.shape[1])}
        else:
            tensors[lid.name] = layer.weight.values
    tensors["router.w_hidden"] = model.router.w_hidden.values
    tensors["router.w_out"] = model.router.w_out.values
    tensors["router.in_mean"] = model.router.in_mean
    tensors["router.in_std"] = model.router.in_std
    m = dict(meta or {})
    m.update(kind="simoe_pruned", architecture=model.cfg.to_dict(), routing=model.routing,
             n_experts=model.n_experts, pruned_layers=layers_meta,
             active_param_count=active_param_count(model, pruned=True),
             unpruned_param_count=active_param_count(model, pruned=False),
             gate_constants=_consts(model.gated))
    return checkpoint.save(path, tensors, m)


def load_pruned(path, seed: TinyTransformer | None = None) -> SIMoEModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "simoe_pruned":
        raise checkpoint.CheckpointError(f"{path} is not a pruned SIMoE export")
    cfg = TinyTransformerConfig(**meta["architecture"])
    layers = {}
    for lid in layer_ids(cfg):
        if lid.name in meta["pruned_layers"]:
            layers[lid.name] = PrunedLayer(lid, tensors[f"{lid.name}.theta_pre"],
                                           tensors[f"{lid.name}.theta_delta"], tensors[f"{lid.name}.masks"],
                                           tensors[f"{lid.name}.kept"].astype(np.int64), cfg.norm_eps)
        else:
            w = Tensor(tensors[lid.name], name=lid.name)
            layers[lid.name] = Gain(w, cfg.norm_eps) if lid.is_norm else Dense(w)
    net = TinyTransformer(cfg, Tensor(tensors["embed"], name="embed"), layers)
    router = RouterNet(cfg.d_model, meta["n_experts"], tensors["router.w_hidden"].shape[0], meta["routing"])
    router.w_hidden.values[...] = tensors["router.w_hidden"]
    router.w_out.values[...] = tensors["router.w_out"]
    load_input_stats(router, tensors)
    if seed is None:
        from .upcycled import seed_from_wrapped
        seed = seed_from_wrapped(net)
    return SIMoEModel(seed, net, router)
