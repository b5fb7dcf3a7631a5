"""End-to-end stages shared by the CLI, the experiment scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, checkpoint
from . import autodiff as ad
from .config import ConfigError, ObjectiveConfig, RunConfig, write_config
from .data import Example, generate_corpus, make_batch, read_jsonl, write_corpus
from .evaluate import evaluate
from .layers import AttachmentPolicy, GateInit
from .model import TinyTransformer, count_params
from .training import (LagrangianState, full_finetune, lagrangian_loss, load_dense, pretrain, save_dense,
                       train)
from .upcycled import SIMoEModel

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def corpus(cfg: RunConfig, data_dir=None) -> dict[str, list[Example]]:
    if data_dir is not None:
        d = Path(data_dir)
        missing = [s for s in SPLITS if not (d / f"{s}.jsonl").exists()]
        if missing:
            raise ConfigError(f"{d} lacks {', '.join(s + '.jsonl' for s in missing)}")
        return {s: read_jsonl(d / f"{s}.jsonl") for s in SPLITS}
    dc = cfg.data
    return generate_corpus(dc.domains, dc.n_per_domain, dc.split_fracs, dc.seed, dc.held_out)


def gen_data(cfg: RunConfig, out) -> dict:
    splits = corpus(cfg)
    paths = write_corpus(out, splits)
    write_config(Path(out) / "resolved_config.json", cfg)
    return {s: {"path": str(p), "n": len(splits[s])} for s, p in paths.items()}


def load_model(path):
    """Dense seed, SIMoE checkpoint or pruned export, chosen by the manifest kind."""
    _, meta = checkpoint.load(path)
    kind = meta.get("kind")
    if kind == "dense":
        mc, params, _ = load_dense(path)
        return TinyTransformer.from_params(mc, params)
    if kind == "simoe":
        return SIMoEModel.load(path)
    if kind == "simoe_pruned":
        return analysis.load_pruned(path)
    raise checkpoint.CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def load_seed(path) -> TinyTransformer:
    mc, params, _ = load_dense(path)
    return TinyTransformer.from_params(mc, params)


# ---------------------------------------------------------------- stages


def run_pretrain(cfg: RunConfig, splits, out=None, log_every: int = 0) -> tuple[TinyTransformer, dict]:
    res = pretrain(cfg.model, splits["train"], cfg.pretrain, log_every=log_every)
    seed = TinyTransformer.from_params(cfg.model, res.params)
    report = {"diverged": res.diverged, "final_nll": res.history[-1]["nll"] if res.history else None,
              "val": evaluate(seed, splits["val"])}
    if out is not None:
        out = Path(out)
        save_dense(out / "seed", cfg.model, res.params, {"pretrain": dataclasses.asdict(cfg.pretrain)})
        with open(out / "metrics.jsonl", "w") as f:
            for rec in res.history:
                f.write(json.dumps(rec) + "\n")
        write_json(out / "report.json", report)
        write_config(out / "resolved_config.json", cfg)
    return seed, report


def run_finetune(cfg: RunConfig, seed: TinyTransformer, splits, out=None, log_every: int = 0):
    res = full_finetune(cfg.model, seed.state_dict(), splits["train"], cfg.finetune, log_every=log_every)
    model = TinyTransformer.from_params(cfg.model, res.params)
    report = {"diverged": res.diverged, "trainable_params": count_params(res.params),
              "active_params": count_params(res.params), "test": evaluate(model, splits["test"])}
    if out is not None:
        out = Path(out)
        save_dense(out / "model", cfg.model, res.params, {"finetune": dataclasses.asdict(cfg.finetune)})
        write_json(out / "report.json", report)
        write_config(out / "resolved_config.json", cfg)
    return model, report


def analyze(model: SIMoEModel, ev: dict | None = None) -> dict:
    out = {"overlap": analysis.overlap_report(model), "capacity": analysis.capacity_report(model),
           "active_params": analysis.active_param_count(model, pruned=True),
           "unpruned_params": analysis.active_param_count(model, pruned=False),
           "nonzero_expert_params": analysis.nonzero_expert_params(model),
           "trainable_params": analysis.trainable_param_count(model)}
    if ev is not None and len(ev.get("mean_alpha", {})) >= 2:
        out["routing"] = routing_report(ev["mean_alpha"])
    return out


def routing_report(mean_alpha: dict) -> dict:
    nodes = analysis.routing_dendrogram(mean_alpha)
    rep = analysis.dendrogram_json(nodes)
    rep["mean_alpha"] = mean_alpha
    rep["pairwise_cosine"] = analysis.pairwise_cosine(mean_alpha)
    return rep


def run_upcycle(cfg: RunConfig, seed: TinyTransformer, splits, out=None, log_every: int = 0) -> tuple:
    """Train, evaluate on test, and emit the analysis artifacts next to the metrics stream."""
    res = train(cfg.upcycle, seed, splits["train"], out_dir=out, log_every=log_every)
    ev = evaluate(res.model, splits["test"])
    train_domains = set(cfg.data.domains) - set(cfg.data.held_out)
    seen = {d: v for d, v in ev["mean_alpha"].items() if d in train_domains}
    an = analyze(res.model)
    if len(seen) >= 2:
        an["routing"] = routing_report(seen)
    report = {"final": res.final, "converged": res.converged, "test": ev, **an}
    if out is not None:
        out = Path(out)
        write_json(out / "report.json", report)
        write_json(out / "overlap.json", an["overlap"])
        write_json(out / "capacity.json", an["capacity"])
        if "routing" in an:
            write_json(out / "dendrogram.json", an["routing"])
        write_config(out / "resolved_config.json", cfg)
    return res, report


def with_upcycle(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, upcycle=dataclasses.replace(cfg.upcycle, **changes))


def sweep(cfg: RunConfig, seed: TinyTransformer, splits, taus: Sequence[float], ortho_weights: Sequence[float],
          out=None) -> list[dict]:
    rows = []
    for tau in taus:
        for ow in ortho_weights:
            run_cfg = with_upcycle(cfg, tau=tau, ortho_weight=ow)
            sub = None if out is None else Path(out) / f"tau{tau:g}_ortho{ow:g}"
            _, rep = run_upcycle(run_cfg, seed, splits, sub)
            rows.append(summary_row(f"tau={tau:g},ortho={ow:g}", run_cfg.upcycle, rep))
    if out is not None:
        write_json(Path(out) / "sweep.json", rows)
        write_config(Path(out) / "resolved_config.json", cfg)
    return rows


def summary_row(name: str, oc: ObjectiveConfig, rep: dict) -> dict:
    return {"name": name, "tau": oc.tau, "ortho_weight": oc.ortho_weight, "attach": oc.attach,
            "routing": oc.routing, "exact_sparsity": rep["final"]["exact_sparsity"],
            "converged": rep["converged"], "mean_overlap": rep["overlap"]["mean_off_diagonal"],
            "nonzero_expert_params": rep["nonzero_expert_params"],
            "active_params": rep["active_params"]["total"], "exact_match": rep["test"]["exact_match"],
            "token_accuracy": rep["test"]["token_accuracy"]}


ABLATIONS = {
    "ffn_only": {"attach": "ffn"},
    "no_ortho": {"ortho_weight": 0.0},
    "tau0": {"tau": 0.0},
    "token_routing": {"routing": "token"},
}


def ablations(cfg: RunConfig, seed: TinyTransformer, splits, reference: dict | None = None,
              out=None, names: Sequence[str] = tuple(ABLATIONS)) -> dict:
    rows = []
    if reference is not None:
        rows.append(summary_row("reference", cfg.upcycle, reference))
    for name in names:
        run_cfg = with_upcycle(cfg, **ABLATIONS[name])
        sub = None if out is None else Path(out) / name
        _, rep = run_upcycle(run_cfg, seed, splits, sub)
        rows.append(summary_row(name, run_cfg.upcycle, rep))
    table = {"rows": rows}
    if out is not None:
        write_json(Path(out) / "ablations.json", table)
    return table


def baseline_table(simoe_report: dict, ft_report: dict, seed_eval: dict | None = None) -> dict:
    rows = []
    if seed_eval is not None:
        rows.append({"method": "seed", "exact_match": seed_eval["exact_match"],
                     "token_accuracy": seed_eval["token_accuracy"], "per_domain": seed_eval["per_domain"]})
    rows.append({"method": "full_ft", "exact_match": ft_report["test"]["exact_match"],
                 "token_accuracy": ft_report["test"]["token_accuracy"],
                 "per_domain": ft_report["test"]["per_domain"],
                 "trainable_params": ft_report["trainable_params"], "active_params": ft_report["active_params"]})
    rows.append({"method": "simoe", "exact_match": simoe_report["test"]["exact_match"],
                 "token_accuracy": simoe_report["test"]["token_accuracy"],
                 "per_domain": simoe_report["test"]["per_domain"],
                 "trainable_params": simoe_report["trainable_params"],
                 "active_params": simoe_report["active_params"]["total"]})
    return {"split": "test", "rows": rows}


# ---------------------------------------------------------------- gradient check


def gradcheck(seed: TinyTransformer, examples: Sequence[Example], oc: ObjectiveConfig, lam: float = 0.5,
              max_entries: int = 8, seed_value: int = 0, h: float = 1e-3, floor: float = 1e-8) -> dict:
    """Full-objective analytic gradient vs central differences on a frozen batch.

    The state is moved away from the zero-delta, uniform-routing init so every
    term (NLL, ortho, constraint) has a nonzero gradient. Gate latents are drawn
    from [-1.2, 1.2], where every median is strictly inside (0, 1): the clamp
    kinks sit at +-1.599, far outside the probe step.
    """
    rng = np.random.default_rng([seed_value, 7])
    policy = AttachmentPolicy.parse(oc.attach)
    policy.include_lm_head = oc.include_lm_head
    model = SIMoEModel.upcycle(seed, policy, oc.n_experts, oc.routing, GateInit(oc.target_active_prob, 0.0),
                               oc.d_router, seed_value)
    for layer in model.gated:
        layer.theta_delta.values[...] = rng.normal(0.0, 0.05, layer.theta_delta.shape)
        layer.log_phi.values[...] = rng.uniform(-1.2, 1.2, layer.log_phi.shape)
    model.router.w_out.values[...] = rng.normal(0.0, 0.5, model.router.w_out.shape)
    if oc.routing == "instance":
        model.cache_embeddings([ex.prompt for ex in examples])
    batch = make_batch(list(examples))
    state = LagrangianState(lam, oc.tau, oc.dual_lr)
    ow = oc.ortho_weight if oc.ortho_weight else 5e-3
    err = ad.finite_difference_check(lambda: lagrangian_loss(batch, model, state, ow)[0], model.parameters(),
                                     h=h, max_entries=max_entries, rng=rng, floor=floor)
    n = sum(min(p.values.size, max_entries) for p in model.parameters())
    return {"max_rel_err": float(err), "entries_checked": n, "batch_size": len(examples), "lambda": lam,
            "ortho_weight": ow, "h": h, "floor": floor}
