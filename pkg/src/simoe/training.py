"""Sparsity-constrained upcycling objective and the training loops.

The primal variables (shared deltas, gate latents, router) take Adam steps on
    NLL + ortho_weight * ortho_penalty + lambda * (tau - expected_sparsity)
while lambda takes one projected ascent step on the constraint gap and is
reset to zero as soon as the constraint holds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NumericError, Tensor
from .config import ConfigError, FinetuneConfig, ObjectiveConfig, PretrainConfig
from .data import Example, batch_indices, make_batch
from .gates import expected_active_prob
from .layers import AttachmentPolicy, GateInit, _Gated
from .model import TinyTransformer, TinyTransformerConfig, init_params
from .upcycled import SIMoEModel

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- objective terms


def _gated(model) -> list[_Gated]:
    if isinstance(model, SIMoEModel):
        return model.gated
    if isinstance(model, TinyTransformer):
        return [l for l in model.layers.values() if isinstance(l, _Gated)]
    return list(model)


def ortho_penalty(model) -> Tensor:
    """Mean over gated layers of ||N N^T - I||_F, N the row-normalised [M, X] medians."""
    layers = _gated(model)
    if not layers:
        return Tensor(0.0)
    terms = []
    for layer in layers:
        z = ad.l2_normalize_rows(layer.medians())
        gram = ad.matmul(z, ad.transpose(z))
        diff = ad.sub(gram, np.eye(gram.shape[0]))
        terms.append(ad.sqrt(ad.sum(ad.mul(diff, diff))))
    return ad.scale(ad.sum(ad.stack(terms)), 1.0 / len(terms))


def ortho_penalty_from_masks(masks: Sequence[np.ndarray]) -> float:
    """Same quantity on plain [M, X] mask arrays."""
    vals = []
    for z in masks:
        z = np.asarray(z, dtype=np.float64)
        n = np.linalg.norm(z, axis=1, keepdims=True)
        zn = np.where(n > 0, z / np.where(n > 0, n, 1.0), 0.0)
        vals.append(np.linalg.norm(zn @ zn.T - np.eye(z.shape[0])))
    return float(np.mean(vals)) if vals else 0.0


def expected_model_sparsity(model) -> Tensor:
    """1 - weighted mean P(z != 0); each gate weighted by the delta entries it controls."""
    layers = _gated(model)
    if not layers:
        raise ValueError("model has no gated layers")
    total = float(sum(l.out_dim * l.log_phi.values.size for l in layers))
    parts = [ad.scale(ad.sum(expected_active_prob(l.log_phi, l.constants)), l.out_dim / total) for l in layers]
    return ad.sub(1.0, ad.sum(ad.stack(parts)))


def exact_sparsity(model) -> float:
    """Fraction of expert (delta x mask) parameters whose median gate is exactly zero."""
    layers = _gated(model)
    zeros = total = 0.0
    for l in layers:
        z = l.median_values()
        zeros += l.out_dim * np.count_nonzero(z == 0.0)
        total += l.out_dim * z.size
    return zeros / total if total else 0.0


@dataclass
class LagrangianState:
    lam: float = 0.0
    tau: float = 0.75
    dual_lr: float = 0.01


def dual_update(state: LagrangianState, sparsity: float) -> LagrangianState:
    """Projected ascent on lambda with reset-to-zero once sparsity >= tau."""
    if sparsity >= state.tau:
        lam = 0.0
    else:
        lam = max(0.0, state.lam + state.dual_lr * (state.tau - sparsity))
    return LagrangianState(lam, state.tau, state.dual_lr)


def lagrangian_loss(batch, model: SIMoEModel, state: LagrangianState, ortho_weight: float):
    """Returns (loss, parts) where parts holds the scalar pieces as floats."""
    if state.lam < 0:
        raise ValueError("lambda must be non-negative")
    logits = model.batch_logits(batch)
    nll = ad.cross_entropy_logits(logits, batch.labels, batch.loss_mask)
    ortho = ortho_penalty(model)
    exp_sp = expected_model_sparsity(model)
    loss = nll
    if ortho_weight:
        loss = ad.add(loss, ad.scale(ortho, ortho_weight))
    if state.lam:
        loss = ad.add(loss, ad.scale(ad.sub(state.tau, exp_sp), state.lam))
    parts = {"nll": nll.item(), "ortho": ortho.item(), "expected_sparsity": exp_sp.item()}
    if not np.isfinite(loss.values).all():
        raise NumericError(f"non-finite loss: {parts}")
    return loss, parts


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam over parameter groups, each group with its own learning rate."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for ps, _ in self.groups for p in ps]
        self.v = [np.zeros_like(p.values) for ps, _ in self.groups for p in ps]

    @property
    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        k = 0
        for ps, lr in self.groups:
            for p in ps:
                g = p.grad if p.grad is not None else 0.0
                m, v = self.m[k], self.v[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                k += 1

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in enumerate(self.params):
            out[f"adam.m.{k}.{p.name}"] = self.m[k]
            out[f"adam.v.{k}.{p.name}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k, p in enumerate(self.params):
            self.m[k][...] = tensors[f"adam.m.{k}.{p.name}"]
            self.v[k][...] = tensors[f"adam.v.{k}.{p.name}"]


# ---------------------------------------------------------------- SIMoE training loop


@dataclass
class TrainState:
    model: SIMoEModel
    optimizer: Adam
    lagrange: LagrangianState
    config: ObjectiveConfig
    data: list[Example]
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def make_optimizer(model: SIMoEModel, cfg: ObjectiveConfig) -> Adam:
    deltas = [l.theta_delta for l in model.gated]
    gates = [l.log_phi for l in model.gated]
    router_lr = cfg.lr if cfg.router_lr is None else cfg.router_lr
    return Adam([(deltas, cfg.lr), (gates, cfg.gate_lr), (model.router.parameters(), router_lr)],
                cfg.beta1, cfg.beta2, cfg.eps)


def init_state(cfg: ObjectiveConfig, seed_model: TinyTransformer, dataset: Sequence[Example]) -> TrainState:
    cfg.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    policy = AttachmentPolicy.parse(cfg.attach)
    policy.include_lm_head = cfg.include_lm_head
    model = SIMoEModel.upcycle(seed_model, policy, cfg.n_experts, cfg.routing,
                               GateInit(cfg.target_active_prob, cfg.init_noise_std), cfg.d_router, cfg.seed)
    if not model.gated:
        raise ConfigError("attachment policy selected no layers")
    model.fit_router_inputs(dataset)
    return TrainState(model, make_optimizer(model, cfg), LagrangianState(0.0, cfg.tau, cfg.dual_lr), cfg,
                      list(dataset), 0, np.random.default_rng([cfg.seed, 3]))


def next_batch(state: TrainState):
    idx = batch_indices(len(state.data), state.config.batch_size, state.step, state.config.seed)
    return make_batch([state.data[i] for i in idx])


def train_step(batch, state: TrainState) -> dict:
    cfg = state.config
    state.optimizer.zero_grad()
    with ad.recording() as tape:
        try:
            loss, parts = lagrangian_loss(batch, state.model, state.lagrange, cfg.ortho_weight)
        except NumericError as e:
            raise NumericError(f"step {state.step}: {e}") from e
    ad.backward(loss, tape)
    gnorm = state.optimizer.grad_norm()
    state.optimizer.step()
    state.lagrange = dual_update(state.lagrange, parts["expected_sparsity"])
    state.step += 1
    return {
        "step": state.step,
        "nll": parts["nll"],
        "ortho": parts["ortho"],
        "expected_sparsity": parts["expected_sparsity"],
        "exact_sparsity": exact_sparsity(state.model),
        "lambda": state.lagrange.lam,
        "lr": cfg.lr,
        "grad_norm": gnorm,
    }


def save_train_state(path, state: TrainState) -> None:
    meta = {"train_step": state.step, "adam_t": state.optimizer.t, "lambda": state.lagrange.lam,
            "tau": state.lagrange.tau, "dual_lr": state.lagrange.dual_lr,
            "objective": asdict(state.config), "rng_state": state.rng.bit_generator.state}
    state.model.save(path, meta, extra=state.optimizer.state_tensors())


def load_train_state(path, seed_model: TinyTransformer, dataset: Sequence[Example]) -> TrainState:
    tensors, meta = checkpoint.load(path)
    cfg = ObjectiveConfig(**meta["objective"])
    model = SIMoEModel.load(path, seed_model)
    if cfg.routing == "instance":
        model.cache_embeddings([ex.prompt for ex in dataset])
    opt = make_optimizer(model, cfg)
    opt.load_state(tensors, meta["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model, opt, LagrangianState(meta["lambda"], meta["tau"], meta["dual_lr"]), cfg,
                      list(dataset), meta["train_step"], rng)


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    converged: bool
    final: dict

    @property
    def model(self) -> SIMoEModel:
        return self.state.model


def tensor_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def anchor_digest(model: SIMoEModel) -> str:
    return tensor_digest({l.layer_id.name: l.theta_pre.values for l in model.gated})


def train(cfg: ObjectiveConfig, seed_model: TinyTransformer, dataset: Sequence[Example],
          out_dir=None, state: TrainState | None = None, log_every: int = 0) -> TrainResult:
    """Attach, run ``cfg.steps`` Lagrangian steps, write metrics/checkpoints if ``out_dir`` is given."""
    state = init_state(cfg, seed_model, dataset) if state is None else state
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "a" if state.step else "w")
    metrics = []
    t0 = time.perf_counter()
    try:
        while state.step < cfg.steps:
            rec = train_step(next_batch(state), state)
            rec["wallclock_ms"] = round((time.perf_counter() - t0) * 1000.0, 3) if cfg.record_wallclock else 0.0
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
            if log_every and state.step % log_every == 0:
                log.info("step %d nll %.4f ortho %.3f exp_sp %.4f exact_sp %.4f lambda %.4g", state.step,
                         rec["nll"], rec["ortho"], rec["expected_sparsity"], rec["exact_sparsity"], rec["lambda"])
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_train_state(out / f"ckpt-{state.step:06d}", state)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    final = {
        "exact_sparsity": exact_sparsity(state.model),
        "expected_sparsity": expected_model_sparsity(state.model).item(),
        "lambda": state.lagrange.lam,
        "steps": state.step,
    }
    converged = final["exact_sparsity"] >= cfg.tau - 0.02
    final["converged"] = converged
    if not converged:
        log.warning("run did not reach the sparsity target: %.4f < %.4f", final["exact_sparsity"], cfg.tau - 0.02)
    if out is not None:
        state.model.save(out / "model", {"final": final})
    return TrainResult(state, metrics, converged, final)


# ---------------------------------------------------------------- dense training (seed + Full FT)


def dense_nll(model: TinyTransformer, batch, mask: np.ndarray | None = None) -> Tensor:
    return ad.cross_entropy_logits(model(batch.inputs), batch.labels,
                                   batch.loss_mask if mask is None else mask)


@dataclass
class DenseResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    diverged: bool = False


def _dense_loop(model: TinyTransformer, data: Sequence[Example], steps: int, batch_size: int, lr: float,
                seed: int, full_stream: bool, log_every: int = 0) -> DenseResult:
    opt = Adam([(model.parameters(), lr)])
    history = []
    first = None
    worse = 0
    diverged = False
    for step in range(steps):
        idx = batch_indices(len(data), batch_size, step, seed)
        batch = make_batch([data[i] for i in idx], full_stream=full_stream)
        opt.zero_grad()
        with ad.recording() as tape:
            loss = dense_nll(model, batch)
        if not np.isfinite(loss.values).all():
            raise NumericError(f"step {step}: non-finite loss")
        ad.backward(loss, tape)
        opt.step()
        v = loss.item()
        first = v if first is None else first
        worse = worse + 1 if v > first else 0
        if worse >= 200:
            diverged = True
            log.warning("training diverged at step %d (loss above initial for 200 steps)", step)
            break
        history.append({"step": step + 1, "nll": v})
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d nll %.4f", step + 1, v)
    params = {k: v.copy() for k, v in model.state_dict().items()}
    return DenseResult(params, history, diverged)


def pretrain(model_cfg: TinyTransformerConfig, corpus: Sequence[Example], cfg: PretrainConfig,
             log_every: int = 0) -> DenseResult:
    """Next-token training of a randomly initialised decoder on prompt+target streams."""
    if cfg.domains is not None:
        corpus = [ex for ex in corpus if ex.domain in cfg.domains]
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    model = TinyTransformer.from_params(model_cfg, init_params(model_cfg, cfg.seed), trainable=True)
    return _dense_loop(model, corpus, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed, cfg.full_stream, log_every)


def full_finetune(model_cfg: TinyTransformerConfig, seed_params: dict[str, np.ndarray],
                  corpus: Sequence[Example], cfg: FinetuneConfig, log_every: int = 0) -> DenseResult:
    """Every seed weight trainable, plain target NLL."""
    if not corpus:
        raise ConfigError("fine-tuning corpus is empty")
    model = TinyTransformer.from_params(model_cfg, seed_params, trainable=True)
    return _dense_loop(model, corpus, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed, False, log_every)


def save_dense(path, cfg: TinyTransformerConfig, params: dict[str, np.ndarray], meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind="dense", architecture=cfg.to_dict())
    return checkpoint.save(path, params, meta)


def load_dense(path) -> tuple[TinyTransformerConfig, dict[str, np.ndarray], dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "dense":
        raise checkpoint.CheckpointError(f"{path} is not a dense checkpoint")
    return TinyTransformerConfig(**meta["architecture"]), tensors, meta
