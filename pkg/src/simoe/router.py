"""Soft expert routing from frozen seed-model embeddings."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, NumericError, Tensor
from .data import PAD
from .model import TinyTransformer


class RouterNet:
    """One-hidden-layer MLP: standardized embedding -> tanh -> logits over M experts.

    The output layer starts at zero so every expert gets 1/M at step 0.
    ``in_mean``/``in_std`` are frozen input statistics (identity until
    ``set_input_stats``). Centering keeps the router from chasing the
    gradient component shared by every input, which otherwise drives all
    inputs onto whichever expert first holds the most delta.
    """

    def __init__(self, d_model: int, n_experts: int, d_router: int | None = None,
                 mode: str = "instance", rng: np.random.Generator | None = None):
        if mode not in ("instance", "token"):
            raise ValueError(f"routing mode must be instance or token, got {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        d_router = d_model if d_router is None else d_router
        self.mode = mode
        self.nonlinearity = "tanh"
        self.w_hidden = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_router, d_model)),
                               requires_grad=True, name="router.w_hidden")
        self.w_out = Tensor(np.zeros((n_experts, d_router)), requires_grad=True, name="router.w_out")
        self.in_mean = np.zeros(d_model)
        self.in_std = np.ones(d_model)

    @property
    def n_experts(self) -> int:
        return self.w_out.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_hidden, self.w_out]

    def set_input_stats(self, embeddings: np.ndarray, min_std: float = 1e-6) -> None:
        """Freeze per-feature mean and std of ``embeddings`` ([N, d_model])."""
        e = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.in_mean.size)
        if e.shape[0] == 0:
            raise DegenerateInputError("no embeddings to take statistics from")
        self.in_mean = e.mean(axis=0)
        self.in_std = np.maximum(e.std(axis=0), min_std)

    def logits(self, emb) -> Tensor:
        x = (np.asarray(emb, dtype=np.float64) - self.in_mean) / self.in_std
        return ad.linear(ad.tanh(ad.linear(x, self.w_hidden)), self.w_out)

    def __call__(self, emb) -> Tensor:
        z = self.logits(emb)
        if not np.isfinite(z.values).all():
            raise NumericError("router produced non-finite logits")
        return ad.softmax(z)


def route(router: RouterNet, embedding) -> Tensor:
    """alpha = softmax(MLP(embedding)); works for [d] or [B, d]."""
    return router(embedding)


def token_route(router: RouterNet, token_embeddings) -> Tensor:
    """Per-position activations for [T, d] or [B, T, d] hidden states."""
    return router(token_embeddings)


def seed_hidden(seed: TinyTransformer, ids: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return seed.hidden(ids).values


def instance_embedding(seed: TinyTransformer, prompt_tokens: Sequence[int]) -> np.ndarray:
    """Final-layer hidden state of the frozen seed model at the last prompt token."""
    if len(prompt_tokens) == 0:
        raise DegenerateInputError("empty prompt has no instance embedding")
    h = seed_hidden(seed, np.asarray(prompt_tokens)[None, :])
    return h[0, -1].copy()


def instance_embeddings(seed: TinyTransformer, prompts: Sequence[Sequence[int]],
                        chunk: int = 256) -> np.ndarray:
    """Batch version of ``instance_embedding``; groups prompts by length so no padding is needed."""
    if any(len(p) == 0 for p in prompts):
        raise DegenerateInputError("empty prompt has no instance embedding")
    out = np.zeros((len(prompts), seed.cfg.d_model))
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            ids = np.array([prompts[i] for i in part], dtype=np.int64)
            out[part] = seed_hidden(seed, ids)[:, -1]
    return out


def token_embeddings(seed: TinyTransformer, ids: np.ndarray) -> np.ndarray:
    """[B, T, d] frozen hidden states; right padding never leaks backwards (causal)."""
    ids = np.asarray(ids)
    return seed_hidden(seed, np.where(ids < 0, PAD, ids))
