"""Greedy decoding and exact-match / token-accuracy evaluation."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import EOS, Example, make_batch
from .model import TinyTransformer
from .upcycled import SIMoEModel


def _logits(model, ids: np.ndarray, prompts) -> np.ndarray:
    with ad.no_grad():
        if isinstance(model, SIMoEModel):
            return model(ids, prompts).values
        return model(ids).values


def greedy_decode(model, prompts: Sequence[Sequence[int]], max_seq: int | None = None,
                  chunk: int = 256) -> list[list[int]]:
    """Decode each prompt until EOS (kept) or the context is full."""
    max_seq = max_seq or model.cfg.max_seq
    out: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        by_len[len(p)].append(i)
    for length in sorted(by_len):
        group = by_len[length]
        for s in range(0, len(group), chunk):
            part = group[s:s + chunk]
            seqs = np.array([prompts[i] for i in part], dtype=np.int64)
            ps = [list(prompts[i]) for i in part]
            done = np.zeros(len(part), dtype=bool)
            while seqs.shape[1] < max_seq and not done.all():
                nxt = _logits(model, seqs, ps)[:, -1].argmax(axis=-1)
                nxt = np.where(done, EOS, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOS
            for row, i in enumerate(part):
                gen = seqs[row, length:].tolist()
                if EOS in gen:
                    gen = gen[:gen.index(EOS) + 1]
                out[i] = gen
    return out  # type: ignore[return-value]


def evaluate(model, dataset: Sequence[Example], chunk: int = 256) -> dict:
    """Exact match of greedy decodes, teacher-forced token accuracy, per-domain breakdown.

    Token accuracy is averaged per example first, so it can never fall below
    exact match. For SIMoE models the mean expert activation per domain is
    included as well.
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    decoded = greedy_decode(model, [ex.prompt for ex in dataset], chunk=chunk)
    em = np.array([d == ex.target for d, ex in zip(decoded, dataset)], dtype=float)
    tok = np.zeros(len(dataset))
    alphas = np.zeros((len(dataset), model.n_experts)) if isinstance(model, SIMoEModel) else None
    for s in range(0, len(dataset), chunk):
        exs = list(dataset[s:s + chunk])
        b = make_batch(exs)
        logits = _logits(model, b.inputs, [ex.prompt for ex in exs])
        hit = (logits.argmax(-1) == b.labels) * b.loss_mask
        tok[s:s + len(exs)] = hit.sum(1) / b.loss_mask.sum(1)
        if alphas is not None:
            with ad.no_grad():
                a = model.alphas(b.inputs, [ex.prompt for ex in exs]).values
            if a.shape[1] == 1:
                alphas[s:s + len(exs)] = a[:, 0]
            else:
                valid = (b.inputs != 0) | (np.arange(b.inputs.shape[1])[None, :] == 0)
                alphas[s:s + len(exs)] = (a * valid[..., None]).sum(1) / valid.sum(1, keepdims=True)
    per_domain = {}
    mean_alpha = {}
    domains = sorted({ex.domain for ex in dataset})
    for d in domains:
        idx = np.array([i for i, ex in enumerate(dataset) if ex.domain == d])
        per_domain[d] = {"exact_match": float(em[idx].mean()), "token_accuracy": float(tok[idx].mean()),
                         "n": int(idx.size)}
        if alphas is not None:
            mean_alpha[d] = alphas[idx].mean(axis=0).tolist()
    result = {"exact_match": float(em.mean()), "token_accuracy": float(tok.mean()),
              "n": len(dataset), "per_domain": per_domain}
    if alphas is not None:
        result["mean_alpha"] = mean_alpha
        result["routing"] = model.routing
    return result
