"""Vocabulary, synthetic instruction tasks and the JSONL corpus format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<sep>"]
VOCAB_SIZE = 64
ALPHABET_SIZE = 10
INSTR_BASE = len(SPECIALS)
PAYLOAD_BASE = VOCAB_SIZE - ALPHABET_SIZE
N_INSTR = PAYLOAD_BASE - INSTR_BASE


class ConfigError(ValueError):
    pass


def _token_strings() -> list[str]:
    toks = list(SPECIALS)
    toks += [f"i{j:02d}" for j in range(N_INSTR)]
    toks += [f"s{j}" for j in range(ALPHABET_SIZE)]
    return toks


class Tokenizer:
    """Whitespace tokenizer over the fixed 64-symbol vocabulary."""

    def __init__(self):
        self.itos = _token_strings()
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[t] for t in text.split()]
        except KeyError as e:
            raise ValueError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids)


def sym(j: int) -> int:
    """Token id of payload symbol j."""
    return PAYLOAD_BASE + j


def unsym(t: int) -> int:
    return t - PAYLOAD_BASE


# transformations act on payload symbol indices in [0, ALPHABET_SIZE)


def copy(p: Sequence[int]) -> list[int]:
    return list(p)


def reverse(p: Sequence[int]) -> list[int]:
    return list(p)[::-1]


def sort_ascending(p: Sequence[int]) -> list[int]:
    return sorted(p)


def add_k_mod_v(p: Sequence[int], k: int = 1, v: int = ALPHABET_SIZE) -> list[int]:
    return [(x + k) % v for x in p]


def last_token_repeat(p: Sequence[int]) -> list[int]:
    return list(p) + [p[-1]]


TRANSFORMS: dict[str, Callable[[Sequence[int]], list[int]]] = {
    "copy": copy,
    "reverse": reverse,
    "sort_ascending": sort_ascending,
    "add_k_mod_v": add_k_mod_v,
    "last_token_repeat": last_token_repeat,
}


@dataclass(frozen=True)
class SyntheticTask:
    domain: str
    instruction: tuple[int, int, int]
    transform: str
    length_range: tuple[int, int] = (3, 8)

    def apply(self, payload: Sequence[int]) -> list[int]:
        return TRANSFORMS[self.transform](payload)


def _instruction_triples() -> dict[str, tuple[int, int, int]]:
    # fixed, pairwise-distinct triples drawn once from a constant seed
    rng = np.random.default_rng(20240131)
    ids = rng.permutation(N_INSTR)[: 3 * len(TRANSFORMS)] + INSTR_BASE
    return {name: tuple(int(t) for t in ids[3 * i: 3 * i + 3]) for i, name in enumerate(TRANSFORMS)}


INSTRUCTIONS = _instruction_triples()
TASKS = {name: SyntheticTask(name, INSTRUCTIONS[name], name) for name in TRANSFORMS}


@dataclass
class Example:
    id: str
    domain: str
    prompt: list[int]
    target: list[int]

    def to_json(self) -> dict:
        return {"id": self.id, "domain": self.domain, "prompt": self.prompt, "target": self.target}

    @classmethod
    def from_json(cls, obj: dict) -> "Example":
        return cls(str(obj["id"]), str(obj["domain"]), [int(t) for t in obj["prompt"]],
                   [int(t) for t in obj["target"]])


def make_example(task: SyntheticTask, payload: Sequence[int], ex_id: str) -> Example:
    prompt = list(task.instruction) + [SEP] + [sym(x) for x in payload] + [SEP]
    target = [sym(x) for x in task.apply(payload)] + [EOS]
    return Example(ex_id, task.domain, prompt, target)


def generate_examples(domain: str, n: int, rng: np.random.Generator) -> list[Example]:
    if domain not in TASKS:
        raise ConfigError(f"unknown domain {domain!r}; known: {sorted(TASKS)}")
    task = TASKS[domain]
    lo, hi = task.length_range
    out = []
    for i in range(n):
        length = int(rng.integers(lo, hi + 1))
        payload = rng.integers(0, ALPHABET_SIZE, size=length).tolist()
        out.append(make_example(task, payload, f"{domain}-{i:05d}"))
    return out


def generate_corpus(
    domains: Sequence[str],
    n_per_domain: int,
    split_fracs: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    held_out: Sequence[str] = (),
) -> dict[str, list[Example]]:
    """Split examples into train/val/test. Held-out domains go to test only."""
    if n_per_domain < 1:
        raise ConfigError("n_per_domain must be >= 1")
    if len(split_fracs) != 3 or abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three numbers summing to 1, got {split_fracs}")
    for d in list(domains) + list(held_out):
        if d not in TASKS:
            raise ConfigError(f"unknown domain {d!r}; known: {sorted(TASKS)}")
    splits: dict[str, list[Example]] = {"train": [], "val": [], "test": []}
    for k, domain in enumerate(domains):
        rng = np.random.default_rng([seed, k])
        exs = generate_examples(domain, n_per_domain, rng)
        n_train = int(round(split_fracs[0] * n_per_domain))
        n_val = int(round(split_fracs[1] * n_per_domain))
        if domain in held_out:
            splits["test"] += exs
            continue
        splits["train"] += exs[:n_train]
        splits["val"] += exs[n_train:n_train + n_val]
        splits["test"] += exs[n_train + n_val:]
    for k, domain in enumerate(d for d in held_out if d not in domains):
        rng = np.random.default_rng([seed, len(domains) + k])
        n_test = max(1, int(round(split_fracs[2] * n_per_domain)))
        splits["test"] += generate_examples(domain, n_test, rng)
    return splits


def write_jsonl(path: str | os.PathLike, examples: Iterable[Example]) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[Example]:
    with open(path) as f:
        return [Example.from_json(json.loads(line)) for line in f if line.strip()]


def write_corpus(out_dir: str | os.PathLike, splits: dict[str, list[Example]]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, exs in splits.items():
        paths[name] = out / f"{name}.jsonl"
        write_jsonl(paths[name], exs)
    return paths


@dataclass
class Batch:
    """Right-padded teacher-forcing batch.

    ``inputs[b, t]`` predicts ``labels[b, t]``; ``loss_mask`` selects target
    positions and ``prompt_len`` locates the instance-embedding position.
    """

    inputs: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    prompt_len: np.ndarray
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)


def make_batch(examples: Sequence[Example], full_stream: bool = False) -> Batch:
    seqs = [ex.prompt + ex.target for ex in examples]
    T = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    labels = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, (ex, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        inputs[b, :n] = s[:-1]
        labels[b, :n] = s[1:]
        start = 0 if full_stream else len(ex.prompt) - 1
        mask[b, start:n] = 1.0
    plen = np.array([len(ex.prompt) for ex in examples], dtype=np.int64)
    return Batch(inputs, labels, mask, plen, list(examples))


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Stateless shuffled batching: step -> indices, one permutation per epoch."""
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]
