"""Shared setup for the experiment scripts: reference config, corpus and seed."""

import argparse
import logging
from pathlib import Path

from simoe import pipeline
from simoe.config import load_config, reference_config


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--config", type=Path, help="RunConfig JSON (default: the desk reference config)")
    p.add_argument("--seed-model", type=Path, help="reuse a pretrained seed instead of pretraining")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config) if args.config else reference_config()
    splits = pipeline.corpus(cfg)
    if args.seed_model:
        seed = pipeline.load_seed(args.seed_model)
    else:
        seed, _ = pipeline.run_pretrain(cfg, splits, args.out / "pretrain", log_every=200)
    return cfg, splits, seed
