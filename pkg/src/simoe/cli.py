"""``simoe`` command line: one pipeline stage per invocation.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis, pipeline
from .config import ConfigError, RunConfig, load_config, write_config
from .evaluate import evaluate
from .layers import AttachmentError
from .model import TinyTransformer, init_params
from .upcycled import SIMoEModel

log = logging.getLogger("simoe")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simoe", description="Sparse interpolated mixture-of-experts upcycling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, data=True):
        sp.add_argument("--config", type=Path, help="RunConfig JSON; flags override it")
        sp.add_argument("--seed", type=int, help="seed for the stage (data, init, batching)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        if data:
            sp.add_argument("--data", type=Path, help="corpus directory with train/val/test.jsonl "
                                                      "(generated from the config when omitted)")

    def objective(sp):
        sp.add_argument("--tau", type=float)
        sp.add_argument("--ortho-weight", type=float)
        sp.add_argument("--experts", type=int)
        sp.add_argument("--attach", help="all | ffn | comma-separated layer names")
        sp.add_argument("--routing", choices=["instance", "token"])
        sp.add_argument("--steps", type=int)

    sp = sub.add_parser("gen-data", help="write the synthetic corpus as JSONL")
    common(sp, data=False)

    sp = sub.add_parser("pretrain", help="train the dense seed model")
    common(sp)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("upcycle", help="SIMoE training on top of a frozen seed")
    common(sp)
    sp.add_argument("--seed-model", type=Path, required=True)
    objective(sp)

    sp = sub.add_parser("finetune", help="full fine-tuning baseline")
    common(sp)
    sp.add_argument("--seed-model", type=Path, required=True)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("eval", help="exact match / token accuracy of any checkpoint")
    common(sp)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--split", choices=pipeline.SPLITS, default="test")

    sp = sub.add_parser("analyze", help="overlap, capacity or routing diagnostics")
    sp.add_argument("what", choices=["overlap", "capacity", "routing"])
    common(sp)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--split", choices=pipeline.SPLITS, default="test")

    sp = sub.add_parser("export", help="write the pruned model")
    common(sp, data=False)
    sp.add_argument("--model", type=Path, required=True)

    sp = sub.add_parser("gradcheck", help="full-objective gradient vs finite differences")
    common(sp, out_required=False)
    sp.add_argument("--seed-model", type=Path, help="dense seed (fresh random init when omitted)")
    sp.add_argument("--max-entries", type=int, default=8, help="probed entries per parameter tensor")
    objective(sp)

    sp = sub.add_parser("sweep", help="grid over tau and ortho weight")
    common(sp)
    sp.add_argument("--seed-model", type=Path, required=True)
    sp.add_argument("--taus", type=_floats, default=[0.5, 0.75, 0.9])
    sp.add_argument("--ortho-weights", type=_floats, default=[0.0, 5e-3])
    objective(sp)
    return p


def resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    up = {}
    for flag, key in (("tau", "tau"), ("ortho_weight", "ortho_weight"), ("experts", "n_experts"),
                      ("attach", "attach"), ("routing", "routing")):
        v = getattr(args, flag, None)
        if v is not None:
            up[key] = v
    steps = getattr(args, "steps", None)
    if args.command in ("upcycle", "sweep", "gradcheck") and steps is not None:
        up["steps"] = steps
    if args.seed is not None:
        up["seed"] = args.seed
    cfg = dataclasses.replace(cfg, upcycle=dataclasses.replace(cfg.upcycle, **up))
    if args.command == "pretrain":
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(
            cfg.pretrain, **_some(steps=steps, seed=args.seed)))
    if args.command == "finetune":
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(
            cfg.finetune, **_some(steps=steps, seed=args.seed)))
    if args.command == "gen-data" and args.seed is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=args.seed))
    cfg.upcycle.validate()
    return cfg


def _some(**kw):
    return {k: v for k, v in kw.items() if v is not None}


def _snapshot(out: Path | None, cfg: RunConfig, args) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    d["invocation"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    write_config(out / "resolved_config.json", d)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _simoe(path) -> SIMoEModel:
    m = pipeline.load_model(path)
    if not isinstance(m, SIMoEModel):
        raise ConfigError(f"{path} is a dense checkpoint; this command needs a SIMoE model")
    return m


def run(args) -> int:
    cfg = resolve(args)
    out: Path | None = args.out
    cmd = args.command
    log_every = 100 if args.verbose else 0

    if cmd == "gen-data":
        info = pipeline.gen_data(cfg, out)
        _snapshot(out, cfg, args)
        _emit(info)
        return 0

    splits = pipeline.corpus(cfg, getattr(args, "data", None)) if cmd != "export" else None

    if cmd == "pretrain":
        _, report = pipeline.run_pretrain(cfg, splits, out, log_every)
        _snapshot(out, cfg, args)
        _emit({"final_nll": report["final_nll"], "diverged": report["diverged"],
               "val_token_accuracy": {d: v["token_accuracy"] for d, v in report["val"]["per_domain"].items()}})
        return 1 if report["diverged"] else 0

    if cmd == "upcycle":
        seed = pipeline.load_seed(args.seed_model)
        _, report = pipeline.run_upcycle(cfg, seed, splits, out, log_every)
        _snapshot(out, cfg, args)
        _emit({"final": report["final"], "test_exact_match": report["test"]["exact_match"],
               "mean_overlap": report["overlap"]["mean_off_diagonal"]})
        return 0

    if cmd == "finetune":
        seed = pipeline.load_seed(args.seed_model)
        _, report = pipeline.run_finetune(cfg, seed, splits, out, log_every)
        _snapshot(out, cfg, args)
        _emit({"test_exact_match": report["test"]["exact_match"],
               "test_token_accuracy": report["test"]["token_accuracy"]})
        return 1 if report["diverged"] else 0

    if cmd == "eval":
        model = pipeline.load_model(args.model)
        res = evaluate(model, splits[args.split])
        _snapshot(out, cfg, args)
        pipeline.write_json(out / "eval.json", res)
        _emit({k: res[k] for k in ("exact_match", "token_accuracy", "n")})
        return 0

    if cmd == "analyze":
        model = _simoe(args.model)
        _snapshot(out, cfg, args)
        if args.what == "overlap":
            rep = analysis.overlap_report(model)
            pipeline.write_json(out / "overlap.json", rep)
            _emit({"matrix": rep["matrix"], "mean_off_diagonal": rep["mean_off_diagonal"]})
        elif args.what == "capacity":
            rep = analysis.capacity_report(model)
            pipeline.write_json(out / "capacity.json", rep)
            _emit({"by_kind": rep["by_kind"], "by_depth": rep["by_depth"]})
        else:
            ev = evaluate(model, splits[args.split])
            rep = pipeline.routing_report(ev["mean_alpha"])
            pipeline.write_json(out / "dendrogram.json", rep)
            _emit({"merges": rep["merges"], "pairwise_cosine": rep["pairwise_cosine"]})
        return 0

    if cmd == "export":
        model = _simoe(args.model)
        _snapshot(out, cfg, args)
        path = analysis.export_pruned(model, out / "pruned")
        pr = analysis.active_param_count(model, pruned=True)
        un = analysis.active_param_count(model, pruned=False)
        info = {"path": str(path), "active_params": pr["total"], "unpruned_params": un["total"],
                "ratio": pr["total"] / un["total"]}
        pipeline.write_json(out / "export.json", info)
        _emit(info)
        return 0

    if cmd == "gradcheck":
        if args.seed_model is not None:
            seed = pipeline.load_seed(args.seed_model)
        else:
            seed = TinyTransformer.from_params(cfg.model, init_params(cfg.model, cfg.upcycle.seed))
        examples = splits["train"][:2]
        res = pipeline.gradcheck(seed, examples, cfg.upcycle, max_entries=args.max_entries,
                                 seed_value=cfg.upcycle.seed)
        res["passed"] = bool(res["max_rel_err"] < 1e-4)
        if out is not None:
            _snapshot(out, cfg, args)
            pipeline.write_json(out / "gradcheck.json", res)
        _emit(res)
        return 0 if res["passed"] else 1

    if cmd == "sweep":
        seed = pipeline.load_seed(args.seed_model)
        rows = pipeline.sweep(cfg, seed, splits, args.taus, args.ortho_weights, out)
        _snapshot(out, cfg, args)
        _emit(rows)
        return 0

    raise AssertionError(cmd)  # argparse restricts the choices


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("SIMOE_THREADS", "1"))
    try:
        with threadpool_limits(limits=max(1, threads)):
            return run(args)
    except (ConfigError, AttachmentError) as e:
        print(f"simoe: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"simoe: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
