"""Seed, full fine-tuning and SIMoE on the same test split; writes baselines.json."""

from threadpoolctl import threadpool_limits

from _common import parser, setup
from simoe import pipeline
from simoe.evaluate import evaluate


def main():
    args = parser(__doc__).parse_args()
    with threadpool_limits(1):
        cfg, splits, seed = setup(args)
        _, simoe = pipeline.run_upcycle(cfg, seed, splits, args.out / "reference")
        _, ft = pipeline.run_finetune(cfg, seed, splits, args.out / "full_ft")
        table = pipeline.baseline_table(simoe, ft, evaluate(seed, splits["test"]))
    pipeline.write_json(args.out / "baselines.json", table)
    for row in table["rows"]:
        print(f"{row['method']:8s} EM {row['exact_match']:.3f}  token acc {row['token_accuracy']:.3f}  "
              f"trainable {row.get('trainable_params', '-')}  active {row.get('active_params', '-')}")


if __name__ == "__main__":
    main()
