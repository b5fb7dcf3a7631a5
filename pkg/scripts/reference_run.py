"""Pretrain the seed and run the reference SIMoE upcycle; prints the headline numbers."""

import json

from threadpoolctl import threadpool_limits

from _common import parser, setup
from simoe import pipeline


def main():
    args = parser(__doc__).parse_args()
    with threadpool_limits(1):
        cfg, splits, seed = setup(args)
        _, rep = pipeline.run_upcycle(cfg, seed, splits, args.out / "reference", log_every=200)
    print(json.dumps({"final": rep["final"], "test_exact_match": rep["test"]["exact_match"],
                      "mean_overlap": rep["overlap"]["mean_off_diagonal"],
                      "routing_merges": rep.get("routing", {}).get("merges")}, indent=2))


if __name__ == "__main__":
    main()
