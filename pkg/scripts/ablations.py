"""Reference run plus the four ablation axes; writes ablations.json."""

import json

from threadpoolctl import threadpool_limits

from _common import parser, setup
from simoe import pipeline


def main():
    args = parser(__doc__).parse_args()
    with threadpool_limits(1):
        cfg, splits, seed = setup(args)
        _, ref = pipeline.run_upcycle(cfg, seed, splits, args.out / "reference")
        table = pipeline.ablations(cfg, seed, splits, ref, args.out / "ablations")
    print(json.dumps(table["rows"], indent=2))


if __name__ == "__main__":
    main()
