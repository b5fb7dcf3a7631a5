"""Grid over tau and ortho weight on one seed; writes sweep.json."""

import json

from threadpoolctl import threadpool_limits

from _common import parser, setup
from simoe import pipeline


def main():
    p = parser(__doc__)
    p.add_argument("--taus", type=float, nargs="+", default=[0.5, 0.75, 0.9])
    p.add_argument("--ortho-weights", type=float, nargs="+", default=[0.0, 5e-6, 5e-3])
    args = p.parse_args()
    with threadpool_limits(1):
        cfg, splits, seed = setup(args)
        rows = pipeline.sweep(cfg, seed, splits, args.taus, args.ortho_weights, args.out / "sweep")
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
