"""Sweep every fusion option of a model family and tabulate cost and error.

For each option x/n the script fuses a freshly initialized model, checks the
max-abs output difference against the original on a random input, prunes
conservatively, materializes, and reports FLOP totals plus the share of work
in parametric (COP) versus scalar (SOP) operators. The final column applies
the analytical speedup model to the COP share, assuming the given
acceleration factor for parametric work.

Example:

    python3 scripts/sweep_options.py --family resnet20 --factor 4
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from fuseprune.analysis import count_flops, speedup
from fuseprune.fusion import fuse
from fuseprune.graph import execute
from fuseprune.pruning import PruneConfig, materialize, soft_prune_epoch
from fuseprune.tensor import Tensor
from fuseprune.zoo import ZooSpec, build


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--family", default="resnet20")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dtype", default="f32", choices=("f32", "f64"))
    ap.add_argument("--factor", type=float, default=2.0,
                    help="assumed acceleration of parametric work (default 2.0)")
    return ap.parse_args(argv)


def stage_count(g):
    return len({t.split(".")[0] for n in g.nodes.values()
                for t in n.tags if t.startswith("stage")})


def main(argv=None):
    args = parse_args(argv if argv is not None else sys.argv[1:])
    g = build(ZooSpec(family=args.family, dtype=args.dtype, seed=args.seed))
    n = stage_count(g)
    dt = np.float32 if args.dtype == "f32" else np.float64
    x = Tensor((np.random.default_rng(args.seed).standard_normal(
        (1,) + g.input_shape[1:]) * 0.1).astype(dt))
    y0 = execute(g, x).data
    base = count_flops(g)
    base_cop = base.category_flops()["COP"] / base.total_flops

    print(f"{args.family} seed {args.seed} ({args.dtype}): "
          f"{base.total_flops:,} flops, COP share {base_cop:.3f}")
    print(f"{'option':<8} {'max|diff|':>10} {'fused':>13} {'materialized':>13} "
          f"{'COP share':>10} {'est. speedup':>12}")
    for x_stages in range(0, n + 1):
        option = f"{x_stages}/{n}"
        fused, report = fuse(g, option)
        diff = float(np.max(np.abs(execute(fused, x).data - y0)))
        work = fused.copy()
        mask = soft_prune_epoch(work, report, PruneConfig(mode="conservative"))
        final = materialize(work, mask, report).graph
        rep = count_flops(final)
        cop = rep.category_flops()["COP"] / rep.total_flops
        est = speedup(cop, args.factor)
        print(f"{option:<8} {diff:>10.2e} {count_flops(fused).total_flops:>13,} "
              f"{rep.total_flops:>13,} {cop:>10.3f} {est:>12.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
