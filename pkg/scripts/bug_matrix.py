#!/usr/bin/env python3
"""Detection table for every cataloged bug.

Runs each bug in the smallest layout that exercises its mechanism, in
both checking modes, and prints where the first divergence landed and how
far the observed deviation sits above the calibrated tolerance.
"""

import argparse
import fnmatch

from traindiff.bugs import BUG_CATALOG, BugInjection
from traindiff.checker import check, estimate_tolerance
from traindiff.engine import ParallelConfig, run_candidate, run_reference
from traindiff.model import ModelConfig
from traindiff.tensor import FloatFormat

LAYOUTS = {
    "WD_STALE_INPUT":      ParallelConfig(dp=2, microbatches=4),
    "WD_WRONG_SCALE":      ParallelConfig(tp=2, microbatches=2),
    "WD_LAYOUT":           ParallelConfig(cp=2, microbatches=2),
    "WC_WRONG_ORDER":      ParallelConfig(tp=2, sp=True, microbatches=2),
    "WC_WRONG_GROUP":      ParallelConfig(dp=2, cp=2, microbatches=2),
    "WC_WRONG_REDUCE_OP":  ParallelConfig(tp=2, sp=True, microbatches=2),
    "MC_TP_ROW_ALLREDUCE": ParallelConfig(tp=2, microbatches=2),
    "MC_SP_NORM_GRAD":     ParallelConfig(tp=2, sp=True, microbatches=2),
    "MC_DP_GRAD":          ParallelConfig(dp=2, microbatches=2),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=5)
    parser.add_argument("--mode", choices=("cascade", "module-wise", "both"),
                        default="both")
    args = parser.parse_args()

    cfg = ModelConfig(layers=2, d_model=32, n_heads=4, d_ff=64, seq_len=16,
                      vocab=64, precision="bf16")
    eps = FloatFormat.BF16.eps
    modes = {"cascade": (False,), "module-wise": (True,),
             "both": (False, True)}[args.mode]
    cache = {}

    def ref_and_tol(m: int, rewrite: bool):
        if (m, rewrite) not in cache:
            ref = run_reference(cfg, microbatches=m, rewrite=rewrite).trace
            tol = estimate_tolerance(
                lambda p: run_reference(cfg, microbatches=m, rewrite=rewrite,
                                        perturb=p).trace,
                n_samples=args.samples, eps_p=eps)
            cache[m, rewrite] = (ref, tol)
        return cache[m, rewrite]

    print(f"{'bug':<20} {'mode':<12} {'exit':<4} {'obs/tol':>8}  first divergence")
    for bug_id, pcfg in LAYOUTS.items():
        site = BUG_CATALOG[bug_id].default_site
        for rewrite in modes:
            ref, tol = ref_and_tol(pcfg.microbatches, rewrite)
            cand = run_candidate(cfg, pcfg, (BugInjection(bug_id),),
                                 rewrite=rewrite).trace
            report = check(ref, cand, tol, kappa=3.0, fmt=FloatFormat.BF16)
            first = report.earliest_divergence
            entry = next(e for e in report.entries if e.ident == first)
            module = first.split("|mod=", 1)[1]
            hit = "" if fnmatch.fnmatchcase(module, site) else "  (off-site!)"
            ratio = entry.observed / max(entry.tolerance, eps)
            print(f"{bug_id:<20} {report.mode:<12} {report.exit_code():<4} "
                  f"{ratio:>8.1f}  {first}{hit}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
