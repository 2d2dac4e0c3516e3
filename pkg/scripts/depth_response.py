#!/usr/bin/env python3
"""Perturbation response versus model depth.

Nudging the post-embedding activations by one unit roundoff and reading
the final layer's output response shows how fast legitimate numerical
wobble grows with depth: a log-log slope well below 1 (square-root-like
accumulation), which is why one fixed threshold cannot serve both a
2-layer and a 32-layer model.
"""

import argparse

import numpy as np

from traindiff.checker import estimate_tolerance
from traindiff.engine import run_reference
from traindiff.model import ModelConfig
from traindiff.tensor import FloatFormat


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--depths", type=int, nargs="+",
                        default=[2, 4, 8, 16, 32])
    parser.add_argument("--samples", type=int, default=5)
    parser.add_argument("--precision", default="bf16")
    args = parser.parse_args()

    eps = FloatFormat.BF16.eps
    responses = []
    print(f"{'layers':>6}  {'response':>12}  {'x eps_bf16':>10}")
    for layers in args.depths:
        cfg = ModelConfig(layers=layers, d_model=32, n_heads=4, d_ff=64,
                          seq_len=16, vocab=64, precision=args.precision)
        tol = estimate_tolerance(
            lambda p: run_reference(cfg, microbatches=1, perturb=p).trace,
            n_samples=args.samples, eps_p=eps)
        response = tol.responses[f"iter=0|mb=0|kind=ActivationOut"
                                 f"|mod=model.layers.{layers - 1}.mlp"]
        responses.append(response)
        print(f"{layers:>6}  {response:>12.3e}  {response / eps:>10.2f}")
    slope = np.polyfit(np.log(args.depths), np.log(responses), 1)[0]
    print(f"\nlog-log slope: {slope:.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
