"""Command-line front end for the differential-testing pipeline.

The full workflow is four commands sharing one experiment config::

    traindiff simulate cfg.yaml --role ref  --out ref.trace
    traindiff simulate cfg.yaml --role cand --out cand.trace
    traindiff estimate-tol cfg.yaml --out tol.json
    traindiff check --ref ref.trace --cand cand.trace --tol tol.json

Exit codes: 0 clean, 1 usage/config/file errors, 2 tolerance flags,
3 replica or merge failures, 4 trace-format or run-compatibility errors.
Relative paths are resolved under ``$TRAINDIFF_OUT`` when it is set.

All artifacts (traces, tolerance files, reports) are deterministic:
repeating an invocation reproduces them byte for byte.
"""

import argparse
import itertools
import os
import sys
from pathlib import Path

from .bugs import BUG_CATALOG, BugInjection
from .checker import ToleranceMap, check, estimate_tolerance, render_report
from .config import RunConfig
from .engine import ParallelConfig, run_candidate, run_reference, \
    validate_parallel
from .errors import (ConfigInvalid, DigestMismatch, FormatError,
                     TraindiffError)
from .tensor import POLICIES
from .tracestore import Trace, read_trace, write_trace


def _resolve(path: str) -> Path:
    base = os.environ.get("TRAINDIFF_OUT")
    p = Path(path)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _write(path: str, data: bytes) -> Path:
    out = _resolve(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    return out


def _format_of(trace: Trace):
    model = trace.header.get("model")
    precision = model.get("precision") if isinstance(model, dict) else None
    if precision not in POLICIES:
        raise FormatError(
            f"trace header lacks a known model precision (got {precision!r})")
    return POLICIES[precision].storage


def _cmd_simulate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    rewrite = cfg.rewrite or args.rewrite_inputs
    flt = cfg.trace_filter()
    if args.role == "ref":
        # the reference is the trusted run: single device, no injections
        result = run_reference(cfg.model,
                               microbatches=cfg.parallel.microbatches,
                               rewrite=rewrite, lr=cfg.lr, trace_filter=flt)
    else:
        result = run_candidate(cfg.model, cfg.parallel,
                               injections=cfg.enabled_bugs(),
                               rewrite=rewrite, lr=cfg.lr, trace_filter=flt)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(result.trace, out)
    losses = " ".join(f"{loss:.6g}" for loss in result.losses)
    print(f"wrote {out} ({len(result.trace.records)} records); "
          f"microbatch losses: {losses}")
    return 0


def _cmd_estimate_tol(args) -> int:
    cfg = RunConfig.from_file(args.config)
    flt = cfg.trace_filter()

    def runner(perturb):
        return run_reference(cfg.model,
                             microbatches=cfg.parallel.microbatches,
                             rewrite=cfg.rewrite, perturb=perturb, lr=cfg.lr,
                             trace_filter=flt).trace

    tol = estimate_tolerance(runner, n_samples=cfg.n_samples,
                             eps_p=cfg.effective_eps_p(),
                             aggregation=cfg.aggregation)
    out = _write(args.out, tol.to_json())
    print(f"wrote {out} ({len(tol.responses)} responses, "
          f"eps_p={tol.eps_p:g}, n_samples={tol.n_samples})")
    return 0


def _cmd_check(args) -> int:
    ref = read_trace(_resolve(args.ref))
    cand = read_trace(_resolve(args.cand))
    try:
        blob = _resolve(args.tol).read_bytes()
    except OSError as exc:
        raise ConfigInvalid(f"--tol: {exc}")
    tol = ToleranceMap.from_json(blob)
    report = check(ref, cand, tol, kappa=args.k, fmt=_format_of(cand))
    rendered = render_report(report, "json" if args.json else "text")
    sys.stdout.write(rendered if rendered.endswith("\n") else rendered + "\n")
    return report.exit_code()


_GRID_KEYS = ("dp", "tp", "pp", "vp", "cp", "sp")
_DEFAULT_GRID = {"dp": (1, 2), "tp": (1, 2), "pp": (1, 2), "vp": (1, 2),
                 "cp": (1, 2), "sp": (0, 1)}


def _parse_grid(tokens) -> dict:
    grid = dict(_DEFAULT_GRID)
    for token in tokens or ():
        key, sep, values = token.partition("=")
        if not sep or key not in _GRID_KEYS:
            raise ConfigInvalid(
                f"--grid: bad token {token!r}; want key=v1,v2 with key in "
                f"{'/'.join(_GRID_KEYS)}")
        try:
            parsed = tuple(int(v) for v in values.split(","))
        except ValueError:
            raise ConfigInvalid(f"--grid: {token!r}: values must be integers")
        if not parsed or (key == "sp" and any(v not in (0, 1)
                                              for v in parsed)):
            raise ConfigInvalid(f"--grid: {token!r}: sp values must be 0 or 1")
        grid[key] = parsed
    return grid


def _parse_bug_selection(text: str) -> tuple[str, ...]:
    if text == "all":
        return tuple(sorted(BUG_CATALOG))
    if text == "none":
        return ()
    ids = tuple(part for part in text.split(",") if part)
    for bug_id in ids:
        if bug_id not in BUG_CATALOG:
            raise ConfigInvalid(f"--bugs: unknown id {bug_id!r}; "
                                f"see `traindiff bugs list`")
    return ids


def _cmd_sweep(args) -> int:
    cfg = RunConfig.from_file(args.config)
    grid = _parse_grid(args.grid)
    bug_ids = _parse_bug_selection(args.bugs)
    flt = cfg.trace_filter()
    microbatches = cfg.parallel.microbatches

    def runner(perturb):
        return run_reference(cfg.model, microbatches=microbatches,
                             rewrite=cfg.rewrite, perturb=perturb, lr=cfg.lr,
                             trace_filter=flt).trace

    ref = runner(None)
    tol = estimate_tolerance(runner, n_samples=cfg.n_samples,
                             eps_p=cfg.effective_eps_p(),
                             aggregation=cfg.aggregation)
    fmt = cfg.storage_format()
    failures = 0
    points = skipped = 0
    for dp, tp, pp, vp, cp, sp in itertools.product(
            *(grid[key] for key in _GRID_KEYS)):
        pcfg = ParallelConfig(dp=dp, tp=tp, pp=pp, vp=vp, cp=cp, sp=bool(sp),
                              microbatches=microbatches)
        label = f"dp={dp} tp={tp} pp={pp} vp={vp} cp={cp} sp={sp}"
        try:
            validate_parallel(cfg.model, pcfg)
        except ConfigInvalid as exc:
            skipped += 1
            print(f"{label}  bug=-                    skip ({exc})")
            continue
        points += 1

        def verdict_of(injections):
            cand = run_candidate(cfg.model, pcfg, injections=injections,
                                 rewrite=cfg.rewrite, lr=cfg.lr,
                                 trace_filter=flt).trace
            return check(ref, cand, tol, kappa=cfg.kappa, fmt=fmt)

        clean = verdict_of(()).exit_code() == 0
        failures += 0 if clean else 1
        print(f"{label}  bug=-                    "
              f"{'clean' if clean else 'FALSE-FLAG'}")
        for bug_id in bug_ids:
            if not BUG_CATALOG[bug_id].active_in(pcfg):
                continue
            detected = verdict_of((BugInjection(bug_id),)).exit_code() != 0
            failures += 0 if detected else 1
            print(f"{label}  bug={bug_id:<20} "
                  f"{'detected' if detected else 'MISSED'}")
    print(f"sweep: {points} layouts checked, {skipped} skipped, "
          f"{failures} failures")
    return 0 if failures == 0 else 2


def _cmd_bugs(args) -> int:
    for bug_id in sorted(BUG_CATALOG):
        spec = BUG_CATALOG[bug_id]
        print(f"{spec.bug_id:<22} [{spec.category}] site={spec.default_site}")
        print(f"{'':22} {spec.summary}")
        print(f"{'':22} needs: {spec.requires}")
    return 0


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 means "flags" here
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="traindiff",
                     description=__doc__.splitlines()[0],
                     epilog="exit codes: 0 clean, 1 usage/config, 2 flags, "
                            "3 replica/merge failures, 4 format errors")
    sub = parser.add_subparsers(metavar="command")

    sim = sub.add_parser("simulate",
                         help="run one training iteration, write its trace")
    sim.add_argument("config", help="experiment YAML")
    sim.add_argument("--role", choices=("ref", "cand"), required=True,
                     help="ref: trusted single-device run (no injections); "
                          "cand: the configured parallel layout")
    sim.add_argument("--out", required=True, help="trace file to write")
    sim.add_argument("--rewrite-inputs", action="store_true",
                     help="regenerate module inputs (pass to both roles)")
    sim.set_defaults(func=_cmd_simulate)

    est = sub.add_parser("estimate-tol",
                         help="measure perturbation responses on the "
                              "trusted run")
    est.add_argument("config", help="experiment YAML")
    est.add_argument("--out", required=True, help="tolerance JSON to write")
    est.set_defaults(func=_cmd_estimate_tol)

    chk = sub.add_parser("check",
                         help="compare a candidate trace to the reference")
    chk.add_argument("--ref", required=True, help="reference trace file")
    chk.add_argument("--cand", required=True, help="candidate trace file")
    chk.add_argument("--tol", required=True, help="tolerance JSON file")
    chk.add_argument("--k", type=float, default=3.0,
                     help="tolerance multiplier (default 3.0)")
    view = chk.add_mutually_exclusive_group()
    view.add_argument("--json", action="store_true",
                      help="machine-readable report")
    view.add_argument("--text", action="store_true",
                      help="human-readable report (default)")
    chk.set_defaults(func=_cmd_check)

    swp = sub.add_parser("sweep",
                         help="run a layout grid; optionally re-run each "
                              "point per injected bug")
    swp.add_argument("config", help="experiment YAML")
    swp.add_argument("--grid", nargs="*", metavar="KEY=V1,V2",
                     help=f"override axes ({'/'.join(_GRID_KEYS)}); "
                          f"default 1,2 each and sp=0,1")
    swp.add_argument("--bugs", default="none",
                     help="'all', 'none' or comma-separated bug ids")
    swp.set_defaults(func=_cmd_sweep)

    bugs = sub.add_parser("bugs", help="inspect the fault catalog")
    bugs.add_argument("action", choices=("list",))
    bugs.set_defaults(func=_cmd_bugs)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (FormatError, DigestMismatch) as exc:
        print(f"traindiff: {exc}", file=sys.stderr)
        return 4
    except TraindiffError as exc:
        # config problems, unknown bugs, nonfinite runs: usage-level
        print(f"traindiff: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"traindiff: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
