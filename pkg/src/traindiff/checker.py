"""Trace comparison under perturbation-estimated tolerances.

The toolkit decides "bug or roundoff?" empirically.  Nudge the trusted
run's post-embedding activations by a relative ``eps_p`` (the storage
format's unit roundoff by default), measure how far every traced tensor
moves in response, and use that response as the per-tensor tolerance.  A
candidate tensor whose deviation from the reference exceeds ``kappa``
times the tolerance is flagged; deviations at or below the response are
indistinguishable from legitimate rounding noise.

Checking a sharded trace proceeds per canonical id: records are grouped
by shard mapping, copies claiming the same shard must agree to storage
precision (replica check), one representative per shard is merged into
the full tensor, and the merged value is compared against the
reference's.  Replica or merge failures short-circuit their id with a
dedicated verdict; ids traced by only one side are reported as missing
but never gate the run, because layouts legitimately differ in what they
emit.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .canonical import ReplicaGroup, ShardMapping, check_replicas, merge
from .engine import PerturbSpec
from .errors import (ConfigInvalid, DigestMismatch, FormatError,
                     MappingInvalid, MergeConflict, ReplicaMismatch,
                     ShapeMismatch, TraindiffError)
from .tensor import FloatFormat, Tensor, rel_err_arrays
from .tracestore import Trace, canonical_json

VERDICT_PASS = "pass"
VERDICT_FLAG = "flag"
VERDICT_REPLICA = "replica-mismatch"
VERDICT_MERGE = "merge-error"
VERDICT_MISSING = "missing"
VERDICTS = (VERDICT_PASS, VERDICT_FLAG, VERDICT_REPLICA, VERDICT_MERGE,
            VERDICT_MISSING)

# A runner replays one training iteration and returns its trace; the
# argument perturbs the post-embedding activations (None = baseline).
Runner = Callable[[PerturbSpec | None], Trace]


@dataclass(frozen=True)
class ToleranceMap:
    """Per-id perturbation responses used as comparison tolerances."""

    responses: dict[str, float]
    n_samples: int
    eps_p: float
    aggregation: str = "max"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigInvalid("n_samples must be >= 1")
        if self.aggregation not in ("max", "mean"):
            raise ConfigInvalid(f"unknown aggregation {self.aggregation!r}")
        if not (self.eps_p >= 0.0 and math.isfinite(self.eps_p)):
            raise ConfigInvalid("eps_p must be finite and >= 0")
        for ident, resp in self.responses.items():
            if not (math.isfinite(resp) and resp >= 0.0):
                raise ConfigInvalid(
                    f"response for {ident} must be finite and >= 0")

    def get(self, ident: str) -> float:
        """Ids never estimated fall back to 0.0: the floor takes over."""
        return self.responses.get(ident, 0.0)

    def to_json(self) -> bytes:
        return canonical_json({
            "tolerance_version": 1,
            "n_samples": self.n_samples,
            "eps_p": self.eps_p,
            "aggregation": self.aggregation,
            "responses": self.responses,
        })

    @classmethod
    def from_json(cls, blob: bytes | str) -> "ToleranceMap":
        try:
            doc = json.loads(blob)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"tolerance file is not valid JSON: {exc}")
        if not isinstance(doc, dict) or doc.get("tolerance_version") != 1:
            raise FormatError("unsupported tolerance file version")
        try:
            return cls(
                responses={str(k): float(v)
                           for k, v in doc["responses"].items()},
                n_samples=int(doc["n_samples"]),
                eps_p=float(doc["eps_p"]),
                aggregation=str(doc["aggregation"]))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"malformed tolerance file: {exc}")


def estimate_tolerance(runner: Runner, *, n_samples: int = 5, eps_p: float,
                       aggregation: str = "max") -> ToleranceMap:
    """Measure each traced tensor's response to an input-level nudge.

    ``runner(None)`` replays the trusted run unmodified;
    ``runner(PerturbSpec(sample=s, eps=eps_p))`` replays it with the
    post-embedding activations scaled elementwise by ``1 + u*eps_p`` for
    fresh signed uniforms ``u``.  An id's response is the relative
    deviation the nudge induces there, aggregated across samples.  Ids
    whose baseline has zero norm respond with +inf relative error and
    are recorded as 0.0 so the comparison floor governs them.
    """
    if n_samples < 1:
        raise ConfigInvalid("n_samples must be >= 1")
    if aggregation not in ("max", "mean"):
        raise ConfigInvalid(f"unknown aggregation {aggregation!r}")
    base = _merge_trace(runner(None), strict=True)
    samples: dict[str, list[float]] = {ident: [] for ident in base}
    for s in range(n_samples):
        spec = PerturbSpec(sample=s, eps=eps_p)
        pert = _merge_trace(runner(spec), strict=True)
        for ident, entry in base.items():
            moved = pert.get(ident)
            if moved is None:
                continue
            resp = rel_err_arrays(entry.values, moved.values)
            samples[ident].append(resp if math.isfinite(resp) else 0.0)
    responses = {}
    for ident, resp in samples.items():
        if not resp:
            responses[ident] = 0.0
        elif aggregation == "max":
            responses[ident] = max(resp)
        else:
            responses[ident] = sum(resp) / len(resp)
    return ToleranceMap(responses=responses, n_samples=n_samples,
                        eps_p=eps_p, aggregation=aggregation)


@dataclass
class _MergedId:
    """One id's reassembled tensor, or the reason it could not be."""

    exec_index: int
    values: np.ndarray | None = None
    problem_kind: str | None = None
    detail: str = ""


def _merge_one(entries, fmt: FloatFormat, replica_check: bool) -> _MergedId:
    out = _MergedId(exec_index=entries[0][0])
    ndims = {len(rec.mapping.global_shape) for _, rec in entries}
    if len(ndims) != 1:
        out.problem_kind = VERDICT_MERGE
        out.detail = "records disagree on tensor rank"
        return out
    # Different writers may state different global hulls for the same
    # tensor; the per-axis union across the group is authoritative.
    (ndim,) = ndims
    global_shape = tuple(
        max(rec.mapping.global_shape[axis] for _, rec in entries)
        for axis in range(ndim))
    groups: dict[tuple, list] = {}
    for _, rec in entries:
        key = (rec.mapping.local_shape,
               tuple((loc.bounds, glob.bounds)
                     for loc, glob in rec.mapping.pairs))
        groups.setdefault(key, []).append(rec)
    problems = []
    if replica_check:
        for group in groups.values():
            declared = {rec.replica_group_size for rec in group}
            if declared != {len(group)}:
                problems.append((VERDICT_REPLICA,
                                 f"{len(group)} copies of one shard, declared "
                                 f"replica group size {sorted(declared)}"))
                continue
            try:
                check_replicas([Tensor(rec.values()) for rec in group],
                               ReplicaGroup(tuple(range(len(group)))), fmt)
            except ReplicaMismatch as exc:
                problems.append((VERDICT_REPLICA, str(exc)))
    # Merge proceeds even past a replica failure: the first copy of each
    # shard still yields a merged value whose deviation is diagnostic.
    shards = []
    for group in groups.values():
        rec = group[0]
        mapping = ShardMapping(rec.mapping.local_shape, global_shape,
                               rec.mapping.pairs)
        shards.append((mapping, rec.values()))
    try:
        out.values = merge(shards, global_shape).data
    except (MappingInvalid, MergeConflict, ShapeMismatch) as exc:
        problems.append((VERDICT_MERGE, str(exc)))
    if problems:
        out.problem_kind, out.detail = problems[0]
    return out


def _merge_trace(trace: Trace, fmt: FloatFormat = FloatFormat.FP32, *,
                 replica_check: bool = True,
                 strict: bool = False) -> dict[str, _MergedId]:
    view = {}
    for ident, entries in trace.by_id().items():
        entries = sorted(entries, key=lambda pair: pair[0])
        merged = _merge_one(entries, fmt, replica_check)
        if strict and merged.problem_kind is not None:
            raise TraindiffError(f"{ident}: {merged.detail}")
        view[ident] = merged
    return view


def _require_same_setup(ref: Trace, cand: Trace) -> None:
    for key in ("digest", "mode"):
        a, b = ref.header.get(key), cand.header.get(key)
        if a != b:
            raise DigestMismatch(f"traces disagree on {key}: {a!r} vs {b!r}")


@dataclass(frozen=True)
class CheckEntry:
    ident: str
    verdict: str
    observed: float | None
    tolerance: float | None
    threshold: float | None
    detail: str = ""


def _jsonable(value: float | None):
    if value is None:
        return None
    if not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def _entry_dicts(entries) -> list[dict]:
    return [{"id": e.ident, "verdict": e.verdict,
             "observed": _jsonable(e.observed),
             "tolerance": _jsonable(e.tolerance),
             "threshold": _jsonable(e.threshold),
             "detail": e.detail} for e in entries]


def _count(entries) -> dict[str, int]:
    counts = {verdict: 0 for verdict in VERDICTS}
    for entry in entries:
        counts[entry.verdict] += 1
    return counts


def _first_with(entries, verdicts) -> str | None:
    for entry in entries:
        if entry.verdict in verdicts:
            return entry.ident
    return None


@dataclass(frozen=True)
class CheckReport:
    """Comparison outcome per id, in candidate execution order.

    Ids only the reference traced come last (they hold no candidate
    position).  ``earliest_flag`` localizes threshold exceedances;
    ``earliest_divergence`` additionally counts replica and merge
    failures, which are value disagreements in their own right.
    """

    entries: tuple[CheckEntry, ...]
    mode: str
    kappa: float
    fmt: FloatFormat

    @property
    def counts(self) -> dict[str, int]:
        return _count(self.entries)

    @property
    def earliest_flag(self) -> str | None:
        return _first_with(self.entries, (VERDICT_FLAG,))

    @property
    def earliest_divergence(self) -> str | None:
        return _first_with(
            self.entries, (VERDICT_FLAG, VERDICT_REPLICA, VERDICT_MERGE))

    def exit_code(self) -> int:
        """0 clean, 2 flags, 3 replica/merge failures (missing is
        informational: layouts legitimately differ in what they emit)."""
        counts = self.counts
        if counts[VERDICT_REPLICA] or counts[VERDICT_MERGE]:
            return 3
        if counts[VERDICT_FLAG]:
            return 2
        return 0

    def to_dict(self) -> dict:
        return {"report_version": 1,
                "kind": "check",
                "mode": self.mode,
                "kappa": self.kappa,
                "format": self.fmt.value,
                "summary": self.counts,
                "earliest_flag": self.earliest_flag,
                "earliest_divergence": self.earliest_divergence,
                "exit_code": self.exit_code(),
                "entries": _entry_dicts(self.entries)}


def check(ref: Trace, cand: Trace, tol: ToleranceMap, kappa: float = 3.0, *,
          fmt: FloatFormat) -> CheckReport:
    """Compare a candidate trace against the reference trace.

    Per candidate id: verify replica copies agree to ``fmt`` precision,
    merge the shards, and flag when the merged tensor's relative
    deviation from the reference exceeds ``kappa * max(tolerance,
    fmt.eps)``.  The floor guards ids whose perturbation response is
    degenerate (exactly reproduced integer-like tensors respond with 0).
    """
    if kappa <= 0:
        raise ConfigInvalid("kappa must be positive")
    _require_same_setup(ref, cand)
    ref_view = _merge_trace(ref, fmt)
    cand_view = _merge_trace(cand, fmt)
    entries = []
    for ident, got in sorted(cand_view.items(),
                             key=lambda kv: kv[1].exec_index):
        tolerance = tol.get(ident)
        threshold = kappa * max(tolerance, fmt.eps)
        want = ref_view.get(ident)
        if want is None:
            entries.append(CheckEntry(ident, VERDICT_MISSING, None, tolerance,
                                      threshold, "only in candidate trace"))
            continue
        observed = None
        if (got.values is not None and want.values is not None
                and got.values.shape == want.values.shape):
            observed = rel_err_arrays(want.values, got.values)
        if got.problem_kind is not None:
            verdict, detail = got.problem_kind, got.detail
        elif want.problem_kind is not None:
            verdict = want.problem_kind
            detail = f"reference side: {want.detail}"
        elif observed is None:
            verdict = VERDICT_MERGE
            detail = (f"merged shapes differ: reference "
                      f"{want.values.shape} vs candidate {got.values.shape}")
        else:
            verdict = VERDICT_FLAG if observed > threshold else VERDICT_PASS
            detail = ""
        entries.append(CheckEntry(ident, verdict, observed, tolerance,
                                  threshold, detail))
    for ident, want in sorted(ref_view.items(),
                              key=lambda kv: kv[1].exec_index):
        if ident in cand_view:
            continue
        tolerance = tol.get(ident)
        entries.append(CheckEntry(ident, VERDICT_MISSING, None, tolerance,
                                  kappa * max(tolerance, fmt.eps),
                                  "only in reference trace"))
    return CheckReport(entries=tuple(entries),
                       mode=str(cand.header.get("mode", "")),
                       kappa=kappa, fmt=fmt)


@dataclass(frozen=True)
class StaticReport:
    """Fixed-threshold baseline outcome (the ablation comparator)."""

    entries: tuple[CheckEntry, ...]
    atol: float
    rtol: float

    @property
    def counts(self) -> dict[str, int]:
        return _count(self.entries)

    @property
    def earliest_flag(self) -> str | None:
        return _first_with(self.entries, (VERDICT_FLAG,))

    def exit_code(self) -> int:
        counts = self.counts
        if counts[VERDICT_MERGE]:
            return 3
        if counts[VERDICT_FLAG]:
            return 2
        return 0

    def to_dict(self) -> dict:
        return {"report_version": 1,
                "kind": "static",
                "atol": self.atol,
                "rtol": self.rtol,
                "summary": self.counts,
                "earliest_flag": self.earliest_flag,
                "exit_code": self.exit_code(),
                "entries": _entry_dicts(self.entries)}


def compare_static(ref: Trace, cand: Trace, atol: float,
                   rtol: float) -> StaticReport:
    """Elementwise ``|cand - ref| <= atol + rtol*|ref|`` per id.

    The baseline ablation: one global threshold pair, no replica
    consistency, no per-tensor calibration.  Shards are still merged so
    sharded candidates remain comparable.
    """
    if atol < 0 or rtol < 0:
        raise ConfigInvalid("atol and rtol must be nonnegative")
    _require_same_setup(ref, cand)
    ref_view = _merge_trace(ref, replica_check=False)
    cand_view = _merge_trace(cand, replica_check=False)
    entries = []
    for ident, got in sorted(cand_view.items(),
                             key=lambda kv: kv[1].exec_index):
        want = ref_view.get(ident)
        if want is None:
            entries.append(CheckEntry(ident, VERDICT_MISSING, None, None,
                                      None, "only in candidate trace"))
        elif got.problem_kind is not None:
            entries.append(CheckEntry(ident, got.problem_kind, None, None,
                                      None, got.detail))
        elif want.problem_kind is not None:
            entries.append(CheckEntry(ident, want.problem_kind, None, None,
                                      None, f"reference side: {want.detail}"))
        elif want.values.shape != got.values.shape:
            entries.append(CheckEntry(
                ident, VERDICT_MERGE, None, None, None,
                f"merged shapes differ: reference {want.values.shape} vs "
                f"candidate {got.values.shape}"))
        else:
            close = np.abs(got.values - want.values) \
                <= atol + rtol * np.abs(want.values)
            verdict = VERDICT_PASS if bool(close.all()) else VERDICT_FLAG
            entries.append(CheckEntry(ident, verdict, None, None, None))
    for ident, _ in sorted(ref_view.items(), key=lambda kv: kv[1].exec_index):
        if ident not in cand_view:
            entries.append(CheckEntry(ident, VERDICT_MISSING, None, None,
                                      None, "only in reference trace"))
    return StaticReport(entries=tuple(entries), atol=atol, rtol=rtol)


def _format_value(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:.6g}"


def _render_text(report) -> str:
    doc = report.to_dict()
    if doc["kind"] == "check":
        head = (f"check mode={doc['mode']} kappa={doc['kappa']:g} "
                f"format={doc['format']}")
    else:
        head = f"static check atol={doc['atol']:g} rtol={doc['rtol']:g}"
    lines = [head]
    earliest = doc["earliest_flag"]
    for entry in report.entries:
        marker = ">" if (earliest is not None
                         and entry.ident == earliest) else " "
        line = (f"{marker} {entry.verdict:<16} "
                f"obs={_format_value(entry.observed):>12} "
                f"tol={_format_value(entry.tolerance):>12} "
                f"thr={_format_value(entry.threshold):>12}  {entry.ident}")
        if entry.detail:
            line += f"  [{entry.detail}]"
        lines.append(line)
    counts = report.counts
    summary = ", ".join(f"{counts[v]} {v}" for v in VERDICTS)
    lines.append(f"summary: {summary}")
    lines.append(f"earliest flag: {earliest if earliest else '(none)'}")
    divergence = doc.get("earliest_divergence")
    if divergence is not None and divergence != earliest:
        # a replica or merge failure precedes the first flag; it is the
        # better localization signal
        lines.append(f"earliest divergence: {divergence}")
    return "\n".join(lines) + "\n"


def render_report(report, format: str = "text") -> str:
    """Render a check or static report deterministically."""
    if format == "json":
        return canonical_json(report.to_dict()).decode("utf-8")
    if format == "text":
        return _render_text(report)
    raise ConfigInvalid(f"unknown report format {format!r}")
