"""Catalog of injectable silent bugs.

Each bug toggles exactly one code site in the parallel engine and is a
deterministic execution perturbation: wrong data fed to a correct op
(WD), a communication op with wrong order/group/reduction (WC), or a
communication op omitted outright (MC).  With every bug disabled the
candidate is correct by construction.

A bug fires only where its site pattern matches the module or parameter
path, and only in layouts where the targeted mechanism exists at all
(`active_in` below); enabling MC_TP_ROW_ALLREDUCE in a tp=1 run, for
example, is a no-op because there is no all-reduce to omit.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import UnknownBugId


@dataclass(frozen=True)
class BugSpec:
    bug_id: str
    category: str           # WD | WC | MC
    summary: str
    default_site: str       # module or parameter path pattern
    requires: str           # layout in which the site is exercised
    active_in: Callable[[object], bool]


@dataclass(frozen=True)
class BugInjection:
    bug_id: str
    site: str | None = None  # None: the catalog default site
    enabled: bool = True


BUG_CATALOG: dict[str, BugSpec] = {spec.bug_id: spec for spec in [
    BugSpec(
        "WD_STALE_INPUT", "WD",
        "module consumes the previous microbatch's input instead of its own",
        default_site="model.layers.1.mlp",
        requires="at least 2 microbatches per data-parallel rank",
        active_in=lambda p: p.microbatches // p.dp >= 2),
    BugSpec(
        "WD_WRONG_SCALE", "WD",
        "embedding output multiplied by the tensor-parallel width",
        default_site="model.embedding",
        requires="tp >= 2",
        active_in=lambda p: p.tp >= 2),
    BugSpec(
        "WD_LAYOUT", "WD",
        "context-parallel K/V gather skips the zigzag-to-canonical reorder,"
        " so attention reads permuted sequence chunks",
        default_site="model.layers.1.attn",
        requires="cp >= 2",
        active_in=lambda p: p.cp >= 2),
    BugSpec(
        "WC_WRONG_ORDER", "WC",
        "position embedding added before the sequence-parallel reduce-scatter"
        " instead of after, so every tp rank's partial carries it",
        default_site="model.embedding",
        requires="sp with tp >= 2",
        active_in=lambda p: p.sp and p.tp >= 2),
    BugSpec(
        "WC_WRONG_GROUP", "WC",
        "gradient all-reduce runs over half-sized subgroups of the dp x cp group",
        default_site="model.layers.0.mlp.w1",
        requires="dp * cp >= 4",
        active_in=lambda p: p.dp * p.cp >= 4),
    BugSpec(
        "WC_WRONG_REDUCE_OP", "WC",
        "sequence-parallel norm-gradient reduction uses Avg instead of Sum,"
        " scaling those gradients by 1/tp",
        default_site="model.layers.1.attn.norm*",
        requires="sp with tp >= 2",
        active_in=lambda p: p.sp and p.tp >= 2),
    BugSpec(
        "MC_TP_ROW_ALLREDUCE", "MC",
        "row-parallel output all-reduce omitted in the attention block,"
        " leaving each rank with a partial sum",
        default_site="model.layers.1.attn",
        requires="tp >= 2 without sp (the sp path uses reduce-scatter)",
        active_in=lambda p: p.tp >= 2 and not p.sp),
    BugSpec(
        "MC_SP_NORM_GRAD", "MC",
        "sequence-parallel norm-gradient all-reduce omitted, leaving"
        " per-rank partial gradients",
        default_site="model.layers.0.mlp.norm*",
        requires="sp with tp >= 2",
        active_in=lambda p: p.sp and p.tp >= 2),
    BugSpec(
        "MC_DP_GRAD", "MC",
        "data-parallel gradient all-reduce omitted, so main gradients"
        " diverge across replicas",
        default_site="model.embedding.word",
        requires="dp >= 2 (or cp >= 2: the reduce spans the dp x cp group)",
        active_in=lambda p: p.dp * p.cp >= 2),
]}


class ActiveBugs:
    """Resolved injections; answers 'does bug B fire at path P'."""

    def __init__(self, injections: Sequence[BugInjection] = ()):
        self._sites: dict[str, str] = {}
        for inj in injections:
            if inj.bug_id not in BUG_CATALOG:
                raise UnknownBugId(f"no bug {inj.bug_id!r} in catalog "
                                   f"(known: {sorted(BUG_CATALOG)})")
            if inj.enabled:
                self._sites[inj.bug_id] = inj.site or BUG_CATALOG[inj.bug_id].default_site

    def __bool__(self) -> bool:
        return bool(self._sites)

    def enabled_ids(self) -> list[str]:
        return sorted(self._sites)

    def fires(self, bug_id: str, path: str) -> bool:
        site = self._sites.get(bug_id)
        return site is not None and fnmatch.fnmatchcase(path, site)
