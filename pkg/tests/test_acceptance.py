"""End-to-end acceptance checks, one test per claim the toolkit makes.

Every test prints a single PASS/FAIL line with the measured quantity, so
``pytest -sv tests/test_acceptance.py`` reads as a checklist.  The
thresholds here are the advertised ones, not the measured margins: a
regression that halves a margin but stays inside the claim still passes.
"""

import fnmatch
import itertools
import json

import numpy as np
import pytest
from scipy import stats

from traindiff.bugs import BUG_CATALOG, BugInjection
from traindiff.canonical import ShardMapping, SliceBox, merge
from traindiff.checker import (ToleranceMap, check, compare_static,
                               estimate_tolerance)
from traindiff.cli import main
from traindiff.engine import (ParallelConfig, run_candidate, run_reference,
                              validate_parallel)
from traindiff.errors import ConfigInvalid, MergeConflict
from traindiff.generation import GenSpec, TokenIds, generate_full
from traindiff.model import Model, ModelConfig, backward, build_model, forward
from traindiff.tensor import FloatFormat
from traindiff.tracestore import read_trace

BF16 = FloatFormat.BF16
EPS = BF16.eps

# one transformer family for all run-based checks; layers vary per test
def _cfg(layers: int, precision: str = "bf16") -> ModelConfig:
    return ModelConfig(layers=layers, d_model=32, n_heads=4, d_ff=64,
                       seq_len=16, vocab=64, precision=precision)


def _criterion(label: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'}  {label}  [{detail}]", flush=True)
    assert ok, f"{label}: {detail}"


# ---------------------------------------------------------------------------
# shard geometry: reassembly is exact and tampering is witnessed

def _random_grid(rng, shape):
    """Per-axis interval lists that partition [0, n) on each axis."""
    cuts = []
    for n in shape:
        k = int(rng.integers(1, min(n, 3) + 1))
        points = (sorted(rng.choice(np.arange(1, n), size=k - 1,
                                    replace=False).tolist()) if k > 1 else [])
        edges = [0, *points, n]
        cuts.append(list(zip(edges, edges[1:])))
    return cuts


def _random_shards(rng, x, cuts):
    """Cover x with shards; runs of axis-0 cells fold into multi-pair
    mappings (the same shape the zigzag sequence layout produces)."""
    shards = []
    columns = list(itertools.product(*cuts[1:]))
    for col in columns:
        i = 0
        while i < len(cuts[0]):
            group = cuts[0][i:i + int(rng.integers(1, 3))]
            i += len(group)
            height = sum(b - a for a, b in group)
            local_shape = (height,) + tuple(b - a for a, b in col)
            pairs, off = [], 0
            for a, b in group:
                local = SliceBox(((off, off + b - a),)
                                 + tuple((0, e - s) for s, e in col))
                pairs.append((local, SliceBox(((a, b),) + col)))
                off += b - a
            mapping = ShardMapping(local_shape, x.shape, tuple(pairs))
            payload = np.empty(local_shape, dtype=np.float64)
            for local, glob in mapping.pairs:
                payload[local.as_slices()] = x[glob.as_slices()]
            shards.append((mapping, payload))
    return shards


def _witness_inside(witness, mapping) -> bool:
    return any(all(a <= w < b for w, (a, b) in zip(witness, glob.bounds))
               for _, glob in mapping.pairs)


def test_randomized_shard_merge_round_trip():
    rng = np.random.default_rng(20240817)
    trials = 1000
    witnessed = 0
    for _ in range(trials):
        shape = tuple(int(rng.integers(1, 7))
                      for _ in range(int(rng.integers(1, 4))))
        x = rng.standard_normal(shape)
        shards = _random_shards(rng, x, _random_grid(rng, shape))
        merged = merge(shards, shape)
        assert merged.data.tobytes() == x.tobytes()

        victim = int(rng.integers(0, len(shards)))
        with pytest.raises(MergeConflict) as omitted:
            merge(shards[:victim] + shards[victim + 1:], shape)
        assert _witness_inside(omitted.value.witness, shards[victim][0])
        with pytest.raises(MergeConflict) as doubled:
            merge([*shards, shards[victim]], shape)
        assert _witness_inside(doubled.value.witness, shards[victim][0])
        witnessed += 1
    _criterion("shard-merge round trip", witnessed == trials,
               f"{trials} random shardings bit-exact, "
               f"{witnessed} omission+overlap witnesses")


# ---------------------------------------------------------------------------
# correct runs across the whole layout grid never alarm

def test_correct_runs_sweep_clean_across_layouts():
    cfg = _cfg(layers=4)
    m = 4
    ref = run_reference(cfg, microbatches=m).trace
    tol = estimate_tolerance(
        lambda p: run_reference(cfg, microbatches=m, perturb=p).trace,
        n_samples=5, eps_p=EPS)
    checked = skipped = dirty = 0
    worst = 0.0
    for dp, tp, pp, vp, cp, sp in itertools.product(
            (1, 2), (1, 2), (1, 2), (1, 2), (1, 2), (False, True)):
        pcfg = ParallelConfig(dp=dp, tp=tp, pp=pp, vp=vp, cp=cp, sp=sp,
                              microbatches=m)
        try:
            validate_parallel(cfg, pcfg)
        except ConfigInvalid:
            skipped += 1
            continue
        report = check(ref, run_candidate(cfg, pcfg).trace, tol,
                       kappa=3.0, fmt=BF16)
        checked += 1
        counts = report.counts
        if counts["flag"] or counts["replica-mismatch"] or counts["merge-error"]:
            dirty += 1
        worst = max(worst, max((e.observed / e.threshold for e in report.entries
                                if e.observed is not None and e.threshold > 0),
                               default=0.0))
    _criterion("layout sweep stays clean",
               checked == 60 and dirty == 0,
               f"{checked} layouts ({skipped} invalid skipped), {dirty} dirty, "
               f"worst observed/threshold {worst:.3f}")


# ---------------------------------------------------------------------------
# every cataloged bug is caught, localized, and well-separated

BUG_CFG = _cfg(layers=2)

# smallest layouts that exercise each bug's mechanism
ACTIVE_LAYOUTS = {
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


@pytest.fixture(scope="module")
def bug_matrix():
    """Reference, candidate, tolerance, and report per (bug, mode), plus a
    bug-free candidate for the ablation test."""
    cache = {}

    def ref_and_tol(m, rewrite):
        if (m, rewrite) not in cache:
            ref = run_reference(BUG_CFG, microbatches=m, rewrite=rewrite).trace
            tol = estimate_tolerance(
                lambda p: run_reference(BUG_CFG, microbatches=m,
                                        rewrite=rewrite, perturb=p).trace,
                n_samples=5, eps_p=EPS)
            cache[m, rewrite] = (ref, tol)
        return cache[m, rewrite]

    matrix = {}
    for bug_id, pcfg in ACTIVE_LAYOUTS.items():
        per_mode = {}
        for rewrite, mode in ((False, "cascade"), (True, "module-wise")):
            ref, tol = ref_and_tol(pcfg.microbatches, rewrite)
            cand = run_candidate(BUG_CFG, pcfg, (BugInjection(bug_id),),
                                 rewrite=rewrite).trace
            per_mode[mode] = (ref, cand, tol,
                              check(ref, cand, tol, kappa=3.0, fmt=BF16))
        matrix[bug_id] = per_mode
    sp_layout = ACTIVE_LAYOUTS["MC_SP_NORM_GRAD"]
    ref, tol = ref_and_tol(sp_layout.microbatches, False)
    clean = run_candidate(BUG_CFG, sp_layout).trace
    matrix["clean"] = {"cascade": (ref, clean, tol,
                                   check(ref, clean, tol, kappa=3.0, fmt=BF16))}
    return matrix


def _module_of(ident: str) -> str:
    return ident.split("|mod=", 1)[1]


def test_every_bug_flagged_and_localized_to_site(bug_matrix):
    failures = []
    for bug_id in BUG_CATALOG:
        if bug_matrix[bug_id]["cascade"][3].exit_code() == 0:
            failures.append(f"{bug_id}: not flagged")
        report = bug_matrix[bug_id]["module-wise"][3]
        first = report.earliest_divergence
        site = BUG_CATALOG[bug_id].default_site
        if first is None or not fnmatch.fnmatchcase(_module_of(first), site):
            failures.append(f"{bug_id}: first divergence {first} not at {site}")
    _criterion("bugs flagged and localized", not failures,
               f"{len(BUG_CATALOG)} bugs, first divergent module matches "
               f"the injection site" if not failures else "; ".join(failures))


def test_flagged_deviation_separated_from_tolerance(bug_matrix):
    ratios = {}
    for bug_id in BUG_CATALOG:
        report = bug_matrix[bug_id]["cascade"][3]
        entry = next(e for e in report.entries
                     if e.ident == report.earliest_divergence)
        ratios[bug_id] = entry.observed / max(entry.tolerance, EPS)
    worst = min(ratios, key=ratios.get)
    _criterion("flag separation margin", all(r >= 10.0 for r in ratios.values()),
               f"min observed/tolerance {ratios[worst]:.1f} ({worst}), "
               f"bound 10.0")


# ---------------------------------------------------------------------------
# tolerance scaling laws: forward growth with depth, backward decay per layer

def test_response_grows_slowly_with_depth():
    depths = (2, 4, 8, 16, 32)
    responses = []
    for layers in depths:
        cfg = _cfg(layers)
        tol = estimate_tolerance(
            lambda p: run_reference(cfg, microbatches=1, perturb=p).trace,
            n_samples=5, eps_p=EPS)
        responses.append(
            tol.responses[f"iter=0|mb=0|kind=ActivationOut"
                          f"|mod=model.layers.{layers - 1}.mlp"])
    slope = float(np.polyfit(np.log(depths), np.log(responses), 1)[0])
    in_band = all(0.02 * EPS <= r <= 100 * EPS for r in responses)
    _criterion("depth response slope",
               0.2 <= slope <= 0.8 and in_band,
               f"log-log slope {slope:.3f} in [0.2, 0.8]; responses "
               f"{min(responses) / EPS:.2f}..{max(responses) / EPS:.2f} eps")


def test_gradient_response_decreases_with_layer():
    # module-wise rewrite perturbs every module input independently, so a
    # layer's gradient response counts the perturbations accumulated on the
    # backward chain above it; early layers collect more
    layers = 16
    cfg = _cfg(layers)
    tol = estimate_tolerance(
        lambda p: run_reference(cfg, microbatches=1, rewrite=True,
                                perturb=p).trace,
        n_samples=5, eps_p=EPS)
    per_layer = []
    for layer in range(layers):
        tag = f"|kind=ParamGrad|mod=model.layers.{layer}."
        per_layer.append(float(np.mean(
            [r for ident, r in tol.responses.items() if tag in ident])))
    rho = float(stats.spearmanr(np.arange(layers), per_layer).statistic)
    _criterion("per-layer gradient trend", rho <= -0.5,
               f"Spearman(layer, response) {rho:.3f}, bound -0.5")


# ---------------------------------------------------------------------------
# fixed thresholds fail both ways where the calibrated check holds

def test_static_thresholds_fail_where_calibrated_check_holds(bug_matrix):
    ref, clean, _, clean_report = bug_matrix["clean"]["cascade"]
    _, buggy, _, bug_report = bug_matrix["MC_SP_NORM_GRAD"]["cascade"]
    tight = compare_static(ref, clean, atol=0.0, rtol=1e-5)
    loose = compare_static(ref, buggy, atol=1e-2, rtol=1e-1)
    ok = (tight.counts["flag"] > 0            # cries wolf on a correct run
          and loose.counts["flag"] == 0       # sleeps through a real bug
          and clean_report.exit_code() == 0   # calibrated check does neither
          and bug_report.exit_code() != 0)
    _criterion("static thresholds ablation", ok,
               f"tight(0,1e-5): {tight.counts['flag']} false flags; "
               f"loose(1e-2,1e-1): {loose.counts['flag']} flags on a real bug; "
               f"calibrated: clean exit {clean_report.exit_code()}, "
               f"bug exit {bug_report.exit_code()}")


# ---------------------------------------------------------------------------
# the autograd under the exact policy agrees with finite differences

def test_gradients_match_finite_differences():
    cfg = ModelConfig(layers=2, d_model=16, n_heads=2, d_ff=32, seq_len=8,
                      vocab=16, precision="fp32")
    model = build_model(cfg)
    ids = generate_full("accept|fd", GenSpec(TokenIds(cfg.vocab),
                                             (cfg.seq_len,))).data.astype(int)
    forward(model, ids)
    grads = backward(model)
    rng = np.random.default_rng(11)
    h = 1e-5
    worst = 0.0
    for path in model.order:
        flat = model.params[path].reshape(-1)
        for j in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            saved = flat[j]
            flat[j] = saved + h
            up = forward(Model(cfg=model.cfg, params=model.params,
                               order=model.order), ids)
            flat[j] = saved - h
            down = forward(Model(cfg=model.cfg, params=model.params,
                                 order=model.order), ids)
            flat[j] = saved
            fd = (up - down) / (2 * h)
            bp = grads[path].reshape(-1)[j]
            worst = max(worst, abs(fd - bp) / max(abs(fd), abs(bp), 1e-6))
    _criterion("finite-difference gradients", worst < 1e-4,
               f"max rel err {worst:.2e}, bound 1e-4")


# ---------------------------------------------------------------------------
# the command pipeline is byte-deterministic end to end

PIPELINE_YAML = """\
model: {layers: 2, d_model: 16, n_heads: 2, d_ff: 32, seq_len: 8, vocab: 32,
        precision: bf16}
parallel: {tp: 2, microbatches: 2}
check: {n_samples: 2}
"""


def test_cli_pipeline_byte_deterministic(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(PIPELINE_YAML)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        ref, cand, tol = (str(d / n) for n in
                          ("ref.trace", "cand.trace", "tol.json"))
        assert main(["simulate", str(cfg), "--role", "ref", "--out", ref]) == 0
        assert main(["simulate", str(cfg), "--role", "cand", "--out", cand]) == 0
        assert main(["estimate-tol", str(cfg), "--out", tol]) == 0
        capsys.readouterr()
        assert main(["check", "--ref", ref, "--cand", cand, "--tol", tol,
                     "--json"]) == 0
        outputs.append(tuple((d / n).read_bytes() for n in
                             ("ref.trace", "cand.trace", "tol.json"))
                       + (capsys.readouterr().out,))
    _criterion("pipeline byte determinism", outputs[0] == outputs[1],
               "simulate x2, estimate-tol, check --json byte-identical "
               "across repeat invocations")


# ---------------------------------------------------------------------------
# traces exported by the torch hook adapter interoperate

def test_hook_exported_trace_interops(tmp_path):
    torch = pytest.importorskip("torch")
    torchtap = pytest.importorskip("torchtap")

    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(8, 16, bias=False),
                              torch.nn.Linear(16, 4, bias=False))
    handle = torchtap.attach(net, torchtap.TapConfig(patterns=("*",)))
    net(torch.randn(5, 8)).square().sum().backward()
    path = tmp_path / "hook.trace"
    torchtap.flush(handle, path)
    torchtap.detach(handle)

    trace = read_trace(path)
    kinds = [record.id.kind.value for record in trace.records]
    zero_tol = ToleranceMap(responses={}, n_samples=1, eps_p=0.0)
    report = check(trace, trace, zero_tol, kappa=3.0, fmt=FloatFormat.FP32)
    ok = (kinds.count("ActivationIn") == 2 and kinds.count("ActivationOut") == 2
          and kinds.count("ParamGrad") == 2
          and report.exit_code() == 0
          and report.counts["pass"] == len(trace.by_id())
          and report.counts["missing"] == 0)
    _criterion("hook-exported trace interop", ok,
               f"{len(trace.records)} records load through the native reader; "
               f"self-check {report.counts['pass']} pass / "
               f"{report.counts['flag']} flag")
