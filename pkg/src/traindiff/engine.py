"""Emulated multi-rank execution of the transformer under a parallel layout.

One process plays every rank: ranks execute sequentially in rank order and
collectives are plain function calls over the ranks' arrays (sequential
rank-ascending reduction, quantized per combine under the active policy).
That makes runs deterministic and bit-reproducible, which is the property
the whole differential-testing scheme rests on.

Layout semantics:

* dp: microbatches split into contiguous per-rank blocks; gradients
  accumulate locally (raw sum) and are all-reduced over the dp x cp group
  before the optimizer, which divides by the total microbatch count.
* tp: column-parallel wq/wk/wv/w1 (output columns sharded), row-parallel
  wo/w2 (input rows sharded, outputs summed), per-head attention sharding,
  vocab-sharded embedding and tied LM head.
* sp: layer-norm regions run on per-tp sequence sub-shards, with
  all-gather entering each matmul region and reduce-scatter leaving it;
  norm-weight (and position-table) gradients are partial per rank until an
  explicit all-reduce right before the optimizer.
* cp: the sequence is striped over cp ranks in zigzag order (rank r owns
  chunks r and 2cp-1-r) so causal attention cost balances; K/V are
  all-gathered over cp and reordered back to canonical positions.
* pp/vp: stages execute in canonical layer order within the process;
  placement only affects rank metadata via `canonical_layer_index`.

The reference run is this same engine at the all-ones layout, so the
degenerate-equivalence property holds by construction rather than by a
second implementation kept in sync.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bugs import ActiveBugs, BugInjection
from .canonical import (CanonicalId, ShardMapping, SliceBox, TensorKind,
                        locate_layer)
from .errors import ConfigInvalid, NonFinite, ShapeMismatch
from .generation import GenSpec, Normal, TokenIds, generate_full, signed_uniforms
from .model import (Model, ModelConfig, attn_name, build_model,
                    cross_entropy_rows, gelu_backward, gelu_forward,
                    labels_for, layer_norm_backward, layer_norm_forward,
                    mlp_name, softmax_backward, softmax_rows)
from .tensor import PolicyOps, Tensor
from .tracestore import (RankMeta, Trace, TraceCollector, TraceFilter,
                         TraceRecord, canonical_json)

HIDDEN_REWRITE_STD = 0.02


@dataclass(frozen=True)
class ParallelConfig:
    dp: int = 1
    tp: int = 1
    pp: int = 1
    vp: int = 1
    cp: int = 1
    sp: bool = False
    microbatches: int = 1

    def world_size(self) -> int:
        return self.dp * self.tp * self.pp * self.cp

    def as_dict(self) -> dict:
        return {"dp": self.dp, "tp": self.tp, "pp": self.pp, "vp": self.vp,
                "cp": self.cp, "sp": self.sp, "microbatches": self.microbatches}


def validate_parallel(cfg: ModelConfig, pcfg: ParallelConfig,
                      max_world: int = 8) -> None:
    p = pcfg
    if min(p.dp, p.tp, p.pp, p.vp, p.cp, p.microbatches) < 1:
        raise ConfigInvalid("parallel degrees and microbatches must be >= 1")
    if p.world_size() > max_world:
        raise ConfigInvalid(f"world size {p.world_size()} exceeds {max_world}")
    if p.microbatches % p.dp != 0:
        raise ConfigInvalid("microbatches must divide evenly across dp ranks")
    if cfg.layers % (p.pp * p.vp) != 0:
        raise ConfigInvalid("layers must be divisible by pp * vp")
    for name in ("d_model", "d_ff", "n_heads", "vocab"):
        if getattr(cfg, name) % p.tp != 0:
            raise ConfigInvalid(f"{name} must be divisible by tp")
    if p.cp > 1 and cfg.seq_len % (2 * p.cp) != 0:
        # zigzag striping deals two chunks per rank
        raise ConfigInvalid("seq_len must be divisible by 2*cp when cp > 1")
    if p.sp and (cfg.seq_len // p.cp) % p.tp != 0:
        raise ConfigInvalid("per-cp-rank sequence must be divisible by tp when sp")


# ---------------------------------------------------------------------------
# emulated collectives

class ReduceOp(enum.Enum):
    SUM = "Sum"
    AVG = "Avg"
    MAX = "Max"


def _reduce_arrays(parts: list[np.ndarray], op: ReduceOp,
                   po: PolicyOps | None) -> np.ndarray:
    acc = parts[0]
    for part in parts[1:]:
        if part.shape != acc.shape:
            raise ShapeMismatch(f"collective operand {part.shape} vs {acc.shape}")
        if op is ReduceOp.MAX:
            combined = np.maximum(acc, part)
        else:
            combined = np.add(acc, part)
        acc = po.q(combined) if po else combined
    if op is ReduceOp.AVG:
        avg = acc / len(parts)
        acc = po.q(avg) if po else avg
    return acc


def all_reduce(shards: list[Tensor], op: ReduceOp = ReduceOp.SUM,
               policy: PolicyOps | None = None) -> list[Tensor]:
    """Sequential rank-ascending reduction; result replicated to all ranks."""
    out = Tensor(_reduce_arrays([s.data for s in shards], op, policy))
    return [out for _ in shards]


def all_gather(shards: list[Tensor], dim: int = 0,
               policy: PolicyOps | None = None) -> list[Tensor]:
    """Rank-order concatenation; pure data movement, exact."""
    out = Tensor(np.concatenate([s.data for s in shards], axis=dim))
    return [out for _ in shards]


def reduce_scatter(tensors: list[Tensor], dim: int = 0,
                   op: ReduceOp = ReduceOp.SUM,
                   policy: PolicyOps | None = None) -> list[Tensor]:
    total = _reduce_arrays([t.data for t in tensors], op, policy)
    pieces = np.split(total, len(tensors), axis=dim)
    return [Tensor(p) for p in pieces]


# ---------------------------------------------------------------------------
# sequence geometry

def _seq_pieces(seq: int, cp: int, c: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """(local, global) interval pairs of cp rank c's zigzag stripe."""
    if cp == 1:
        return [((0, seq), (0, seq))]
    ch = seq // (2 * cp)
    return [((0, ch), (c * ch, (c + 1) * ch)),
            ((ch, 2 * ch), ((2 * cp - 1 - c) * ch, (2 * cp - c) * ch))]


def _sub_pieces(pieces, lo: int, hi: int):
    """Restrict piece list to local interval [lo, hi), rebased to 0."""
    out = []
    for (l0, l1), (g0, _) in pieces:
        a, b = max(l0, lo), min(l1, hi)
        if a < b:
            out.append(((a - lo, b - lo), (g0 + (a - l0), g0 + (b - l0))))
    return out


def _pieces_positions(pieces) -> np.ndarray:
    return np.concatenate([np.arange(g0, g1) for _, (g0, g1) in pieces])


def _mapping_from(local_shape: tuple[int, ...], global_shape: tuple[int, ...],
                  per_axis: dict) -> ShardMapping:
    axes = []
    for ax, n in enumerate(local_shape):
        if ax in per_axis:
            axes.append(per_axis[ax])
        else:
            axes.append([((0, n), (0, global_shape[ax]))])
    pairs = []
    for combo in itertools.product(*axes):
        local = SliceBox(tuple(piece[0] for piece in combo))
        glob = SliceBox(tuple(piece[1] for piece in combo))
        pairs.append((local, glob))
    return ShardMapping(tuple(local_shape), tuple(global_shape), tuple(pairs))


@dataclass(frozen=True)
class PerturbSpec:
    """Multiplicative elementwise input perturbation x -> x * (1 + u*eps)
    with u ~ U[-1, 1] drawn from a stream keyed by (sample, tensor id)."""
    sample: int
    eps: float


@dataclass
class SimResult:
    trace: Trace
    losses: list[float]
    main_grads: dict[str, np.ndarray]
    updated_params: dict[str, np.ndarray]


def setup_digest(cfg: ModelConfig, microbatches: int, lr: float) -> str:
    """Identity of the logical training setup two comparable runs share."""
    blob = canonical_json({"model": cfg.as_dict(),
                           "microbatches": microbatches, "lr": lr})
    return hashlib.sha256(blob).hexdigest()


# parameter sharding: path suffix -> (tp-sharded axis or None)
def _param_tp_axis(path: str) -> int | None:
    if path.endswith(".word"):
        return 0
    if path.endswith((".wq", ".wk", ".wv", ".w1")):
        return 1
    if path.endswith((".wo", ".w2")):
        return 0
    return None


def _is_norm_param(path: str) -> bool:
    return ".norm." in path or path.startswith("model.final_norm.")


class Emulator:
    """One emulated training iteration of `model` under `pcfg`.

    The emulator never mutates the model; updated parameters are returned
    in the result.  All ranks' state lives in dicts keyed by (cp rank,
    tp rank) within the currently executing dp lane.
    """

    def __init__(self, model: Model, pcfg: ParallelConfig = ParallelConfig(),
                 injections: tuple[BugInjection, ...] = (),
                 collector: TraceCollector | None = None,
                 rewrite: bool = False, perturb: PerturbSpec | None = None,
                 lr: float = 0.1, iteration: int = 0, max_world: int = 8):
        validate_parallel(model.cfg, pcfg, max_world=max_world)
        self.model = model
        self.cfg = model.cfg
        self.pcfg = pcfg
        self.po = PolicyOps(model.cfg.policy)
        self.bugs = ActiveBugs(injections)
        self.collector = collector
        self.rewrite = rewrite
        self.perturb = perturb
        self.lr = lr
        self.iteration = iteration
        # storage copies of the parameters, as ranks would hold them
        self.stored = {path: self.po.q(value)
                       for path, value in model.params.items()}
        self._ranks = [(c, t) for c in range(pcfg.cp) for t in range(pcfg.tp)]
        self._grid: dict[tuple[int, int], dict] = {}
        self._accum: dict[int, dict[str, dict[tuple[int, int], np.ndarray]]] = {}
        self._stale: dict = {}
        self._layers_per_chunk = model.cfg.layers // (pcfg.pp * pcfg.vp)

    # -- geometry ----------------------------------------------------------

    def _pieces(self, c: int, t: int, sp_domain: bool):
        pieces = _seq_pieces(self.cfg.seq_len, self.pcfg.cp, c)
        if sp_domain and self.pcfg.sp:
            seq_loc = self.cfg.seq_len // self.pcfg.cp
            sub = seq_loc // self.pcfg.tp
            pieces = _sub_pieces(pieces, t * sub, (t + 1) * sub)
        return pieces

    def _hidden_mapping(self, c: int, t: int, sp_domain: bool) -> ShardMapping:
        pieces = self._pieces(c, t, sp_domain)
        rows = sum(l1 - l0 for (l0, l1), _ in pieces)
        return _mapping_from((rows, self.cfg.d_model),
                             (self.cfg.seq_len, self.cfg.d_model), {0: pieces})

    def _ids_mapping(self, c: int) -> ShardMapping:
        pieces = self._pieces(c, 0, False)
        rows = sum(l1 - l0 for (l0, l1), _ in pieces)
        return _mapping_from((rows,), (self.cfg.seq_len,), {0: pieces})

    def _logits_mapping(self, c: int, t: int) -> ShardMapping:
        pieces = self._pieces(c, 0, False)
        rows = sum(l1 - l0 for (l0, l1), _ in pieces)
        v_loc = self.cfg.vocab // self.pcfg.tp
        cols = [((0, v_loc), (t * v_loc, (t + 1) * v_loc))]
        return _mapping_from((rows, v_loc), (self.cfg.seq_len, self.cfg.vocab),
                             {0: pieces, 1: cols})

    def _param_mapping(self, path: str, t: int) -> ShardMapping:
        full = self.model.params[path].shape
        axis = _param_tp_axis(path)
        if axis is None:
            box = SliceBox(tuple((0, n) for n in full))
            return ShardMapping(full, full, ((box, box),))
        n_loc = full[axis] // self.pcfg.tp
        piece = [((0, n_loc), (t * n_loc, (t + 1) * n_loc))]
        local = tuple(n_loc if ax == axis else n for ax, n in enumerate(full))
        return _mapping_from(local, full, {axis: piece})

    def _param_shard(self, source: dict[str, np.ndarray], path: str,
                     t: int) -> np.ndarray:
        value = source[path]
        axis = _param_tp_axis(path)
        if axis is None:
            return value
        n_loc = value.shape[axis] // self.pcfg.tp
        index = [slice(None)] * value.ndim
        index[axis] = slice(t * n_loc, (t + 1) * n_loc)
        return value[tuple(index)]

    def _placement(self, module_name: str) -> tuple[int, int]:
        if module_name.startswith("model.layers."):
            layer = int(module_name.split(".")[2])
            p, v, _ = locate_layer(layer, self.pcfg.pp, self.pcfg.vp,
                                   self._layers_per_chunk)
            return p, v
        if module_name.startswith("model.embedding"):
            return 0, 0
        return self.pcfg.pp - 1, self.pcfg.vp - 1

    # -- recording ---------------------------------------------------------

    def _emit(self, dr: int, c: int, t: int, mb: int, kind: TensorKind,
              module_name: str, module_class: str, payload: np.ndarray,
              mapping: ShardMapping, replica: int,
              iteration: int | None = None) -> None:
        if self.collector is None:
            return
        pp_r, vp_r = self._placement(module_name)
        ident = CanonicalId(self.iteration if iteration is None else iteration,
                            mb, kind, module_name)
        self.collector.add(TraceRecord(
            id=ident,
            rank_meta=RankMeta(dr, t, pp_r, vp_r, c, int(self.pcfg.sp)),
            mapping=mapping, replica_group_size=replica,
            payload=np.asarray(payload, dtype=np.float32),
            module_class=module_class))

    @staticmethod
    def _require_finite(name: str, value: np.ndarray) -> None:
        if not np.isfinite(value).all():
            raise NonFinite(f"non-finite values in {name}")

    # -- input acquisition (rewrite, stale, perturbation) -------------------

    def _hidden_spec(self) -> GenSpec:
        return GenSpec(Normal(0.0, HIDDEN_REWRITE_STD),
                       (self.cfg.seq_len, self.cfg.d_model))

    def _perturb_tag(self, ident: CanonicalId) -> str:
        return f"perturb|s={self.perturb.sample}|{ident.encode()}"

    def _apply_perturbation(self, ident: CanonicalId, full_rows: np.ndarray,
                            pieces) -> np.ndarray:
        """Perturb a hidden tensor's rank shard, consistent across ranks:
        factors are generated for the full tensor and sliced per shard."""
        if self.perturb is None or self.perturb.eps == 0.0:
            return full_rows
        u_full = signed_uniforms(self._perturb_tag(ident),
                                 (self.cfg.seq_len, self.cfg.d_model))
        pos = _pieces_positions(pieces)
        factors = 1.0 + u_full[pos] * self.perturb.eps
        return self.po.q(full_rows * factors)

    def _acquire_input(self, dr: int, c: int, t: int, mb: int,
                       module_name: str, current: np.ndarray,
                       sp_domain: bool) -> np.ndarray:
        """The hidden input a module actually consumes: the incoming stream
        value, or a regenerated tensor in rewrite mode, stale-swapped when
        that bug fires.  The trace records whatever is returned here."""
        ident = CanonicalId(self.iteration, mb, TensorKind.ACTIVATION_IN,
                            module_name)
        value = current
        if self.rewrite:
            full = generate_full(ident, self._hidden_spec()).data
            pieces = self._pieces(c, t, sp_domain)
            pos = _pieces_positions(pieces)
            value = self.po.q(full[pos])
            value = self._apply_perturbation(ident, value, pieces)
        if self.bugs.fires("WD_STALE_INPUT", module_name):
            key = (module_name, dr, c, t)
            previous = self._stale.get(key)
            self._stale[key] = value
            if previous is not None:
                # the module silently reads last microbatch's tensor; its
                # gradient is handed back to the current chain unchanged
                value = previous
        return value

    # -- forward -----------------------------------------------------------

    def forward_microbatch(self, mb: int, dr: int = 0,
                           ids_override: np.ndarray | None = None) -> float:
        cfg, p, po = self.cfg, self.pcfg, self.po
        if ids_override is None:
            ids_id = CanonicalId(self.iteration, mb, TensorKind.ACTIVATION_IN,
                                 "model.embedding")
            ids_full = generate_full(ids_id, GenSpec(TokenIds(cfg.vocab),
                                                     (cfg.seq_len,))).data
        else:
            ids_full = np.asarray(ids_override, dtype=np.float64)
        ids_full = ids_full.astype(np.int64)

        lane: dict = {"tapes": {}, "ids": ids_full, "mb": mb, "dr": dr}
        hidden = self._embedding_forward(lane, ids_full)
        for layer in range(cfg.layers):
            hidden = self._block_forward(lane, attn_name(layer), hidden)
            hidden = self._block_forward(lane, mlp_name(layer), hidden)
        hidden = self._final_norm_forward(lane, hidden)
        loss = self._head_forward(lane, hidden)
        self._grid[(dr, mb)] = lane
        return loss

    def _embedding_forward(self, lane, ids_full):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.embedding", "Embedding"
        word, pos_table = self.stored["model.embedding.word"], \
            self.stored["model.embedding.position"]
        v_loc = cfg.vocab // p.tp
        out: dict[tuple[int, int], np.ndarray] = {}
        partials: dict[int, list[np.ndarray]] = {c: [] for c in range(p.cp)}
        for c, t in self._ranks:
            pieces = self._pieces(c, t, False)
            gpos = _pieces_positions(pieces)
            ids_loc = ids_full[gpos]
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_IN, name, cls,
                       ids_loc.astype(np.float64), self._ids_mapping(c),
                       replica=p.tp)
            w_t = self._param_shard(self.stored, "model.embedding.word", t)
            in_shard = (ids_loc >= t * v_loc) & (ids_loc < (t + 1) * v_loc)
            rows = w_t[np.clip(ids_loc - t * v_loc, 0, v_loc - 1)]
            partial = rows * in_shard[:, None]
            if p.sp and self.bugs.fires("WC_WRONG_ORDER", name):
                # buggy order: every rank's partial already carries the
                # position rows, so the scatter-sum counts them tp times
                partial = po.add(partial, pos_table[gpos])
            partials[c].append(partial)
        out_id = CanonicalId(self.iteration, mb, TensorKind.ACTIVATION_OUT, name)
        for c in range(p.cp):
            gpos_chunk = _pieces_positions(self._pieces(c, 0, False))
            if p.sp:
                subs = reduce_scatter([Tensor(x) for x in partials[c]],
                                      dim=0, policy=po)
                for t in range(p.tp):
                    sub_pieces = self._pieces(c, t, True)
                    value = subs[t].data
                    if not self.bugs.fires("WC_WRONG_ORDER", name):
                        value = po.add(value, pos_table[_pieces_positions(sub_pieces)])
                    value = self._finish_embedding(lane, c, t, value, sub_pieces, out_id)
                    out[(c, t)] = value
                    self._emit(dr, c, t, mb, TensorKind.ACTIVATION_OUT, name, cls,
                               value, self._hidden_mapping(c, t, True), replica=1)
            else:
                combined = all_reduce([Tensor(x) for x in partials[c]],
                                      ReduceOp.SUM, po)[0].data
                for t in range(p.tp):
                    pieces = self._pieces(c, t, False)
                    value = po.add(combined, pos_table[gpos_chunk])
                    value = self._finish_embedding(lane, c, t, value, pieces, out_id)
                    out[(c, t)] = value
                    self._emit(dr, c, t, mb, TensorKind.ACTIVATION_OUT, name, cls,
                               value, self._hidden_mapping(c, t, False),
                               replica=p.tp)
        lane["tapes"][("model.embedding", "ids")] = ids_full
        return out

    def _finish_embedding(self, lane, c, t, value, pieces, out_id):
        if self.bugs.fires("WD_WRONG_SCALE", "model.embedding"):
            value = self.po.scale(value, self.pcfg.tp)
        value = self._apply_perturbation(out_id, value, pieces)
        self._require_finite("embedding output", value)
        return value

    def _block_forward(self, lane, name, hidden):
        if name.endswith(".attn"):
            return self._attn_forward(lane, name, hidden)
        return self._mlp_forward(lane, name, hidden)

    def _region_enter(self, lane, name, cls, hidden):
        """Shared Pre-LN block entry: acquire/record input, layer norm,
        and the sp gather into the matmul region."""
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        x, a_gathered, tapes = {}, {}, {}
        gamma = self.stored[f"{name}.norm.weight"]
        beta = self.stored[f"{name}.norm.bias"]
        for c, t in self._ranks:
            value = self._acquire_input(dr, c, t, mb, name, hidden[(c, t)], True)
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_IN, name, cls,
                       value, self._hidden_mapping(c, t, True),
                       replica=1 if p.sp else p.tp)
            x[(c, t)] = value
            a, ln_tape = layer_norm_forward(po, value, gamma, beta, cfg.norm_eps)
            tapes[(c, t)] = {"ln": ln_tape, "a_own": a}
        for c in range(p.cp):
            if p.sp:
                gathered = all_gather([Tensor(tapes[(c, t)]["a_own"])
                                       for t in range(p.tp)], dim=0)[0].data
            else:
                gathered = None
            for t in range(p.tp):
                a_gathered[(c, t)] = gathered if p.sp else tapes[(c, t)]["a_own"]
        return x, a_gathered, tapes

    def _region_exit(self, lane, name, cls, x, y_partials, tapes):
        """Shared block exit: combine row-parallel partials, add residual,
        record the output."""
        p, po = self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        out = {}
        skip_reduce = self.bugs.fires("MC_TP_ROW_ALLREDUCE", name)
        for c in range(p.cp):
            parts = [Tensor(y_partials[(c, t)]) for t in range(p.tp)]
            if p.sp:
                combined = reduce_scatter(parts, dim=0, policy=po)
                values = [combined[t].data for t in range(p.tp)]
            elif skip_reduce:
                values = [y_partials[(c, t)] for t in range(p.tp)]
            else:
                values = [all_reduce(parts, ReduceOp.SUM, po)[0].data] * p.tp
            for t in range(p.tp):
                result = po.add(x[(c, t)], values[t])
                self._require_finite(f"{name} output", result)
                out[(c, t)] = result
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_OUT, name, cls,
                           result, self._hidden_mapping(c, t, True),
                           replica=1 if p.sp else p.tp)
        tapes["skip_reduce"] = skip_reduce
        lane["tapes"][name] = tapes
        return out

    def _attn_forward(self, lane, name, hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        x, a_gathered, tapes = self._region_enter(lane, name, "AttentionBlock", hidden)
        heads_loc = cfg.n_heads // p.tp
        dh = cfg.head_dim
        y_partials = {}
        # canonical position of each row of the cp-gathered K/V
        perm = np.concatenate([_pieces_positions(_seq_pieces(cfg.seq_len, p.cp, c))
                               for c in range(p.cp)])
        skip_reorder = self.bugs.fires("WD_LAYOUT", name)
        kv_gather: dict[int, dict[str, list]] = {}
        for c, t in self._ranks:
            a = a_gathered[(c, t)]
            wq = self._param_shard(self.stored, f"{name}.wq", t)
            wk = self._param_shard(self.stored, f"{name}.wk", t)
            wv = self._param_shard(self.stored, f"{name}.wv", t)
            q, k, v = po.mm(a, wq), po.mm(a, wk), po.mm(a, wv)
            tapes[(c, t)].update({"a": a, "q": q, "k": k, "v": v})
            kv_gather.setdefault(t, {"k": [None] * p.cp, "v": [None] * p.cp})
            kv_gather[t]["k"][c] = k
            kv_gather[t]["v"][c] = v
        for c, t in self._ranks:
            tape = tapes[(c, t)]
            if p.cp > 1:
                k_all = np.concatenate(kv_gather[t]["k"], axis=0)
                v_all = np.concatenate(kv_gather[t]["v"], axis=0)
                if not skip_reorder:
                    inv = np.argsort(perm)
                    k_all, v_all = k_all[inv], v_all[inv]
            else:
                k_all, v_all = tape["k"], tape["v"]
            gpos_q = _pieces_positions(_seq_pieces(cfg.seq_len, p.cp, c))
            mask = np.arange(cfg.seq_len)[None, :] <= gpos_q[:, None]
            probs, ctx = [], []
            for h in range(heads_loc):
                cols = slice(h * dh, (h + 1) * dh)
                scores = po.scale(po.mm(tape["q"][:, cols], k_all[:, cols].T),
                                  1.0 / math.sqrt(dh))
                masked = np.where(mask, scores, -np.inf)
                prob = softmax_rows(po, masked)
                probs.append(prob)
                ctx.append(po.mm(prob, v_all[:, cols]))
            o = np.concatenate(ctx, axis=1)
            wo = self._param_shard(self.stored, f"{name}.wo", t)
            y_partials[(c, t)] = po.mm(o, wo)
            tape.update({"k_all": k_all, "v_all": v_all, "probs": probs,
                         "o": o, "mask": mask})
        tapes["perm"] = perm
        tapes["skip_reorder"] = skip_reorder
        return self._region_exit(lane, name, "AttentionBlock", x, y_partials, tapes)

    def _mlp_forward(self, lane, name, hidden):
        po = self.po
        x, a_gathered, tapes = self._region_enter(lane, name, "MlpBlock", hidden)
        y_partials = {}
        for c, t in self._ranks:
            a = a_gathered[(c, t)]
            w1 = self._param_shard(self.stored, f"{name}.w1", t)
            w2 = self._param_shard(self.stored, f"{name}.w2", t)
            u = po.mm(a, w1)
            g, gelu_tape = gelu_forward(po, u)
            y_partials[(c, t)] = po.mm(g, w2)
            tapes[(c, t)].update({"a": a, "gelu": gelu_tape, "g": g})
        return self._region_exit(lane, name, "MlpBlock", x, y_partials, tapes)

    def _final_norm_forward(self, lane, hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.final_norm", "LayerNorm"
        gamma = self.stored["model.final_norm.weight"]
        beta = self.stored["model.final_norm.bias"]
        out, tapes = {}, {}
        for c, t in self._ranks:
            value = self._acquire_input(dr, c, t, mb, name, hidden[(c, t)], True)
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_IN, name, cls,
                       value, self._hidden_mapping(c, t, True),
                       replica=1 if p.sp else p.tp)
            y, ln_tape = layer_norm_forward(po, value, gamma, beta, cfg.norm_eps)
            self._require_finite(f"{name} output", y)
            out[(c, t)] = y
            tapes[(c, t)] = {"ln": ln_tape}
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_OUT, name, cls,
                       y, self._hidden_mapping(c, t, True),
                       replica=1 if p.sp else p.tp)
        lane["tapes"][name] = tapes
        return out

    def _head_forward(self, lane, hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.lm_head", "TiedLMHead"
        ids_full = lane["ids"]
        labels_full = labels_for(ids_full)
        tapes = {}
        loss_terms = []
        for c in range(p.cp):
            if p.sp:
                h_chunk = all_gather([Tensor(hidden[(c, t)])
                                      for t in range(p.tp)], dim=0)[0].data
            else:
                h_chunk = None
            gpos = _pieces_positions(self._pieces(c, 0, False))
            labels_loc = labels_full[gpos]
            for t in range(p.tp):
                value = h_chunk if p.sp else hidden[(c, t)]
                value = self._acquire_input(dr, c, t, mb, name, value, False)
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_IN, name, cls,
                           value, self._hidden_mapping(c, t, False), replica=p.tp)
                w_t = self._param_shard(self.stored, "model.embedding.word", t)
                logits_t = po.mm(value, w_t.T)
                self._require_finite(f"{name} logits", logits_t)
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_OUT, name, cls,
                           logits_t, self._logits_mapping(c, t), replica=1)
                tapes[(c, t)] = {"h": value, "logits": logits_t}
            logits_full = np.concatenate(
                [tapes[(c, t)]["logits"] for t in range(p.tp)], axis=1)
            nll, p_rows = cross_entropy_rows(logits_full, labels_loc)
            for t in range(p.tp):
                tapes[(c, t)].update({"p_rows": p_rows, "labels": labels_loc})
            loss_terms.append(float(np.sum(nll)))
        loss = float(sum(loss_terms) / cfg.seq_len)
        if not math.isfinite(loss):
            raise NonFinite("loss is not finite")
        lane["tapes"][name] = tapes
        lane["loss"] = loss
        return loss

    # -- backward ----------------------------------------------------------

    def backward_microbatch(self, mb: int, dr: int = 0) -> dict[str, np.ndarray]:
        cfg = self.cfg
        lane = self._grid.pop((dr, mb))
        grads: dict[str, dict[tuple[int, int], np.ndarray]] = {}
        d_hidden = self._head_backward(lane, grads)
        d_hidden = self._final_norm_backward(lane, grads, d_hidden)
        for layer in reversed(range(cfg.layers)):
            d_hidden = self._block_backward(lane, mlp_name(layer), grads, d_hidden)
            d_hidden = self._block_backward(lane, attn_name(layer), grads, d_hidden)
        self._embedding_backward(lane, grads, d_hidden)
        self._record_microbatch_grads(lane, grads)
        self._accumulate(lane["dr"], grads)
        # single full-tensor view for the single-device API (world size 1)
        if self.pcfg.world_size() == 1 and self.pcfg.microbatches == 1:
            return {path: per_rank[(0, 0)] for path, per_rank in grads.items()}
        return {}

    def _grad_add(self, grads, path, c, t, value):
        per_rank = grads.setdefault(path, {})
        if (c, t) in per_rank:
            per_rank[(c, t)] = per_rank[(c, t)] + value
        else:
            per_rank[(c, t)] = value

    def _head_backward(self, lane, grads):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.lm_head", "TiedLMHead"
        tapes = lane["tapes"][name]
        v_loc = cfg.vocab // p.tp
        d_hidden = {}
        for c in range(p.cp):
            d_partials = []
            for t in range(p.tp):
                tape = tapes[(c, t)]
                p_rows, labels = tape["p_rows"], tape["labels"]
                onehot = np.zeros_like(p_rows)
                onehot[np.arange(len(labels)), labels] = 1.0
                dlogits_full = po.scale(po.sub(p_rows, onehot), 1.0 / cfg.seq_len)
                dlogits_t = dlogits_full[:, t * v_loc:(t + 1) * v_loc]
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_OUT, name, cls,
                           dlogits_t, self._logits_mapping(c, t), replica=1)
                w_t = self._param_shard(self.stored, "model.embedding.word", t)
                d_partials.append(po.mm(dlogits_t, w_t))
                self._grad_add(grads, "model.embedding.word", c, t,
                               po.mm(dlogits_t.T, tape["h"]))
            if p.sp:
                scattered = reduce_scatter([Tensor(x) for x in d_partials],
                                           dim=0, policy=po)
                for t in range(p.tp):
                    d_hidden[(c, t)] = scattered[t].data
                    self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_IN, name,
                               cls, scattered[t].data,
                               self._hidden_mapping(c, t, True), replica=1)
            else:
                combined = all_reduce([Tensor(x) for x in d_partials],
                                      ReduceOp.SUM, po)[0].data
                for t in range(p.tp):
                    d_hidden[(c, t)] = combined
                    self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_IN, name,
                               cls, combined, self._hidden_mapping(c, t, False),
                               replica=p.tp)
        return d_hidden

    def _final_norm_backward(self, lane, grads, d_hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.final_norm", "LayerNorm"
        tapes = lane["tapes"][name]
        gamma = self.stored["model.final_norm.weight"]
        out = {}
        for c, t in self._ranks:
            dy = d_hidden[(c, t)]
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_OUT, name, cls,
                       dy, self._hidden_mapping(c, t, True),
                       replica=1 if p.sp else p.tp)
            dx, dgamma, dbeta = layer_norm_backward(po, dy, tapes[(c, t)]["ln"],
                                                    gamma)
            self._grad_add(grads, "model.final_norm.weight", c, t, dgamma)
            self._grad_add(grads, "model.final_norm.bias", c, t, dbeta)
            out[(c, t)] = dx
            self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_IN, name, cls,
                       dx, self._hidden_mapping(c, t, True),
                       replica=1 if p.sp else p.tp)
        return out

    def _block_backward(self, lane, name, grads, d_hidden):
        if name.endswith(".attn"):
            return self._attn_backward(lane, name, grads, d_hidden)
        return self._mlp_backward(lane, name, grads, d_hidden)

    def _combine_backward(self, lane, name, cls, d_hidden):
        """Backward of the block-exit combine: the residual passes d through;
        the row-parallel branch receives the full-sequence gradient (gather
        when sp was scattered, identity otherwise)."""
        p = self.pcfg
        dr, mb = lane["dr"], lane["mb"]
        d_branch = {}
        for c in range(p.cp):
            for t in range(p.tp):
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_OUT, name,
                           cls, d_hidden[(c, t)],
                           self._hidden_mapping(c, t, True),
                           replica=1 if p.sp else p.tp)
            if p.sp:
                gathered = all_gather([Tensor(d_hidden[(c, t)])
                                       for t in range(p.tp)], dim=0)[0].data
                for t in range(p.tp):
                    d_branch[(c, t)] = gathered
            else:
                for t in range(p.tp):
                    d_branch[(c, t)] = d_hidden[(c, t)]
        return d_branch

    def _region_leave_backward(self, lane, name, grads, da_gathered,
                               d_hidden):
        """Backward of the block entry: each rank's da is only its column
        shard's contribution, so the duplicate-to-ranks forward op backs
        into a sum across tp: reduce-scatter when sp gathered, all-reduce
        otherwise.  Then layer norm backward and the residual path."""
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        cls = "AttentionBlock" if name.endswith(".attn") else "MlpBlock"
        gamma = self.stored[f"{name}.norm.weight"]
        out = {}
        for c in range(p.cp):
            parts = [Tensor(da_gathered[(c, t)]) for t in range(p.tp)]
            if p.sp:
                scattered = reduce_scatter(parts, dim=0, policy=po)
                da_own = {t: scattered[t].data for t in range(p.tp)}
            else:
                total = all_reduce(parts, ReduceOp.SUM, po)[0].data
                da_own = {t: total for t in range(p.tp)}
            for t in range(p.tp):
                tape = lane["tapes"][name][(c, t)]
                dx_ln, dgamma, dbeta = layer_norm_backward(
                    po, da_own[t], tape["ln"], gamma)
                self._grad_add(grads, f"{name}.norm.weight", c, t, dgamma)
                self._grad_add(grads, f"{name}.norm.bias", c, t, dbeta)
                dx = po.add(d_hidden[(c, t)], dx_ln)
                out[(c, t)] = dx
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_IN, name,
                           cls, dx, self._hidden_mapping(c, t, True),
                           replica=1 if p.sp else p.tp)
        return out

    def _attn_backward(self, lane, name, grads, d_hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        tapes = lane["tapes"][name]
        heads_loc = cfg.n_heads // p.tp
        dh = cfg.head_dim
        seq_loc = cfg.seq_len // p.cp
        d_branch = self._combine_backward(lane, name, "AttentionBlock", d_hidden)
        perm = tapes["perm"]
        da_gathered = {}
        dk_all_parts: dict[int, list] = {}
        dv_all_parts: dict[int, list] = {}
        for c, t in self._ranks:
            tape = tapes[(c, t)]
            dy = d_branch[(c, t)]
            self._grad_add(grads, f"{name}.wo", c, t, po.mm(tape["o"].T, dy))
            wo = self._param_shard(self.stored, f"{name}.wo", t)
            do = po.mm(dy, wo.T)
            dq = np.zeros_like(tape["q"])
            dk_all = np.zeros_like(tape["k_all"])
            dv_all = np.zeros_like(tape["v_all"])
            for h in range(heads_loc):
                cols = slice(h * dh, (h + 1) * dh)
                prob = tape["probs"][h]
                dprob = po.mm(do[:, cols], tape["v_all"][:, cols].T)
                dv_all[:, cols] = po.mm(prob.T, do[:, cols])
                dscores = po.scale(softmax_backward(po, dprob, prob),
                                   1.0 / math.sqrt(dh))
                dq[:, cols] = po.mm(dscores, tape["k_all"][:, cols])
                dk_all[:, cols] = po.mm(dscores.T, tape["q"][:, cols])
            tapes[(c, t)]["dq"] = dq
            dk_all_parts.setdefault(t, []).append(dk_all)
            dv_all_parts.setdefault(t, []).append(dv_all)
        for c, t in self._ranks:
            tape = tapes[(c, t)]
            if p.cp > 1:
                # every cp rank contributed gradients for all positions of
                # K/V; sum across ranks, then slice this rank's rows back out
                def _own_rows(parts):
                    canon = _reduce_arrays(parts, ReduceOp.SUM, po)
                    if not tapes["skip_reorder"]:
                        canon = canon[perm]
                    return canon[c * seq_loc:(c + 1) * seq_loc]
                dk = _own_rows(dk_all_parts[t])
                dv = _own_rows(dv_all_parts[t])
            else:
                dk = dk_all_parts[t][0]
                dv = dv_all_parts[t][0]
            dq = tape["dq"]
            a = tape["a"]
            self._grad_add(grads, f"{name}.wq", c, t, po.mm(a.T, dq))
            self._grad_add(grads, f"{name}.wk", c, t, po.mm(a.T, dk))
            self._grad_add(grads, f"{name}.wv", c, t, po.mm(a.T, dv))
            wq = self._param_shard(self.stored, f"{name}.wq", t)
            wk = self._param_shard(self.stored, f"{name}.wk", t)
            wv = self._param_shard(self.stored, f"{name}.wv", t)
            da = po.add(po.add(po.mm(dq, wq.T), po.mm(dk, wk.T)),
                        po.mm(dv, wv.T))
            da_gathered[(c, t)] = da
        return self._region_leave_backward(lane, name, grads, da_gathered,
                                           d_hidden)

    def _mlp_backward(self, lane, name, grads, d_hidden):
        p, po = self.pcfg, self.po
        tapes = lane["tapes"][name]
        d_branch = self._combine_backward(lane, name, "MlpBlock", d_hidden)
        da_gathered = {}
        for c, t in self._ranks:
            tape = tapes[(c, t)]
            dy = d_branch[(c, t)]
            self._grad_add(grads, f"{name}.w2", c, t, po.mm(tape["g"].T, dy))
            w2 = self._param_shard(self.stored, f"{name}.w2", t)
            dg = po.mm(dy, w2.T)
            du = gelu_backward(po, dg, tape["gelu"])
            self._grad_add(grads, f"{name}.w1", c, t,
                           po.mm(tape["a"].T, du))
            w1 = self._param_shard(self.stored, f"{name}.w1", t)
            da_gathered[(c, t)] = po.mm(du, w1.T)
        return self._region_leave_backward(lane, name, grads, da_gathered,
                                           d_hidden)

    def _embedding_backward(self, lane, grads, d_hidden):
        cfg, p, po = self.cfg, self.pcfg, self.po
        dr, mb = lane["dr"], lane["mb"]
        name, cls = "model.embedding", "Embedding"
        ids_full = lane["ids"]
        v_loc = cfg.vocab // p.tp
        for c in range(p.cp):
            gpos_chunk = _pieces_positions(self._pieces(c, 0, False))
            if p.sp:
                d_full = all_gather([Tensor(d_hidden[(c, t)])
                                     for t in range(p.tp)], dim=0)[0].data
            else:
                d_full = None
            for t in range(p.tp):
                dy = d_hidden[(c, t)]
                self._emit(dr, c, t, mb, TensorKind.ACTIVATION_GRAD_OUT, name,
                           cls, dy, self._hidden_mapping(c, t, True),
                           replica=1 if p.sp else p.tp)
                rows = d_full if p.sp else dy
                ids_loc = ids_full[gpos_chunk]
                w_rows = np.zeros((v_loc, cfg.d_model))
                in_shard = (ids_loc >= t * v_loc) & (ids_loc < (t + 1) * v_loc)
                np.add.at(w_rows, np.clip(ids_loc - t * v_loc, 0, v_loc - 1),
                          rows * in_shard[:, None])
                self._grad_add(grads, "model.embedding.word", c, t,
                               po.q(w_rows))
                dpos = np.zeros((cfg.seq_len, cfg.d_model))
                if p.sp:
                    sub_pos = _pieces_positions(self._pieces(c, t, True))
                    if self.bugs.fires("WC_WRONG_ORDER", name):
                        dpos[gpos_chunk] = d_full
                    else:
                        dpos[sub_pos] = dy
                else:
                    dpos[gpos_chunk] = dy
                self._grad_add(grads, "model.embedding.position", c, t,
                               po.q(dpos))

    # -- per-microbatch gradient records ------------------------------------

    def _record_microbatch_grads(self, lane, grads):
        p = self.pcfg
        if self.collector is None or p.cp > 1:
            # per-microbatch grads under cp are partial cross-position sums
            # with no shard interpretation; MainGrad carries the comparison
            return
        dr, mb = lane["dr"], lane["mb"]
        for path in self.model.order:
            if p.sp and _is_norm_param(path):
                continue  # partial until the pre-optimizer sp reduction
            for c, t in self._ranks:
                value = grads[path][(c, t)]
                if path.endswith(".position"):
                    mapping = self._position_grad_mapping(c, t)
                    value = value[_pieces_positions(self._pieces(c, t, p.sp))]
                    replica = 1 if p.sp else p.tp
                else:
                    mapping = self._param_mapping(path, t)
                    replica = p.tp if _param_tp_axis(path) is None else 1
                self._emit(dr, c, t, mb, TensorKind.PARAM_GRAD, path,
                           "Param", value, mapping, replica)

    def _position_grad_mapping(self, c, t):
        pieces = self._pieces(c, t, self.pcfg.sp)
        rows = sum(l1 - l0 for (l0, l1), _ in pieces)
        return _mapping_from((rows, self.cfg.d_model),
                             (self.cfg.seq_len, self.cfg.d_model), {0: pieces})

    # -- iteration driver ----------------------------------------------------

    def _accumulate(self, dr, grads):
        accum = self._accum.setdefault(dr, {})
        for path, per_rank in grads.items():
            slot = accum.setdefault(path, {})
            for key, value in per_rank.items():
                if key in slot:
                    slot[key] = slot[key] + value
                else:
                    slot[key] = value.copy()

    def run_iteration(self) -> tuple[list[float], dict, dict]:
        p = self.pcfg
        self._record_params(iteration=0, source=self.stored)
        losses = []
        per_dp = p.microbatches // p.dp
        for dr in range(p.dp):
            for local in range(per_dp):
                mb = dr * per_dp + local
                losses.append(self.forward_microbatch(mb, dr=dr))
                self.backward_microbatch(mb, dr=dr)
        main = self._reduce_main_grads()
        self._record_main_grads(main)
        updated = self._optimizer(main)
        return losses, main, updated

    def _reduce_main_grads(self):
        """The pre-optimizer reduction ladder: sp norm-grad all-reduce over
        tp inside each (dp, cp) pair, then the dp x cp all-reduce per tp
        shard.  Main gradients stay in working precision throughout."""
        p = self.pcfg
        main: dict[str, dict[tuple[int, int, int], np.ndarray]] = {}
        for path in self.model.order:
            per_rank = {}
            for dr in range(p.dp):
                for c, t in self._ranks:
                    per_rank[(dr, c, t)] = self._accum[dr][path][(c, t)]
            if p.sp and (_is_norm_param(path) or path.endswith(".position")):
                if not self.bugs.fires("MC_SP_NORM_GRAD", path):
                    op = ReduceOp.AVG if self.bugs.fires(
                        "WC_WRONG_REDUCE_OP", path) else ReduceOp.SUM
                    for dr in range(p.dp):
                        for c in range(p.cp):
                            parts = [per_rank[(dr, c, t)] for t in range(p.tp)]
                            total = _reduce_arrays(parts, op, None)
                            for t in range(p.tp):
                                per_rank[(dr, c, t)] = total
            for t in range(p.tp):
                group = [(dr, c) for dr in range(p.dp) for c in range(p.cp)]
                if self.bugs.fires("MC_DP_GRAD", path):
                    subgroups = [[g] for g in group]
                elif self.bugs.fires("WC_WRONG_GROUP", path) and len(group) >= 2:
                    half = len(group) // 2
                    subgroups = [group[:half], group[half:]]
                else:
                    subgroups = [group]
                for subgroup in subgroups:
                    parts = [per_rank[(dr, c, t)] for dr, c in subgroup]
                    total = _reduce_arrays(parts, ReduceOp.SUM, None)
                    for dr, c in subgroup:
                        per_rank[(dr, c, t)] = total
            main[path] = per_rank
        return main

    def _record_main_grads(self, main):
        if self.collector is None:
            return
        p = self.pcfg
        for path in self.model.order:
            sharded = _param_tp_axis(path) is not None
            replica = p.dp * p.cp * (1 if sharded else p.tp)
            for (dr, c, t), value in sorted(main[path].items()):
                self._emit(dr, c, t, 0, TensorKind.MAIN_GRAD, path, "Param",
                           value, self._param_mapping(path, t), replica)

    def _record_params(self, iteration: int, source: dict[str, np.ndarray],
                       per_rank: dict | None = None):
        if self.collector is None:
            return
        p = self.pcfg
        for path in self.model.order:
            sharded = _param_tp_axis(path) is not None
            replica = p.dp * p.cp * (1 if sharded else p.tp)
            for dr in range(p.dp):
                for c, t in self._ranks:
                    if per_rank is not None:
                        value = per_rank[path][(dr, c, t)]
                    else:
                        value = self._param_shard(source, path, t)
                    self._emit(dr, c, t, 0, TensorKind.PARAM, path, "Param",
                               value, self._param_mapping(path, t), replica,
                               iteration=iteration)

    def _optimizer(self, main):
        """Per-rank SGD on the master shards; divergent main grads (from
        injected bugs) produce divergent Param-after records."""
        p = self.pcfg
        scale = self.lr / p.microbatches
        updated_per_rank: dict[str, dict] = {}
        updated_canonical: dict[str, np.ndarray] = {}
        for path in self.model.order:
            updated_per_rank[path] = {}
            for dr in range(p.dp):
                for c, t in self._ranks:
                    master = self._param_shard(self.model.params, path, t)
                    new = master - scale * main[path][(dr, c, t)]
                    updated_per_rank[path][(dr, c, t)] = self.po.q(new)
            full = self.model.params[path] - scale * self._full_grad(path, main)
            updated_canonical[path] = self.po.q(full)
        self._record_params(iteration=self.iteration + 1, source=self.stored,
                            per_rank=updated_per_rank)
        return updated_canonical

    def _full_grad(self, path: str, main) -> np.ndarray:
        """Rank (0, *, *) shards merged back to the full tensor."""
        p = self.pcfg
        axis = _param_tp_axis(path)
        if axis is None:
            return main[path][(0, 0, 0)]
        return np.concatenate([main[path][(0, 0, t)] for t in range(p.tp)],
                              axis=axis)

    def attach_collector(self, collector: TraceCollector | None) -> None:
        self.collector = collector


# ---------------------------------------------------------------------------
# public run entry points

def _make_collector(cfg: ModelConfig, pcfg: ParallelConfig, mode: str,
                    lr: float, bug_ids: list[str],
                    trace_filter: TraceFilter | None) -> TraceCollector:
    header = {
        "digest": setup_digest(cfg, pcfg.microbatches, lr),
        "mode": mode,
        "model": cfg.as_dict(),
        "parallel": pcfg.as_dict(),
        "lr": lr,
        "bugs": bug_ids,
        "trace_version": 1,
    }
    return TraceCollector(header, trace_filter)


def run_candidate(cfg: ModelConfig, pcfg: ParallelConfig,
                  injections: tuple[BugInjection, ...] = (), *,
                  rewrite: bool = False, perturb: PerturbSpec | None = None,
                  lr: float = 0.1, trace_filter: TraceFilter | None = None,
                  max_world: int = 8) -> SimResult:
    """Build the model deterministically and run one training iteration
    under `pcfg`, returning the trace and results."""
    model = build_model(cfg)
    mode = "module-wise" if rewrite else "cascade"
    bugs = ActiveBugs(injections)
    collector = _make_collector(cfg, pcfg, mode, lr, bugs.enabled_ids(),
                                trace_filter)
    emulator = Emulator(model, pcfg, injections, collector, rewrite=rewrite,
                        perturb=perturb, lr=lr, max_world=max_world)
    losses, main, updated = emulator.run_iteration()
    canonical_main = {path: emulator._full_grad(path, main)
                      for path in model.order}
    return SimResult(trace=collector.trace, losses=losses,
                     main_grads=canonical_main, updated_params=updated)


def run_reference(cfg: ModelConfig, microbatches: int = 1, *,
                  rewrite: bool = False, perturb: PerturbSpec | None = None,
                  lr: float = 0.1,
                  trace_filter: TraceFilter | None = None) -> SimResult:
    """The trusted single-device run: the same engine at the all-ones
    layout, where every collective degenerates to identity."""
    pcfg = ParallelConfig(microbatches=microbatches)
    return run_candidate(cfg, pcfg, (), rewrite=rewrite, perturb=perturb,
                         lr=lr, trace_filter=trace_filter)
