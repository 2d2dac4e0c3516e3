"""Differential testing for emulated distributed NN training.

The toolkit runs a small transformer under an emulated parallel layout
(data, tensor, sequence, pipeline, virtual-pipeline, and context
parallelism) with reduced-precision arithmetic, records every tensor of
interest into a trace keyed by canonical ids, reassembles shards, and
compares the result against a trusted single-device run using tolerances
estimated by input perturbation.  Silent numerical bugs show up as value
divergence or replica inconsistency at the earliest affected module.
"""

from .bugs import BUG_CATALOG, BugInjection, BugSpec
from .canonical import (CanonicalId, ReplicaGroup, ShardMapping, SliceBox,
                        TensorKind, canonical_layer_index, check_replicas,
                        identity_mapping, locate_layer, merge, parse_canonical,
                        validate_mapping, whole_box)
from .checker import (CheckEntry, CheckReport, StaticReport, ToleranceMap,
                      check, compare_static, estimate_tolerance,
                      render_report)
from .config import Annotation, AnnotationFilter, RunConfig
from .engine import (Emulator, ParallelConfig, PerturbSpec, ReduceOp,
                     SimResult, all_gather, all_reduce, reduce_scatter,
                     run_candidate, run_reference, setup_digest,
                     validate_parallel)
from .errors import (ConfigInvalid, DigestMismatch, FormatError, MappingInvalid,
                     MergeConflict, NonFinite, ReplicaMismatch, ShapeMismatch,
                     TraindiffError, UnknownBugId)
from .generation import (GenSpec, Normal, SplitMix64, TokenIds, Uniform,
                         extract_shard, fnv1a_64, generate_full, seed_from)
from .model import Model, ModelConfig, backward, build_model, forward, \
    optimizer_step
from .tensor import (POLICIES, FloatFormat, PolicyOps, PrecisionPolicy, Tensor,
                     frobenius_norm, quantize, quantize_array, rel_err,
                     rel_err_arrays)
from .tracestore import (RankMeta, Trace, TraceCollector, TraceFilter,
                         TraceRecord, read_trace, trace_from_bytes,
                         trace_to_bytes, write_trace)

__version__ = "0.1.0"
