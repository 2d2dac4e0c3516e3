"""Trace exporter for torch models.

Attach hooks to the modules you care about, run one training step, and
flush a trace file that the differential checker consumes as a candidate
(or reference) run:

    handle = torchtap.attach(model, torchtap.TapConfig(patterns=("layers.*",)))
    loss = model(batch).sum()
    loss.backward()
    torchtap.flush(handle, "cand.trace")
"""

from .errors import PatternUnmatched, TapError, WriteError
from .tap import (KIND_ACTIVATION_IN, KIND_ACTIVATION_OUT, KIND_PARAM_GRAD,
                  TapConfig, TapHandle, attach, detach, flush, to_bytes)
from .writer import FlatRecord, canonical_json, encode_id, serialize, write

__all__ = [
    "KIND_ACTIVATION_IN",
    "KIND_ACTIVATION_OUT",
    "KIND_PARAM_GRAD",
    "FlatRecord",
    "PatternUnmatched",
    "TapConfig",
    "TapError",
    "TapHandle",
    "WriteError",
    "attach",
    "canonical_json",
    "detach",
    "encode_id",
    "flush",
    "serialize",
    "to_bytes",
    "write",
]
