"""Hooks that capture a torch model's tensors under canonical names.

`attach` registers forward pre/post hooks on every submodule whose
qualified name matches a pattern, plus gradient hooks on those modules'
direct parameters.  One training step later, `flush` writes everything
captured, in execution order, as a trace file the checker toolchain reads
directly.

Canonical naming: a submodule torch calls ``encoder.0`` becomes
``model.encoder.0`` (the prefix is configurable, or replace the whole
scheme with ``rename``), and its weight's gradient is recorded under
``model.encoder.0.weight``.  Each (kind, name) is captured at most once
per step: modules invoked twice would silently overload one id, so the
second invocation raises instead.  Call `handle.clear()` between steps.
"""

from __future__ import annotations

import fnmatch
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import PatternUnmatched, TapError
from .writer import FlatRecord, canonical_json, encode_id, serialize, write

KIND_ACTIVATION_IN = "ActivationIn"
KIND_ACTIVATION_OUT = "ActivationOut"
KIND_PARAM_GRAD = "ParamGrad"


@dataclass(frozen=True)
class TapConfig:
    patterns: tuple[str, ...]
    prefix: str = "model."
    rename: Callable[[str], str] | None = None
    iteration: int = 0
    microbatch: int = 0
    precision: str = "fp32"  # recorded in the header for the checker

    def canonical_name(self, torch_name: str) -> str:
        if self.rename is not None:
            return self.rename(torch_name)
        return self.prefix + torch_name


def _first_tensor(value):
    if isinstance(value, torch.Tensor):
        return value
    if isinstance(value, (tuple, list)):
        for item in value:
            found = _first_tensor(item)
            if found is not None:
                return found
    return None


def _as_f32(tensor: torch.Tensor):
    return tensor.detach().to("cpu", torch.float32).contiguous().numpy()


@dataclass
class TapHandle:
    config: TapConfig
    module_names: tuple[str, ...]
    records: list[FlatRecord] = field(default_factory=list)
    _hooks: list = field(default_factory=list)
    _seen: set[tuple[str, str]] = field(default_factory=set)

    def _capture(self, kind: str, name: str, tensor, module_class: str) -> None:
        if tensor is None:
            return  # non-tensor argument or output: nothing to record
        key = (kind, name)
        if key in self._seen:
            raise TapError(
                f"{name} produced a second {kind} capture within one step; "
                "flush and clear() between steps")
        self._seen.add(key)
        ident = encode_id(self.config.iteration, self.config.microbatch,
                          kind, name)
        self.records.append(FlatRecord(ident, _as_f32(tensor), module_class))

    def _on_pre(self, name: str, module, args) -> None:
        self._capture(KIND_ACTIVATION_IN, name, _first_tensor(args),
                      type(module).__name__)

    def _on_out(self, name: str, module, args, output) -> None:
        self._capture(KIND_ACTIVATION_OUT, name, _first_tensor(output),
                      type(module).__name__)

    def _on_grad(self, name: str, module_class: str, grad) -> None:
        self._capture(KIND_PARAM_GRAD, name, grad, module_class)

    def clear(self) -> None:
        """Drop captured records; hooks stay armed for the next step."""
        self.records.clear()
        self._seen.clear()

    def header(self) -> dict:
        setup = {"source": "torchtap", "precision": self.config.precision,
                 "iteration": self.config.iteration,
                 "microbatch": self.config.microbatch,
                 "modules": list(self.module_names)}
        return {
            "digest": hashlib.sha256(canonical_json(setup)).hexdigest(),
            "mode": "cascade",
            "model": {"precision": self.config.precision},
            "parallel": {"dp": 1, "tp": 1, "pp": 1, "vp": 1, "cp": 1,
                         "sp": False, "microbatches": 1},
            "source": "torchtap",
            "torch_version": torch.__version__,
            "trace_version": 1,
        }


def attach(model: torch.nn.Module, config: TapConfig) -> TapHandle:
    """Register hooks on every submodule matching `config.patterns`."""
    if not config.patterns:
        raise PatternUnmatched("no module patterns given")
    named = [(name, module) for name, module in model.named_modules() if name]
    for pattern in config.patterns:
        if not any(fnmatch.fnmatchcase(name, pattern) for name, _ in named):
            raise PatternUnmatched(
                f"pattern {pattern!r} matches no submodule "
                f"(names: {[name for name, _ in named]})")
    matched = [(name, module) for name, module in named
               if any(fnmatch.fnmatchcase(name, p) for p in config.patterns)]
    handle = TapHandle(config=config,
                       module_names=tuple(config.canonical_name(name)
                                          for name, _ in matched))
    for name, module in matched:
        canonical = config.canonical_name(name)
        handle._hooks.append(module.register_forward_pre_hook(
            functools.partial(handle._on_pre, canonical)))
        handle._hooks.append(module.register_forward_hook(
            functools.partial(handle._on_out, canonical)))
        for param_name, param in module.named_parameters(recurse=False):
            if param.requires_grad:
                handle._hooks.append(param.register_hook(functools.partial(
                    handle._on_grad, f"{canonical}.{param_name}",
                    type(module).__name__)))
    return handle


def detach(handle: TapHandle) -> None:
    """Remove all hooks; captured records stay available for flush."""
    for hook in handle._hooks:
        hook.remove()
    handle._hooks.clear()


def flush(handle: TapHandle, path) -> int:
    """Write the captured records to `path`; returns the record count.

    Byte-deterministic: flushing the same capture twice produces identical
    files.  Records keep their capture (execution) order.
    """
    write(handle.header(), handle.records, path)
    return len(handle.records)


def to_bytes(handle: TapHandle) -> bytes:
    return serialize(handle.header(), handle.records)
