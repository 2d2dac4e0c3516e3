"""Experiment configuration: one YAML file drives the whole pipeline.

The same file feeds ``simulate`` (both roles), ``estimate-tol``,
``check`` and ``sweep``, so a checked-in config is a complete, replayable
experiment.  Schema (all sections optional unless noted)::

    model:        # required: the transformer under test
      layers: 2
      d_model: 32
      n_heads: 4
      d_ff: 64
      seq_len: 16
      vocab: 64
      precision: bf16          # fp32 | bf16 | bf16-fp8
    parallel:     # candidate layout; the reference always runs at 1s
      dp: 2
      tp: 2
      pp: 1
      vp: 1
      cp: 1
      sp: false
      microbatches: 4
    train:
      lr: 0.1
    mode: cascade              # or module-wise (regenerated inputs)
    check:
      kappa: 3.0
      eps_p: null              # null: the storage format's unit roundoff
      n_samples: 5
      aggregation: max         # or mean
    annotations:               # restrict tracing; omit to trace all
      - modules: "model.layers.*"
        kinds: [ActivationIn, ActivationOut]
    bugs:                      # candidate-side fault injections
      - id: WD_STALE_INPUT
        site: null             # null: the catalog default site
        enabled: true
"""

import fnmatch
from dataclasses import dataclass, field

import yaml

from .bugs import BUG_CATALOG, BugInjection
from .canonical import CanonicalId, TensorKind
from .engine import ParallelConfig, validate_parallel
from .errors import ConfigInvalid
from .model import ModelConfig, build_model
from .tensor import POLICIES, FloatFormat

MODES = ("cascade", "module-wise")


@dataclass(frozen=True)
class Annotation:
    """One traced group: a module-name pattern plus the kinds kept.

    An empty kind set keeps every kind at the matched modules.
    """

    modules: str
    kinds: frozenset[TensorKind] = frozenset()


@dataclass(frozen=True)
class AnnotationFilter:
    """Record filter: admit ids matched by at least one annotation."""

    annotations: tuple[Annotation, ...]

    def admits(self, ident: CanonicalId) -> bool:
        return any(
            fnmatch.fnmatchcase(ident.module_name, a.modules)
            and (not a.kinds or ident.kind in a.kinds)
            for a in self.annotations)


def _traceable_names(model_cfg: ModelConfig) -> list[str]:
    model = build_model(model_cfg)
    regions = ["model.embedding", "model.final_norm", "model.lm_head"]
    regions += [f"model.layers.{i}.{part}"
                for i in range(model_cfg.layers) for part in ("attn", "mlp")]
    return regions + list(model.order)


@dataclass(frozen=True)
class RunConfig:
    """A validated experiment: model, layout, check parameters, bugs."""

    model: ModelConfig
    parallel: ParallelConfig
    lr: float = 0.1
    mode: str = "cascade"
    kappa: float = 3.0
    eps_p: float | None = None
    n_samples: int = 5
    aggregation: str = "max"
    annotations: tuple[Annotation, ...] = ()
    bugs: tuple[BugInjection, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(
                f"mode: {self.mode!r} is not one of {list(MODES)}")
        if not (self.lr > 0):
            raise ConfigInvalid("train.lr: must be positive")
        if not (self.kappa > 0):
            raise ConfigInvalid("check.kappa: must be positive")
        if self.eps_p is not None and not (self.eps_p >= 0):
            raise ConfigInvalid("check.eps_p: must be nonnegative")
        if self.n_samples < 1:
            raise ConfigInvalid("check.n_samples: must be >= 1")
        if self.aggregation not in ("max", "mean"):
            raise ConfigInvalid(
                f"check.aggregation: {self.aggregation!r} is not max or mean")
        validate_parallel(self.model, self.parallel)
        for inj in self.bugs:
            if inj.bug_id not in BUG_CATALOG:
                raise ConfigInvalid(
                    f"bugs: unknown id {inj.bug_id!r}; "
                    f"see `traindiff bugs list`")
        if self.annotations:
            names = _traceable_names(self.model)
            for a in self.annotations:
                if not any(fnmatch.fnmatchcase(n, a.modules) for n in names):
                    raise ConfigInvalid(
                        f"annotations: pattern {a.modules!r} matches no "
                        f"traceable module of this model")

    @property
    def rewrite(self) -> bool:
        return self.mode == "module-wise"

    def storage_format(self) -> FloatFormat:
        return POLICIES[self.model.precision].storage

    def effective_eps_p(self) -> float:
        if self.eps_p is not None:
            return self.eps_p
        return self.storage_format().eps

    def trace_filter(self) -> AnnotationFilter | None:
        if not self.annotations:
            return None
        return AnnotationFilter(self.annotations)

    def enabled_bugs(self) -> tuple[BugInjection, ...]:
        return tuple(inj for inj in self.bugs if inj.enabled)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigInvalid(f"{path}: {exc}")
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"{path}: {exc}")
        return cls.from_dict(doc, source=str(path))

    @classmethod
    def from_dict(cls, doc, source: str = "config") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"{source}: top level must be a mapping")
        known = {"model", "parallel", "train", "mode", "check",
                 "annotations", "bugs"}
        for key in doc:
            if key not in known:
                raise ConfigInvalid(f"{source}: unknown section {key!r}")
        if "model" not in doc:
            raise ConfigInvalid(f"{source}: missing required section 'model'")
        model = _build(ModelConfig, _mapping(doc, "model", source), source,
                       "model")
        parallel = _build(ParallelConfig,
                          _mapping(doc, "parallel", source),
                          source, "parallel")
        train = _mapping(doc, "train", source)
        for key in train:
            if key != "lr":
                raise ConfigInvalid(f"{source}: train.{key}: unknown field")
        checkdoc = _mapping(doc, "check", source)
        for key in checkdoc:
            if key not in ("kappa", "eps_p", "n_samples", "aggregation"):
                raise ConfigInvalid(f"{source}: check.{key}: unknown field")
        annotations = _annotations(doc.get("annotations"), source)
        bugs = _bugs(doc.get("bugs"), source)
        try:
            return cls(model=model, parallel=parallel,
                       lr=_number(train.get("lr", 0.1), "train.lr", source),
                       mode=str(doc.get("mode", "cascade")),
                       kappa=_number(checkdoc.get("kappa", 3.0),
                                     "check.kappa", source),
                       eps_p=(None if checkdoc.get("eps_p") is None else
                              _number(checkdoc["eps_p"], "check.eps_p",
                                      source)),
                       n_samples=_int(checkdoc.get("n_samples", 5),
                                      "check.n_samples", source),
                       aggregation=str(checkdoc.get("aggregation", "max")),
                       annotations=annotations, bugs=bugs)
        except ConfigInvalid as exc:
            raise ConfigInvalid(f"{source}: {exc}")


def _mapping(doc: dict, key: str, source: str) -> dict:
    value = doc.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigInvalid(f"{source}: {key}: must be a mapping")
    return value


def _number(value, where: str, source: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(f"{source}: {where}: expected a number, "
                            f"got {value!r}")
    return float(value)


def _int(value, where: str, source: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(f"{source}: {where}: expected an integer, "
                            f"got {value!r}")
    return value


def _build(cls, fields: dict, source: str, section: str):
    allowed = set(cls.__dataclass_fields__)
    for key in fields:
        if key not in allowed:
            raise ConfigInvalid(f"{source}: {section}.{key}: unknown field "
                                f"(expected one of {sorted(allowed)})")
    try:
        return cls(**fields)
    except ConfigInvalid as exc:
        raise ConfigInvalid(f"{source}: {section}: {exc}")
    except TypeError as exc:
        raise ConfigInvalid(f"{source}: {section}: {exc}")


def _annotations(value, source: str) -> tuple[Annotation, ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        raise ConfigInvalid(f"{source}: annotations: must be a list")
    out = []
    for i, item in enumerate(value):
        where = f"annotations[{i}]"
        if not isinstance(item, dict) or "modules" not in item:
            raise ConfigInvalid(
                f"{source}: {where}: must be a mapping with 'modules'")
        for key in item:
            if key not in ("modules", "kinds"):
                raise ConfigInvalid(f"{source}: {where}.{key}: unknown field")
        kinds = item.get("kinds") or []
        if not isinstance(kinds, list):
            raise ConfigInvalid(f"{source}: {where}.kinds: must be a list")
        parsed = set()
        for name in kinds:
            try:
                parsed.add(TensorKind(name))
            except ValueError:
                raise ConfigInvalid(
                    f"{source}: {where}.kinds: unknown kind {name!r} "
                    f"(expected one of {[k.value for k in TensorKind]})")
        out.append(Annotation(modules=str(item["modules"]),
                              kinds=frozenset(parsed)))
    return tuple(out)


def _bugs(value, source: str) -> tuple[BugInjection, ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        raise ConfigInvalid(f"{source}: bugs: must be a list")
    out = []
    for i, item in enumerate(value):
        where = f"bugs[{i}]"
        if isinstance(item, str):
            out.append(BugInjection(bug_id=item))
            continue
        if not isinstance(item, dict) or "id" not in item:
            raise ConfigInvalid(
                f"{source}: {where}: must be a bug id or a mapping "
                f"with 'id'")
        for key in item:
            if key not in ("id", "site", "enabled"):
                raise ConfigInvalid(f"{source}: {where}.{key}: unknown field")
        site = item.get("site")
        enabled = item.get("enabled", True)
        if not isinstance(enabled, bool):
            raise ConfigInvalid(f"{source}: {where}.enabled: must be a bool")
        out.append(BugInjection(bug_id=str(item["id"]),
                                site=None if site is None else str(site),
                                enabled=enabled))
    return tuple(out)
