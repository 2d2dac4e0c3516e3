import pytest

from traindiff.canonical import CanonicalId, TensorKind
from traindiff.config import Annotation, AnnotationFilter, RunConfig
from traindiff.errors import ConfigInvalid
from traindiff.tensor import FloatFormat

MODEL = dict(layers=2, d_model=32, n_heads=4, d_ff=64, seq_len=16,
             vocab=64, precision="bf16")


def test_minimal_config_gets_documented_defaults():
    cfg = RunConfig.from_dict({"model": dict(MODEL)})
    assert cfg.parallel.dp == cfg.parallel.tp == cfg.parallel.pp == 1
    assert cfg.parallel.microbatches == 1
    assert cfg.lr == 0.1
    assert cfg.mode == "cascade" and not cfg.rewrite
    assert cfg.kappa == 3.0
    assert cfg.n_samples == 5 and cfg.aggregation == "max"
    assert cfg.eps_p is None
    assert cfg.annotations == () and cfg.bugs == ()
    assert cfg.trace_filter() is None


def test_full_schema_round_trip():
    cfg = RunConfig.from_dict({
        "model": dict(MODEL),
        "parallel": {"dp": 2, "tp": 2, "sp": True, "microbatches": 4},
        "train": {"lr": 0.05},
        "mode": "module-wise",
        "check": {"kappa": 4.0, "eps_p": 1e-3, "n_samples": 2,
                  "aggregation": "mean"},
        "annotations": [{"modules": "model.layers.*",
                         "kinds": ["ActivationOut", "ParamGrad"]}],
        "bugs": ["WD_STALE_INPUT",
                 {"id": "MC_DP_GRAD", "site": "model.embedding.*",
                  "enabled": False}],
    })
    assert cfg.parallel.sp and cfg.parallel.tp == 2
    assert cfg.lr == 0.05
    assert cfg.rewrite
    assert cfg.kappa == 4.0 and cfg.eps_p == 1e-3
    assert cfg.effective_eps_p() == 1e-3
    assert cfg.annotations[0].kinds == frozenset(
        {TensorKind.ACTIVATION_OUT, TensorKind.PARAM_GRAD})
    assert len(cfg.bugs) == 2
    assert cfg.enabled_bugs() == (cfg.bugs[0],)
    assert cfg.bugs[1].site == "model.embedding.*"


def test_storage_format_and_default_eps_follow_precision():
    bf16 = RunConfig.from_dict({"model": dict(MODEL)})
    assert bf16.storage_format() is FloatFormat.BF16
    assert bf16.effective_eps_p() == 2.0 ** -8
    fp32 = RunConfig.from_dict({"model": dict(MODEL, precision="fp32")})
    assert fp32.storage_format() is FloatFormat.FP32
    assert fp32.effective_eps_p() == 2.0 ** -24


@pytest.mark.parametrize("doc,needle", [
    ({}, "model"),
    ({"model": dict(MODEL), "extra": {}}, "extra"),
    ({"model": dict(MODEL, wings=2)}, "model.wings"),
    ({"model": dict(MODEL), "parallel": {"tpp": 2}}, "parallel.tpp"),
    ({"model": dict(MODEL), "train": {"momentum": 0.9}}, "train.momentum"),
    ({"model": dict(MODEL), "check": {"k": 3}}, "check.k"),
    ({"model": dict(MODEL), "mode": "sideways"}, "sideways"),
    ({"model": dict(MODEL), "check": {"kappa": 0}}, "kappa"),
    ({"model": dict(MODEL), "check": {"n_samples": 0}}, "n_samples"),
    ({"model": dict(MODEL), "check": {"eps_p": -1}}, "eps_p"),
    ({"model": dict(MODEL), "check": {"aggregation": "median"}},
     "aggregation"),
    ({"model": dict(MODEL), "train": {"lr": 0}}, "lr"),
    ({"model": dict(MODEL), "bugs": ["NOT_A_BUG"]}, "NOT_A_BUG"),
    ({"model": dict(MODEL),
      "annotations": [{"modules": "model.decoder.*"}]}, "model.decoder.*"),
    ({"model": dict(MODEL),
      "annotations": [{"modules": "model.*", "kinds": ["Activations"]}]},
     "Activations"),
    ({"model": dict(MODEL), "parallel": {"tp": 3}}, "d_model"),
])
def test_bad_configs_name_the_offending_field(doc, needle):
    with pytest.raises(ConfigInvalid) as err:
        RunConfig.from_dict(doc)
    assert needle in str(err.value)


def test_annotation_must_match_and_may_target_params():
    cfg = RunConfig.from_dict({
        "model": dict(MODEL),
        "annotations": [{"modules": "model.layers.0.mlp.w1"}]})
    assert cfg.trace_filter() is not None


def test_yaml_file_loading(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "model:\n"
        "  layers: 2\n  d_model: 32\n  n_heads: 4\n  d_ff: 64\n"
        "  seq_len: 16\n  vocab: 64\n  precision: bf16\n"
        "parallel: {tp: 2, microbatches: 2}\n")
    cfg = RunConfig.from_file(path)
    assert cfg.parallel.tp == 2

    broken = tmp_path / "broken.yaml"
    broken.write_text("model: [unclosed\n")
    with pytest.raises(ConfigInvalid) as err:
        RunConfig.from_file(broken)
    assert "broken.yaml" in str(err.value)

    with pytest.raises(ConfigInvalid):
        RunConfig.from_file(tmp_path / "absent.yaml")

    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("just a string\n")
    with pytest.raises(ConfigInvalid):
        RunConfig.from_file(scalar)


def test_annotation_filter_semantics():
    flt = AnnotationFilter((
        Annotation("model.layers.*",
                   frozenset({TensorKind.ACTIVATION_OUT})),
        Annotation("model.embedding", frozenset()),
    ))
    out = TensorKind.ACTIVATION_OUT
    grad = TensorKind.PARAM_GRAD
    assert flt.admits(CanonicalId(0, 0, out, "model.layers.0.attn"))
    assert not flt.admits(CanonicalId(0, 0, grad, "model.layers.0.attn.wq"))
    # the second annotation keeps every kind at the embedding
    assert flt.admits(CanonicalId(0, 0, grad, "model.embedding"))
    assert not flt.admits(CanonicalId(0, 0, out, "model.final_norm"))
