import numpy as np
import pytest

from twostagesem import Fixed, Free, IdentificationError, SemSpec, SpecError
from twostagesem.model import build_matrices, pack


def test_factor_model_layout(two_factor_spec):
    lay = two_factor_spec.layout
    assert lay.labels[:4] == ("a2~f1", "a3~f1", "b2~f2", "b3~f2")
    assert "f2~f1" in lay.labels and "a2~z" in lay.labels
    assert two_factor_spec.reference_indicator("f1") == "a1"
    assert two_factor_spec.psi_labels == ("f1~~f1", "f2~~f2")
    assert lay.is_variance.sum() == 8


def test_matrices_round_trip(two_factor_spec):
    rng = np.random.default_rng(0)
    theta = rng.uniform(0.2, 1.5, two_factor_spec.n_free)
    mats = build_matrices(two_factor_spec, theta)
    assert mats.Lambda[0, 0] == 1.0 and mats.nu[0] == 0.0
    assert mats.B[1, 0] == theta[two_factor_spec.layout.index["f2~f1"]]
    np.testing.assert_array_equal(pack(two_factor_spec, mats).values, theta)


def test_shared_label_and_symmetric_covariance():
    spec = SemSpec(
        observed=["x1", "x2", "x3"], latents=["f"],
        loadings=[("x1", "f", 1.0), ("x2", "f", "lam"), ("x3", "f", "lam")],
        intercepts={"x1": 0.0, "x2": None, "x3": None, "f": None},
        variances={"x1": None, "x2": None, "x3": None, "f": None},
        covariances=[("x2", "x3", None)],
    )
    assert spec.layout.labels.count("lam") == 1
    theta = np.arange(1, spec.n_free + 1, dtype=float)
    mats = build_matrices(spec, theta)
    assert mats.Lambda[1, 0] == mats.Lambda[2, 0]
    assert mats.Omega[1, 2] == mats.Omega[2, 1] == theta[spec.layout.index["x2~~x3"]]


def test_unconstrained_round_trip(two_factor_spec):
    lay = two_factor_spec.layout
    theta = np.linspace(0.3, 2.0, len(lay))
    u = lay.to_unconstrained(theta)
    np.testing.assert_allclose(lay.from_unconstrained(u), theta, rtol=1e-15)
    with pytest.raises(SpecError):
        lay.to_unconstrained(-theta)


def test_param_vector_mapping(two_factor_spec):
    vals = {lab: float(k) for k, lab in enumerate(two_factor_spec.layout.labels)}
    pv = two_factor_spec.param_vector(vals)
    assert pv["f2~f1"] == vals["f2~f1"]
    assert pv.as_dict() == vals
    with pytest.raises(SpecError, match="missing parameter"):
        two_factor_spec.param_vector({"a2~f1": 1.0})
    with pytest.raises(SpecError, match="shape"):
        two_factor_spec.param_vector(np.zeros(3))


def test_yaml_round_trip(two_factor_spec, tmp_path):
    path = tmp_path / "m.yaml"
    two_factor_spec.save(path)
    back = SemSpec.load(path)
    assert back == two_factor_spec
    assert back.layout.labels == two_factor_spec.layout.labels


def test_yaml_short_paths():
    text = """
observed: [x1, x2]
latents: [f]
loadings: [[x1, f, 1.0], [x2, f]]
intercepts: {x1: 0.0, x2: null, f: null}
variances: {x1: null, x2: null, f: null}
"""
    spec = SemSpec.loads(text)
    assert "x2~f" in spec.layout.labels


@pytest.mark.parametrize("text, err", [
    ("observed: [x]\nlatents: []\nbogus: 1\n", "unknown model spec keys"),
    ("latents: [f]\n", "missing 'observed'"),
    ("- a\n- b\n", "mapping"),
])
def test_yaml_errors(text, err):
    with pytest.raises(SpecError, match=err):
        SemSpec.loads(text)


def test_identification_error():
    with pytest.raises(IdentificationError, match="reference indicator"):
        SemSpec(observed=["x1", "x2"], latents=["f"],
                loadings=[("x1", "f", None), ("x2", "f", None)],
                intercepts={"f": None}, variances={"x1": None, "x2": None, "f": None})


def test_fixed_variance_identifies():
    spec = SemSpec(observed=["x1", "x2", "x3"], latents=["f"],
                   loadings=[(f"x{j}", "f", None) for j in (1, 2, 3)],
                   intercepts={"x1": None, "x2": None, "x3": None, "f": 0.0},
                   variances={"x1": None, "x2": None, "x3": None, "f": 1.0})
    assert spec.reference_indicator("f") is None
    assert spec.identification_problems() == []


@pytest.mark.parametrize("kw, err", [
    (dict(observed=["x", "x"]), "unique"),
    (dict(loadings=[("x1", "nope", 1.0)]), "indicator must be observed"),
    (dict(regressions=[("f", "f")]), "itself"),
    (dict(regressions=[("x1", "f")]), "unsupported regression"),
    (dict(variances={"ghost": None}), "unknown variable"),
    (dict(covariances=[("x1", "f", None)]), "distinct indicators or latents"),
])
def test_spec_validation(kw, err):
    base = dict(observed=["x1", "x2"], latents=["f"],
                loadings=[("x1", "f", 1.0), ("x2", "f", None)],
                intercepts={"x1": 0.0}, variances={"f": None})
    base.update(kw)
    with pytest.raises(SpecError, match=err):
        SemSpec(**base)


def test_constraint_types():
    spec = SemSpec.factor_model({"f": ["x1", "x2"]})
    con = dict(((i, l), c) for i, l, c in spec.loadings)
    assert con[("x1", "f")] == Fixed(1.0)
    assert con[("x2", "f")] == Free("x2~f")


def test_with_paths():
    spec = SemSpec.factor_model({"eta": ["y1", "y2"]})
    aug = spec.with_paths([("eta", "w", None)], covariates=["w"])
    assert aug.covariates == ("w",)
    assert "eta~w" in aug.layout.labels
    assert spec.covariates == ()
