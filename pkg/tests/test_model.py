import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_mflqg.errors import (
    BadHorizon,
    DimensionMismatch,
    NotPositiveDefinite,
    NotPositiveSemidefinite,
    NotSymmetric,
    ParseError,
    SchemaViolation,
)
from robust_mflqg.model import (
    Horizon,
    derived_weights,
    dump_scenario,
    load_scenario,
    params_from_dict,
    params_to_dict,
    shipped_scenario,
    shipped_scenarios,
    validate_params,
)

from conftest import load, scalar_model


def test_paper_example_values(example):
    assert example.horizon == Horizon.finite_horizon(1.0)
    for name, val in dict(A=1, B=1, R1=1, R2=1, Q=1, H=1, G=-1.5, Gamma=0.5).items():
        assert getattr(example, name)[0, 0] == val
    assert example.eta[0] == 0.0


def test_R1_zero_rejected():
    with pytest.raises(NotPositiveDefinite) as exc:
        scalar_model(R1=0.0)
    assert "R1" in str(exc.value)


def test_asymmetric_Q_rejected():
    d = params_to_dict(load("two_dim"))
    d["Q"][0][1] += 1e-6
    with pytest.raises(NotSymmetric):
        validate_params(params_from_dict(d))


def test_negative_H_rejected():
    with pytest.raises(NotPositiveSemidefinite):
        scalar_model(H=-1.0)


def test_shape_mismatch_rejected(example):
    with pytest.raises(DimensionMismatch):
        validate_params(example.replace(A=np.eye(2)))


@pytest.mark.parametrize("hz", [Horizon("finite", T=0.0), Horizon("infinite", rho=-0.1),
                                Horizon("weird")])
def test_bad_horizon(example, hz):
    with pytest.raises(BadHorizon):
        validate_params(example.replace(horizon=hz))


def test_derived_weights_identity_cases(example):
    w = derived_weights(example)
    assert w.Psi[0, 0] == pytest.approx(0.75, abs=1e-15)
    assert w.QIG[0, 0] == pytest.approx(0.25, abs=1e-15)
    m0 = load("two_dim")
    w0 = derived_weights(m0.replace(Gamma=np.zeros((2, 2))))
    assert np.all(w0.Psi == 0) and np.allclose(w0.QIG, m0.Q)
    np.testing.assert_allclose(w0.eta_bar, m0.Q @ m0.eta)
    w1 = derived_weights(m0.replace(Gamma=np.eye(2)))
    np.testing.assert_allclose(w1.QIG, 0, atol=1e-15)
    np.testing.assert_allclose(w1.Psi, m0.Q, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_weights_decomposition_random(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    Q = X @ X.T
    Gm = rng.standard_normal((n, n))
    m = load("paper_example")
    raw = m.replace(n=n, r=n, d=n, A=np.eye(n), B=np.eye(n), G=np.zeros((n, n)),
                    sigma=np.eye(n), Q=Q, R1=np.eye(n), R2=np.eye(n), H=np.zeros((n, n)),
                    Gamma=Gm, eta=np.zeros(n), xbar0=np.zeros(n))
    w = derived_weights(raw)
    assert np.max(np.abs(Q - w.Psi - w.QIG)) <= 1e-10 * (1 + np.abs(Q).max())
    assert np.min(np.linalg.eigvalsh(w.QIG)) >= -1e-10 * (1 + np.abs(Q).max())


@pytest.mark.parametrize("name", shipped_scenarios())
def test_roundtrip_shipped(name, tmp_path):
    m = validate_params(load_scenario(shipped_scenario(name)))
    p = tmp_path / name
    dump_scenario(m, p)
    back = validate_params(load_scenario(p))
    for k, v in params_to_dict(m).items():
        assert params_to_dict(back)[k] == v


def test_missing_field(tmp_path):
    d = params_to_dict(load("paper_example"))
    del d["A"]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    with pytest.raises(SchemaViolation) as exc:
        load_scenario(p)
    assert exc.value.field == "A"


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{\n  "n": 1,\n  "A": [[1.0]\n}')
    with pytest.raises(ParseError) as exc:
        load_scenario(p)
    assert exc.value.line == 4


def test_infinite_horizon_and_defaults():
    d = params_to_dict(load("paper_example"))
    d["horizon"] = {"type": "infinite", "rho": 0.2}
    for k in ("H", "eta", "sigma", "xbar0", "init_spread", "d"):
        d.pop(k)
    m = validate_params(params_from_dict(d))
    assert not m.horizon.finite and m.rho == 0.2
    assert m.eta.tolist() == [0.0] and m.sigma.tolist() == [[0.1]]
    assert m.xbar0.tolist() == [0.0] and m.init_spread == 0.0


def test_finite_horizon_requires_H():
    d = params_to_dict(load("paper_example"))
    del d["H"]
    with pytest.raises(SchemaViolation):
        params_from_dict(d)
