import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import held_state, rigid_dataset
from dlon import sim, sysid
from dlon.sysid import PolyLibrary, SparseModel, build_features, stlsq


# ---------------------------------------------------------------- library

def test_features_degree_one():
    assert build_features([2.0], [3.0], PolyLibrary(1, 1, 1)) == pytest.approx([1, 2, 3])


def test_features_degree_two():
    assert build_features([2.0], [3.0], PolyLibrary(1, 1, 2)) == pytest.approx([1, 2, 3, 4, 6, 9])


def test_features_zero_inputs():
    lib = PolyLibrary.for_terminals(3)
    f = build_features(np.zeros(9), np.zeros(3), lib)
    assert f[0] == 1.0 and not f[1:].any()
    assert len(lib) == 91  # C(12 + 2, 2)


def test_features_dimension_mismatch():
    with pytest.raises(sysid.DimensionMismatch):
        build_features([1.0, 2.0], [3.0], PolyLibrary(1, 1))


def test_library_order_and_names():
    lib = PolyLibrary(2, 1, 2, ("a", "b", "u"))
    assert lib.descriptors() == ["1", "a", "b", "u", "a^2", "a*b", "a*u", "b^2", "b*u", "u^2"]
    assert lib.index((2, 0)) == lib.index((0, 2)) == 6
    assert lib.index((0, 0, 0)) == -1


# ---------------------------------------------------------------- stlsq

def _scalar_data(f, n=300, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1, 1, (n, 1))
    u = rng.uniform(-1, 1, (n, 1))
    return y, u, f(y, u)


def test_stlsq_recovers_linear_growth():
    y, u, yd = _scalar_data(lambda y, u: 2 * y)
    lib = PolyLibrary(1, 1, 2)
    m = stlsq(build_features(y, u, lib), yd, 1e-6, 0.1, library=lib)
    nz = np.flatnonzero(m.coefficients[:, 0])
    assert nz.tolist() == [lib.index((0,))]
    assert m.coefficients[nz[0], 0] == pytest.approx(2.0, abs=1e-6)


def test_stlsq_zero_targets():
    y, u, _ = _scalar_data(lambda y, u: 0 * y)
    lib = PolyLibrary(1, 1, 2)
    m = stlsq(build_features(y, u, lib), np.zeros((300, 1)), 1e-6, 0.1, library=lib)
    assert not m.coefficients.any()
    assert m.empty_dims == ()


def test_stlsq_threshold_dominance_warns():
    y, u, yd = _scalar_data(lambda y, u: 0.05 * y + 0.02 * u)
    lib = PolyLibrary(1, 1, 2)
    with pytest.warns(sysid.RankDeficient):
        m = stlsq(build_features(y, u, lib), yd, 1e-6, 0.1, library=lib)
    assert not m.coefficients.any()
    assert m.empty_dims == (0,)


def test_stlsq_rejects_short_data():
    with pytest.raises(sysid.DimensionMismatch):
        stlsq(np.ones((3, 6)), np.ones((3, 1)), 0.0, 0.1, library=PolyLibrary(1, 1, 2))


coef = st.floats(-3, 3).filter(lambda c: c == 0 or abs(c) > 0.3)


@given(st.lists(coef, min_size=6, max_size=6), st.floats(0.05, 0.25), st.integers(0, 1000))
def test_sparsity_contract_and_idempotence(true, T, seed):
    lib = PolyLibrary(1, 1, 2)
    rng = np.random.default_rng(seed)
    theta = build_features(rng.uniform(-1, 1, (80, 1)), rng.uniform(-1, 1, (80, 1)), lib)
    yd = theta @ np.array(true) + 0.01 * rng.normal(size=80)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sysid.RankDeficient)
        m = stlsq(theta, yd, 1e-6, T, library=lib)
        nz = np.abs(m.coefficients[m.coefficients != 0])
        assert np.all(nz >= T)
        sup = m.support()[:, 0]
        again = stlsq(theta * sup, yd, 1e-6, T, library=lib, warn=False)
    assert again.coefficients == pytest.approx(m.coefficients, abs=1e-9)


def test_fit_normalized_threshold_on_scaled_coefficients():
    rng = np.random.default_rng(0)
    y = rng.uniform(-0.5, 0.5, (400, 2))
    u = rng.uniform(-0.05, 0.05, (400, 1))
    yd = np.column_stack([u[:, 0] + 0.3 * y[:, 0] * u[:, 0], 0.01 * y[:, 1]])
    lib = PolyLibrary(2, 1, 2)
    m = sysid.fit_normalized(y, u, yd, lib, lam=1e-8, threshold=0.05)
    scaled = np.abs(m.normalized()[m.coefficients != 0])
    assert np.all(scaled >= 0.05)
    assert m.coefficients[lib.index((2,)), 0] == pytest.approx(1.0, rel=1e-4)
    assert m.coefficients[lib.index((1,)), 1] == pytest.approx(0.01, rel=1e-4)


# ---------------------------------------------------------------- rigid decomposition

def test_pure_rigid_model_decomposes_to_identity():
    lib = PolyLibrary.for_terminals(3)
    d = sysid.decompose_rigid_residual(sysid.rigid_model(lib, held=0), 0)
    assert d.gains == pytest.approx(np.ones(9))
    assert d.residual.n_terms == 0
    assert d.positive


def test_scaled_rigid_plus_quadratic():
    lib = PolyLibrary.for_terminals(2)
    m = sysid.rigid_model(lib, held=0, scale=0.8)
    j = lib.index((3, 3))  # t1_x^2
    m.coefficients[j, 4] += 0.1
    d = sysid.decompose_rigid_residual(m, 0)
    assert d.gains == pytest.approx(np.full(6, 0.8))
    assert np.flatnonzero(d.residual.coefficients).tolist() == [j * 6 + 4]
    assert d.residual.coefficients[j, 4] == pytest.approx(0.1)


def test_zero_model_decomposition():
    lib = PolyLibrary.for_terminals(2)
    d = sysid.decompose_rigid_residual(SparseModel(np.zeros((len(lib), 6)), lib, 0, 0))
    assert not d.gains.any()
    assert d.residual.n_terms == 0
    assert not d.positive


def test_missing_rigid_terms():
    lib = PolyLibrary.for_terminals(2, degree=1)
    with pytest.raises(sysid.MissingRigidTerms):
        sysid.decompose_rigid_residual(SparseModel(np.zeros((len(lib), 6)), lib, 0, 0))


def test_rigid_features_match_rigid_model():
    lib = PolyLibrary.for_terminals(3)
    rng = np.random.default_rng(1)
    y, u = rng.normal(size=(50, 9)), rng.normal(size=(50, 3))
    for h in range(3):
        assert sysid.rigid_model(lib, h).predict(y, u) == pytest.approx(sysid.rigid_features(y, u, h), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 3), st.integers(0, 2))
def test_decomposition_exactness(seed, n_t, held):
    held = min(held, n_t - 1)
    rng = np.random.default_rng(seed)
    lib = PolyLibrary.for_terminals(n_t)
    m = sysid.rigid_model(lib, held, scale=rng.uniform(0.2, 1.5, 3 * n_t))
    mask = rng.random(m.coefficients.shape) < 0.1
    m.coefficients = m.coefficients + mask * rng.normal(size=mask.shape)
    d = sysid.decompose_rigid_residual(m, held)
    y, u = rng.normal(size=(100, 3 * n_t)), rng.normal(size=(100, 3))
    assert d.predict(y, u) == pytest.approx(m.predict(y, u), abs=1e-10)


# ---------------------------------------------------------------- R^2 and rollout

def test_r_squared_examples():
    a = np.random.default_rng(0).normal(size=(40, 3))
    assert sysid.r_squared(a, a) == pytest.approx(np.ones(3))
    assert sysid.r_squared(np.tile(a.mean(axis=0), (40, 1)), a) == pytest.approx(np.zeros(3), abs=1e-12)


def test_r_squared_errors():
    with pytest.raises(sysid.DegenerateVariance):
        sysid.r_squared(np.zeros((5, 1)), np.ones((5, 1)))
    with pytest.raises(sysid.DegenerateVariance):
        sysid.r_squared(np.zeros((1, 1)), np.ones((1, 1)))
    with pytest.raises(sysid.DimensionMismatch):
        sysid.r_squared(np.zeros((5, 1)), np.ones((5, 2)))


def test_simulate_zero_model():
    lib = PolyLibrary(2, 1)
    out = sysid.simulate_model(SparseModel(np.zeros((len(lib), 2)), lib, 0, 0), [1.0, 2.0], np.ones((10, 1)), 0.1)
    assert out.shape == (11, 2)
    assert np.all(out == [1.0, 2.0])


def test_simulate_integrator_ramp():
    lib = PolyLibrary(1, 1, 1)
    xi = np.zeros((3, 1))
    xi[2, 0] = 1.0
    out = sysid.simulate_model(SparseModel(xi, lib, 0, 0), [0.0], np.full((30, 1), 0.5), 1 / 30)
    assert out[:, 0] == pytest.approx(0.5 * np.arange(31) / 30)


def test_rigid_model_tracks_stiff_simulation(topo):
    stiff = topo.scaled(stiffness=1000, friction=1000)
    s = held_state(stiff)
    u = np.array([0.03, 0.02, -0.2])
    n = 5 * 240
    _, _, ys, _ = sim._rollout(s, stiff, u, 1 / 240, n + 1)
    truth = ys[::8]
    model = sysid.rigid_model(PolyLibrary.for_terminals(3), 0)
    pred = sysid.simulate_model(model, truth[0].reshape(-1), np.tile(u, (len(truth) - 1, 1)), 1 / 30).reshape(-1, 3, 3)
    path = np.hypot(*np.diff(truth[:, 1:, :2], axis=0).T).sum(axis=-1)
    end = np.hypot(*(pred[-1, 1:, :2] - truth[-1, 1:, :2]).T)
    assert np.all(end < 0.01 * path)


def test_fit_sindy_on_rigid_plant():
    ds = rigid_dataset([[0.3, 0.3, 0.0], [0.6, 0.4, 0.5], [0.4, 0.7, 2.0]], n_traj=40, n_samples=120)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sysid.RankDeficient)
        model, report = sysid.fit_sindy(ds)
    d = sysid.decompose_rigid_residual(model, 0)
    assert d.gains == pytest.approx(np.ones(9), abs=2e-3)
    rigid_support = sysid.rigid_model(model.library, 0).support()
    assert not np.any(d.residual.support() & ~rigid_support)
    y, u, yd = sysid._stack(ds.trajectories)
    assert np.sqrt(np.mean(d.residual.predict(y, u) ** 2)) < 1e-3 * np.sqrt(np.mean(yd ** 2))
    assert sysid.rigid_r_squared(ds)["translational"] == pytest.approx(1.0, abs=1e-12)


def test_model_file_round_trip(tmp_path):
    lib = PolyLibrary.for_terminals(2)
    m = sysid.rigid_model(lib, 1, scale=np.linspace(0.5, 1.0, 6))
    m.coefficients[lib.index((0, 5)), 2] = -0.123456789
    sysid.save_model(m, tmp_path / "m.tsv")
    back = sysid.load_model(tmp_path / "m.tsv")
    assert np.array_equal(back.coefficients, m.coefficients)
    assert back.library == lib
