import numpy as np
import pytest
from scipy.stats import chisquare

from bsdelab import (
    DomainSpec,
    InitialLaw,
    InputError,
    SimulationConfig,
    contains,
    field_from_name,
    functional_integral,
    quadratic_variation_report,
    simulate,
)
from bsdelab.engine import DRIFT_ZERO_OVERRIDE, sample_initial
from bsdelab.seeding import derive_rng


def make_config(**kw):
    defaults = dict(
        domain=DomainSpec.box([[0.0, 1.0]]),
        field=field_from_name("identity", 1),
        initial_law=InitialLaw.point_mass([0.5]),
        horizon=0.1,
        dt=0.01,
        n_paths=4000,
        seed=77,
    )
    defaults.update(kw)
    return SimulationConfig(**defaults)


def test_initial_law_validation():
    box = DomainSpec.box([[0.0, 1.0]])
    with pytest.raises(InputError):
        InitialLaw.point_mass([1.5]).validate(box)
    with pytest.raises(InputError):
        InitialLaw.product_tables([([0.0, 1.0], [1.0, 2.0])])  # mass 1.5
    with pytest.raises(InputError):
        InitialLaw.product_tables([([0.0, 1.0], [-1.0, 3.0])])


def test_product_table_sampling_matches_density():
    # triangular density p(x) = 2x on [0, 1]: mean 2/3, mean square 1/2
    box = DomainSpec.box([[0.0, 1.0]])
    law = InitialLaw.product_tables([([0.0, 1.0], [0.0, 2.0])])
    rng = derive_rng(5, "check")
    x = sample_initial(law, box, rng, 50_000)[:, 0]
    assert abs(x.mean() - 2.0 / 3.0) < 3 * x.std() / np.sqrt(len(x))
    assert abs((x**2).mean() - 0.5) < 0.01


def test_config_validation():
    with pytest.raises(InputError):
        make_config(dt=0.2)
    with pytest.raises(InputError):
        make_config(n_paths=0)
    with pytest.raises(InputError):
        make_config(drift_mode="bogus")


def test_reflecting_mean_stays_centered():
    bundle = simulate(make_config())
    x_t = bundle.states[:, -1, 0]
    assert abs(x_t.mean() - 0.5) < 3 * x_t.std() / np.sqrt(len(x_t))


def test_all_states_inside_closure():
    bundle = simulate(make_config(horizon=0.5, dt=0.005, n_paths=2000))
    flat = bundle.states.reshape(-1, 1)
    assert np.all(contains(bundle.config.domain, flat))


def test_uniform_law_is_invariant():
    config = make_config(
        initial_law=InitialLaw.uniform(), horizon=0.5, dt=5e-3, n_paths=100_000, seed=314
    )
    bundle = simulate(config, threads=2)
    counts, _ = np.histogram(bundle.states[:, -1, 0], bins=20, range=(0.0, 1.0))
    stat, pvalue = chisquare(counts)
    assert pvalue > 0.01, f"chi-square p={pvalue}"


def test_decomposition_identity_exact():
    config = make_config(
        field=field_from_name("smooth-aniso", 1),
        initial_law=InitialLaw.uniform(),
        horizon=0.2,
        dt=0.01,
        n_paths=1000,
        seed=5,
    )
    bundle = simulate(config)
    dx = np.diff(bundle.states, axis=1)
    correction = dx - bundle.mart_increments - bundle.fv_increments
    flagged = bundle.reflection_flags
    assert np.all(correction[~flagged] == 0.0)
    assert np.any(flagged), "expected some reflections at this horizon"
    assert np.all(np.any(correction[flagged] != 0.0, axis=-1))


def test_bitwise_determinism_and_thread_independence():
    config = make_config(n_paths=40_000)
    a = simulate(config, threads=1)
    b = simulate(config, threads=3)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.mart_increments, b.mart_increments)
    assert np.array_equal(a.fv_increments, b.fv_increments)
    c = simulate(config, threads=1)
    assert np.array_equal(a.states, c.states)


def test_streams_are_independent():
    config = make_config()
    a = simulate(config, stream="paths")
    b = simulate(config, stream="lhs")
    assert not np.array_equal(a.states, b.states)


def test_zero_override_mode():
    config = make_config(
        field=field_from_name("smooth-aniso", 1),
        drift_mode=DRIFT_ZERO_OVERRIDE,
        initial_law=InitialLaw.uniform(),
    )
    bundle = simulate(config)
    assert not np.any(bundle.fv_increments)
    assert bundle.config.drift_mode == DRIFT_ZERO_OVERRIDE


def test_qv_identity_1d():
    config = make_config(initial_law=InitialLaw.uniform(), horizon=1.0, dt=1e-3,
                         n_paths=2000, seed=21)
    bundle = simulate(config, threads=2)
    realized = np.sum(bundle.mart_increments[:, :, 0] ** 2, axis=1)
    assert abs(realized.mean() - 1.0) < 3 * np.sqrt(2 * 1e-3)
    report = quadratic_variation_report(bundle)
    assert not report.pair(0, 0).flagged


def test_qv_off_diagonal_ratio():
    config = SimulationConfig(
        domain=DomainSpec.box([[0.0, 1.0], [0.0, 1.0]]),
        field=field_from_name("identity", 2),
        initial_law=InitialLaw.uniform(),
        horizon=2.0,
        dt=1e-3,
        n_paths=10_000,
        seed=22,
    )
    bundle = simulate(config, threads=2)
    report = quadratic_variation_report(bundle)
    assert report.pair(0, 1).ratio < 0.02
    assert not report.pair(0, 1).flagged


def test_qv_scaling_diag4():
    config = make_config(field=field_from_name("diag:4", 1),
                         initial_law=InitialLaw.uniform(),
                         horizon=1.0, dt=1e-3, n_paths=10_000, seed=23)
    bundle = simulate(config, threads=2)
    realized = np.sum(bundle.mart_increments[:, :, 0] ** 2, axis=1)
    assert abs(realized.mean() - 4.0) / 4.0 < 0.02


def test_functional_integral_constants():
    bundle = simulate(make_config())
    c = 3.0
    plain = functional_integral(bundle, lambda x: np.full(len(x), c), alpha=0.0)
    assert np.array_equal(plain, np.full(bundle.n_paths, c * 0.1))
    alpha = 2.0
    disc = functional_integral(bundle, lambda x: np.full(len(x), c), alpha=alpha)
    expected = c * (1 - np.exp(-alpha * 0.1)) / alpha
    assert np.allclose(disc, expected, rtol=1e-12)


def test_functional_integral_stationary_mean(uniform_bundle):
    vals = functional_integral(uniform_bundle, lambda x: x[:, 0], alpha=0.0)
    t_end = uniform_bundle.times[-1]
    # stationarity oracle: the same mean is the time-0 state mean times T
    brute = t_end * uniform_bundle.states[:, 0, 0]
    diff = vals.mean() - brute.mean()
    se = np.sqrt(vals.var() + brute.var()) / np.sqrt(uniform_bundle.n_paths)
    assert abs(diff) < 3 * se
    assert abs(vals.mean() - t_end / 2) < 3 * vals.std() / np.sqrt(len(vals))


def test_martingale_increment_null_regression(uniform_bundle):
    # pooled regression of dM on bounded state functions: slopes ~ 0
    n, K, _ = uniform_bundle.mart_increments.shape
    assert n * K >= 1e6
    states = uniform_bundle.states[:, :-1, 0].ravel()
    dm = uniform_bundle.mart_increments[:, :, 0].ravel()
    design = np.column_stack([np.ones_like(states), states, np.cos(np.pi * states)])
    coef, _, _, _ = np.linalg.lstsq(design, dm, rcond=None)
    resid = dm - design @ coef
    sigma2 = resid @ resid / (len(dm) - 3)
    cov = sigma2 * np.linalg.inv(design.T @ design)
    tstats = coef / np.sqrt(np.diag(cov))
    assert np.max(np.abs(tstats)) < 4.0


def test_final_partial_step():
    config = make_config(horizon=0.105, dt=0.01)
    bundle = simulate(config)
    assert bundle.times[-1] == pytest.approx(0.105)
    assert len(bundle.times) == 12  # 11 steps, last one shorter
    assert bundle.times[-1] - bundle.times[-2] == pytest.approx(0.005)
    total = functional_integral(bundle, lambda x: np.ones(len(x)), alpha=0.0)
    assert np.allclose(total, 0.105, rtol=1e-12)
