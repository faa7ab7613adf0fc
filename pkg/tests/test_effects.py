import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_feasible_free
from zibmed.effects import (
    bootstrap_ci,
    compute_effects,
    delta_method_ci,
    effect_gradient,
    mean_abundance,
    wald_p,
)
from zibmed.em import EmOptions, FitResult, em_fit
from zibmed.model import Dataset, EffectContrast, MixtureConfig, ParameterVector, table1_truth
from zibmed.simulate import SettingISpec, generate_setting1


def _mp_mean_abundance(p, x):
    ex = lambda t: 1 / (1 + mpmath.exp(-mpmath.mpf(t)))
    delta = ex(p.gamma[0] + p.gamma[1] * x)
    mus = [ex(a0 + a1 * x) for a0, a1 in zip(p.alpha0, p.alpha1)]
    return (1 - delta) * sum(mpmath.mpf(w) * mu for w, mu in zip(p.weights, mus))


@pytest.mark.parametrize("x, hand", [(0.0, 0.11374), (1.0, 0.08836)])
def test_mean_abundance_three_components(truth3, x, hand):
    got = mean_abundance(truth3, MixtureConfig(2), x)
    assert got == pytest.approx(float(_mp_mean_abundance(truth3, x)), abs=1e-14)
    # the hand-evaluated figures carry five-digit rounding of the expit values
    assert got == pytest.approx(hand, abs=3e-5)


@pytest.mark.parametrize("K, nie1, nie2, nie", [(3, -0.28, 0.57, 0.29), (2, -0.18, 0.57, 0.39)])
def test_table1_true_effects(K, nie1, nie2, nie):
    e = compute_effects(table1_truth(K), MixtureConfig(K - 1))
    assert e.nie1 == pytest.approx(nie1, abs=0.005)
    assert e.nie2 == pytest.approx(nie2, abs=0.005)
    assert e.nie == pytest.approx(nie, abs=0.005)


def test_effect_formulas_by_hand(truth3):
    cfg = MixtureConfig(2)
    b = truth3.beta
    x1, x2 = 0.3, 1.7
    e = compute_effects(truth3, cfg, EffectContrast(x1, x2))
    m1 = float(_mp_mean_abundance(truth3, x1))
    m2 = float(_mp_mean_abundance(truth3, x2))
    d1, d2 = float(truth3.delta_prob(x1)), float(truth3.delta_prob(x2))
    assert e.nie1 == pytest.approx((b[1] + b[5] * x2) * (m2 - m1), abs=1e-12)
    assert e.nie2 == pytest.approx((b[2] + b[4] * x2) * (d1 - d2), abs=1e-12)
    assert e.nde == pytest.approx((x2 - x1) * (b[3] + b[4] * (1 - d1) + b[5] * m1), abs=1e-12)


def test_no_exposure_path_gives_zero_indirect_effects(truth3):
    p = truth3.replace(gamma=np.array([-1.0, 0.0]), alpha1=np.zeros(3))
    cfg = MixtureConfig(2)
    e = compute_effects(p, cfg)
    assert e.nie1 == 0 and e.nie2 == 0 and e.nie == 0
    assert mean_abundance(p, cfg, 0.0) == mean_abundance(p, cfg, 3.0)


@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_effect_identities(seed, x1, x2):
    if abs(x1 - x2) < 1e-3:
        return
    cfg = MixtureConfig(2)
    p = ParameterVector.from_free(random_feasible_free(np.random.default_rng(seed), cfg), cfg)
    e = compute_effects(p, cfg, EffectContrast(x1, x2))
    assert e.nie == e.nie1 + e.nie2
    for x in (x1, x2):
        assert 0 < mean_abundance(p, cfg, x) < 1

    q = p.replace(beta=np.array([*p.beta[:4], 0.0, 0.0]))
    fwd = compute_effects(q, cfg, EffectContrast(x1, x2))
    rev = compute_effects(q, cfg, EffectContrast(x2, x1))
    assert rev.nde == pytest.approx(-fwd.nde, rel=1e-12, abs=1e-12)
    assert rev.nie == pytest.approx(-fwd.nie, rel=1e-12, abs=1e-12)


def test_wald_p():
    assert wald_p(1.96, 1.0) == pytest.approx(0.05, abs=1e-4)
    assert wald_p(0.0, 0.0) == 1.0
    assert wald_p(1.0, 0.0) == 0.0
    assert wald_p(1.0, None) is None
    assert wald_p(1.0, float("nan")) is None


def _fake_fit(p, cfg, cov):
    return FitResult(params_hat=p, loglik=0.0, config=cfg, free_hat=p.to_free(cfg),
                     n_iterations=1, converged=True, stop_reason="distance", trajectory=[],
                     cov_free=cov)


def test_delta_se_invariant_to_component_labels(truth3):
    cfg = MixtureConfig(2)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(cfg.n_free, cfg.n_free))
    cov = A @ A.T / cfg.n_free + 0.1 * np.eye(cfg.n_free)
    s = cfg.slices()
    perm = np.arange(cfg.n_free)
    for key in ("alpha0", "alpha1", "psi"):
        idx = perm[s[key]]
        perm[s[key].start], perm[s[key].start + 1] = idx[1], idx[0]
    swapped = truth3.replace(alpha0=truth3.alpha0[[1, 0, 2]], alpha1=truth3.alpha1[[1, 0, 2]],
                             psi=truth3.psi[[1, 0]])
    np.testing.assert_allclose(swapped.to_free(cfg), truth3.to_free(cfg)[perm], atol=1e-14)
    a = delta_method_ci(_fake_fit(truth3, cfg, cov))
    b = delta_method_ci(_fake_fit(swapped, cfg, cov[np.ix_(perm, perm)]))
    for name in ("nie1", "nie2", "nie", "nde"):
        assert getattr(b, name).std_error == pytest.approx(getattr(a, name).std_error, rel=1e-8)


def test_effect_gradient_nie2_only_depends_on_gamma_and_outcome(truth3):
    cfg = MixtureConfig(2)
    J = effect_gradient(truth3.to_free(cfg), cfg, EffectContrast())
    s = cfg.slices()
    for key in ("alpha0", "alpha1", "psi", "phi", "delta"):
        assert np.all(J[1, s[key]] == 0)
    np.testing.assert_allclose(J[2], J[0] + J[1], atol=1e-10)


def test_ci_contains_estimate_and_matches_level(truth3):
    cfg = MixtureConfig(2)
    cov = np.eye(cfg.n_free) * 0.01
    e90 = delta_method_ci(_fake_fit(truth3, cfg, cov), level=0.90)
    e95 = delta_method_ci(_fake_fit(truth3, cfg, cov), level=0.95)
    for name in ("nie1", "nie2", "nie", "nde"):
        a, b = getattr(e90, name), getattr(e95, name)
        assert a.ci[0] <= a.estimate <= a.ci[1]
        assert b.ci[1] - b.ci[0] > a.ci[1] - a.ci[0]
        assert (b.ci[1] - b.ci[0]) / (2 * b.std_error) == pytest.approx(1.959964, abs=1e-6)


def test_undefined_information_gives_no_intervals(truth3):
    cfg = MixtureConfig(2)
    e = delta_method_ci(_fake_fit(truth3, cfg, None))
    assert e.nie.std_error is None and e.nie.ci is None and e.nie.p_value is None
    assert "undefined" in e.diagnostics["status"]


def test_null_direction_hides_only_affected_effects(truth3):
    cfg = MixtureConfig(2)
    fit = _fake_fit(truth3, cfg, np.eye(cfg.n_free) * 0.01)
    s = cfg.slices()
    basis = np.zeros((cfg.n_free, 1))
    basis[s["beta"].start + 2] = 1.0           # beta2 unidentified
    fit.null_basis = basis
    e = delta_method_ci(fit)
    assert e.nie2.std_error is None and e.nie.std_error is None
    assert e.nie1.std_error is not None and e.nie1.p_value is not None


def test_zero_free_mediator():
    rng = np.random.default_rng(5)
    n = 150
    x = rng.integers(0, 2, n).astype(float)
    m = rng.beta(2 + x, 8.0, n)
    y = 1.0 + 4.0 * m + 0.5 * x + rng.normal(0, 0.5, n)
    fit = em_fit(Dataset(y, m, x, np.full(n, 10 ** 6)), MixtureConfig(0),
                 EmOptions(n_restarts=1))
    e = delta_method_ci(fit)
    assert not e.nie2_defined
    assert e.nie2.estimate == 0.0 and e.nie2.std_error == 0.0 and e.nie2.p_value is None
    assert e.nie2.ci == (0.0, 0.0)
    assert e.nie.estimate == e.nie1.estimate
    assert e.nie1.std_error > 0


@pytest.fixture(scope="module")
def data300():
    return generate_setting1(SettingISpec.table1(2, n=300, seed=3)).dataset


def test_bootstrap_agrees_with_delta_method(data300):
    opts = EmOptions(n_restarts=2)
    fit = em_fit(data300, MixtureConfig(1), opts)
    delta = delta_method_ci(fit)
    boot = bootstrap_ci(data300, MixtureConfig(1), opts, n_boot=200, fit=fit)
    assert boot.diagnostics["status"] == "ok"
    assert boot.nie.std_error == pytest.approx(delta.nie.std_error, rel=0.25)
    lo, hi = boot.nie.ci
    assert lo <= boot.nie.estimate <= hi


def test_bootstrap_null_mediator_covers_zero():
    rng = np.random.default_rng(9)
    n = 150
    x = rng.integers(0, 2, n).astype(float)
    m = np.where(rng.random(n) < 0.2, 0.0, rng.beta(2.0, 8.0, n))
    y = 1.0 + 3.0 * m + x + rng.normal(0, 0.5, n)
    data = Dataset(y, m, x, np.full(n, 10 ** 6))
    a = bootstrap_ci(data, MixtureConfig(0), EmOptions(n_restarts=1, seed=4), n_boot=100)
    b = bootstrap_ci(data, MixtureConfig(0), EmOptions(n_restarts=1, seed=4), n_boot=100)
    lo, hi = a.nie1.ci
    assert lo <= 0 <= hi
    assert a.as_dict() == b.as_dict()


def test_bootstrap_needs_enough_replicates(data300):
    with pytest.raises(ValueError):
        bootstrap_ci(data300, MixtureConfig(1), n_boot=50)
