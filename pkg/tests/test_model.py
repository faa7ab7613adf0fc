import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
import mpmath

from zibmed.model import (
    Dataset,
    EffectContrast,
    MixtureConfig,
    ModelError,
    ParameterVector,
    SubjectRecord,
    beta_log_pdf,
    expit,
    lod_observed,
    table1_truth,
    zibm_density,
)

from conftest import random_feasible_free


def test_expit_values():
    assert expit(0.0) == 0.5
    assert expit(-1.5) == pytest.approx(0.182426, abs=5e-7)
    with np.errstate(over="raise"):
        assert expit(800.0) == 1.0
        assert expit(-800.0) == 0.0


def test_expit_symmetry_and_monotone():
    t = np.linspace(-40, 40, 2001)
    e = expit(t)
    assert np.all(np.diff(e) >= 0)
    assert np.all(np.diff(e[(t > -30) & (t < 30)]) > 0)
    np.testing.assert_allclose(e + expit(-t), 1.0, atol=1e-15)


def test_beta_log_pdf_closed_forms():
    assert beta_log_pdf(0.5, 0.5, 2.0) == pytest.approx(0.0, abs=1e-14)
    assert beta_log_pdf(0.5, 0.5, 4.0) == pytest.approx(math.log(1.5), abs=1e-14)
    v = beta_log_pdf(1e-300, 0.5, 4.0)
    assert np.isfinite(v) and v < -600


def test_beta_log_pdf_rejects_boundary():
    with pytest.raises(ModelError):
        beta_log_pdf(0.0, 0.5, 2.0)
    with pytest.raises(ModelError):
        beta_log_pdf(1.0, 0.5, 2.0)


def beta_mass(mu, phi):
    """Integral of exp(beta_log_pdf) over (0, 1) by tanh-sinh quadrature.

    Each half is integrated after m = c * t^(1/a) (a the shape at the near
    end), which removes the end-point pole; the upper half is folded onto
    the lower one through m -> 1 - m.
    """
    def half(mu_):
        a = mu_ * phi

        def f(t):
            m = 0.5 * float(t) ** (1.0 / a)
            if m < 1e-300:
                return 0.0
            # dm = (0.5 / a) t^(1/a - 1) dt, and t^(1/a - 1) = (m / 0.5)^(1 - a)
            return math.exp(beta_log_pdf(m, mu_, phi) + (1 - a) * math.log(m / 0.5)) * 0.5 / a
        return float(mpmath.quad(f, [0, 0.5, 1]))
    return half(mu) + half(1.0 - mu)


@pytest.mark.parametrize("mu", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("phi", [2.0, 10.0, 50.0])
def test_beta_density_integrates_to_one(mu, phi):
    assert beta_mass(mu, phi) == pytest.approx(1.0, abs=1e-8)


def test_zibm_density_point_mass():
    p = table1_truth(2).replace(gamma=(0.0, 0.0))
    assert zibm_density(0.0, p, MixtureConfig(1), 3.7) == 0.5


def test_zibm_density_single_component():
    p = ParameterVector(beta=np.zeros(6), delta_sd=1.0, gamma=(-1.0, 0.5), phi=7.0,
                        alpha0=(-0.3,), alpha1=(0.2,), psi=())
    cfg = MixtureConfig(0)
    x, m = 1.0, 0.3
    mu = expit(-0.3 + 0.2)
    want = (1 - expit(-0.5)) * math.exp(beta_log_pdf(m, mu, 7.0))
    assert zibm_density(m, p, cfg, x) == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("x", [0.0, 1.0])
def test_zibm_total_mass(truth3, x):
    cfg = MixtureConfig(2)
    mass = zibm_density(0.0, truth3, cfg, x)
    delta = mass
    for w, mk in zip(truth3.weights, truth3.component_means(x)):
        mass += (1 - delta) * w * beta_mass(float(mk), truth3.phi)
    assert mass == pytest.approx(1.0, abs=1e-8)
    # the mixed density is the weighted sum of the component densities
    m = 0.05
    want = (1 - delta) * sum(w * math.exp(beta_log_pdf(m, mk, truth3.phi))
                             for w, mk in zip(truth3.weights, truth3.component_means(x)))
    assert zibm_density(m, truth3, cfg, x) == pytest.approx(want, rel=1e-13)


def test_lod_observed():
    assert lod_observed(0.001, 500) == 0.0
    assert lod_observed(0.001, 2000) == 0.001
    assert lod_observed(0.0, 12345) == 0.0


@given(st.floats(0, 0.999999), st.integers(1, 10**6))
def test_lod_idempotent(m, L):
    once = lod_observed(m, L)
    assert lod_observed(once, L) == once


def test_subject_record_validation():
    SubjectRecord(1.0, 0.0, 0.0, 10)
    with pytest.raises(ModelError):
        SubjectRecord(1.0, 1.0, 0.0, 10)
    with pytest.raises(ModelError):
        SubjectRecord(1.0, -0.1, 0.0, 10)
    with pytest.raises(ModelError):
        SubjectRecord(1.0, 0.1, 0.0, 2.5)
    with pytest.raises(ModelError):
        SubjectRecord(1.0, 0.1, 0.0, 0)


def test_dataset_roundtrip_and_readonly():
    d = Dataset([1.0, 2.0, 3.0], [0.0, 0.2, 0.5], [0, 1, 1], [10, 20, 30])
    assert d.n == 3
    assert list(d.r) == [False, True, True]
    assert Dataset.from_records(d.records) == d
    with pytest.raises(ValueError):
        d.m[0] = 0.3
    with pytest.raises(ModelError):
        Dataset([1.0], [1.0], [0.0], [10])
    with pytest.raises(ModelError):
        Dataset([1.0, 2.0], [0.1], [0.0], [10])


def test_config_layout():
    cfg = MixtureConfig(2)
    names = cfg.param_names()
    assert len(names) == cfg.n_free == 6 + 1 + 2 + 1 + 3 + 3 + 2
    assert names[-1] == "psi_2"
    assert MixtureConfig(0, zero_inflated=False).n_free == 6 + 1 + 1 + 2
    with pytest.raises(ModelError):
        MixtureConfig(-1)


@pytest.mark.parametrize("K", [0, 1, 2, 3])
def test_free_roundtrip(K):
    cfg = MixtureConfig(K)
    rng = np.random.default_rng(K)
    for _ in range(20):
        v = random_feasible_free(rng, cfg)
        back = ParameterVector.from_free(v, cfg).to_free(cfg)
        np.testing.assert_allclose(back, v, atol=1e-12, rtol=0)


@pytest.mark.parametrize("zi", [True, False])
def test_jacobian_matches_finite_differences(zi):
    cfg = MixtureConfig(2, zero_inflated=zi)
    rng = np.random.default_rng(3)
    v = random_feasible_free(rng, MixtureConfig(2))
    if not zi:
        v = np.delete(v, [7, 8])
    p = ParameterVector.from_free(v, cfg)
    J = p.free_to_natural_jacobian(cfg)
    h = 1e-6
    for j in range(v.size):
        e = np.zeros(v.size)
        e[j] = h
        fd = (ParameterVector.from_free(v + e, cfg).natural_vector(cfg)
              - ParameterVector.from_free(v - e, cfg).natural_vector(cfg)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-8)


def test_canonical_orders_components_and_keeps_weights(truth3):
    shuffled = truth3.replace(alpha0=truth3.alpha0[[2, 0, 1]], alpha1=truth3.alpha1[[2, 0, 1]],
                              psi=truth3.weights[[2, 0, 1]][:-1])
    c = shuffled.canonical()
    np.testing.assert_allclose(c.alpha0, truth3.alpha0)
    np.testing.assert_allclose(c.weights, truth3.weights)


def test_parameter_validation():
    with pytest.raises(ModelError):
        table1_truth(3).replace(psi=(0.6, 0.5))
    with pytest.raises(ModelError):
        table1_truth(3).replace(phi=-1.0)
    with pytest.raises(ModelError):
        table1_truth(3).to_free(MixtureConfig(1))


def test_parameter_dict_roundtrip(truth3):
    assert ParameterVector.from_dict(truth3.as_dict()) == truth3


def test_contrast_levels_differ():
    with pytest.raises(ModelError):
        EffectContrast(1.0, 1.0)
