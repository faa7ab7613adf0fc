"""Synthetic data for the two simulation settings.

Setting I draws a single mediator from the ZIBM model and applies the
limit-of-detection rule.  Setting II draws a whole composition per subject
from a Dirichlet distribution (after drawing true zeros), then sequencing
counts from a multinomial with the subject's library size.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit as _expit

from zibmed.effects import EffectPoint, compute_effects, mean_abundance
from zibmed.model import (
    Dataset,
    EffectContrast,
    MixtureConfig,
    ModelError,
    ParameterVector,
    table1_truth,
)

log = logging.getLogger(__name__)

LIB_RANGE = (31607, 911652)


def sample_library_sizes(n: int, range_lo: int = LIB_RANGE[0], range_hi: int = LIB_RANGE[1],
                         seed=None) -> np.ndarray:
    """Log-uniform integer library sizes on ``[range_lo, range_hi]``."""
    if not 1 <= range_lo <= range_hi:
        raise ValueError("need 1 <= range_lo <= range_hi")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if range_lo == range_hi:
        return np.full(n, range_lo, dtype=np.int64)
    draws = np.exp(rng.uniform(np.log(range_lo), np.log(range_hi + 1.0), n))
    return np.clip(np.floor(draws), range_lo, range_hi).astype(np.int64)


def _draw_library_sizes(rng, n, library_sizes):
    if library_sizes is None:
        return sample_library_sizes(n, seed=rng)
    pool = np.asarray(library_sizes, dtype=np.int64)
    if pool.size == 0 or np.any(pool < 1):
        raise ModelError("library size pool must be non-empty positive integers")
    return rng.choice(pool, n)


def _positive_open_unit(m):
    tiny = np.finfo(float).tiny
    return np.clip(m, tiny, np.nextafter(1.0, 0.0))


# --------------------------------------------------------------------------
# Setting I
# --------------------------------------------------------------------------

@dataclass
class SettingISpec:
    n: int
    config: MixtureConfig
    truth: ParameterVector
    library_sizes: list[int] | None = None
    seed: int = 0

    @classmethod
    def table1(cls, n_components: int = 3, n: int | None = None, seed: int = 0) -> "SettingISpec":
        if n is None:
            n = 300 if n_components == 3 else 200
        return cls(n=n, config=MixtureConfig(n_components - 1), truth=table1_truth(n_components),
                   seed=seed)


@dataclass
class SimulatedDataset:
    dataset: Dataset | None
    truth_effects: dict
    true_zero_mask: np.ndarray
    false_zero_mask: np.ndarray
    latent: np.ndarray
    taxa: "object | None" = None
    meta: dict = field(default_factory=dict)

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.true_zero_mask | self.false_zero_mask))

    @property
    def false_zero_share(self) -> float:
        zeros = np.sum(self.true_zero_mask | self.false_zero_mask)
        return float(np.sum(self.false_zero_mask) / zeros) if zeros else float("nan")


def generate_setting1(spec: SettingISpec) -> SimulatedDataset:
    rng = np.random.default_rng(spec.seed)
    truth, config, n = spec.truth, spec.config, spec.n
    x = rng.binomial(1, 0.5, n).astype(float)
    delta = truth.delta_prob(x) if config.zero_inflated else np.zeros(n)
    true_zero = rng.random(n) < delta
    comp = rng.choice(config.K + 1, size=n, p=truth.weights)
    mu = _expit(truth.alpha0[comp] + truth.alpha1[comp] * x)
    m = _positive_open_unit(rng.beta(mu * truth.phi, (1.0 - mu) * truth.phi))
    m = np.where(true_zero, 0.0, m)
    lib = _draw_library_sizes(rng, n, spec.library_sizes)
    observed = np.where(m * lib < 1.0, 0.0, m)
    false_zero = (~true_zero) & (observed == 0)
    b = truth.beta
    r = (m > 0).astype(float)
    y = (b[0] + b[1] * m + b[2] * r + b[3] * x + b[4] * x * r + b[5] * x * m
         + truth.delta_sd * rng.standard_normal(n))
    eff = compute_effects(truth, config, EffectContrast(0.0, 1.0))
    return SimulatedDataset(
        dataset=Dataset(y, observed, x, lib),
        truth_effects=_effects_dict(eff),
        true_zero_mask=true_zero,
        false_zero_mask=false_zero,
        latent=m,
        meta={"setting": 1, "seed": spec.seed, "truth": truth.as_dict(), "K": config.K,
              "zero_inflated": config.zero_inflated},
    )


def _effects_dict(eff: EffectPoint) -> dict:
    return {"nie1": eff.nie1, "nie2": eff.nie2, "nie": eff.nie, "nde": eff.nde}


def replicate_seed(master_seed: int, index: int) -> int:
    """Independent per-replicate seed derived from (master seed, replicate index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Setting II
# --------------------------------------------------------------------------

@dataclass
class SettingIISpec:
    n: int = 200
    n_taxa: int = 10
    mixture_weights: tuple[float, float] = (0.3, 0.7)
    outcome_beta: tuple[float, ...] = (4.0, 100.0, 2.0, 1.0, 1.0, 1.0)
    # exposure-dependent zero model, one (gamma0, gamma1) pair for every
    # Step-1 mixture component (None: both components use ``zero_gamma``)
    zero_gamma: tuple[float, float] = (0.0, -3.0)
    component_gammas: tuple[tuple[float, float], ...] | None = None
    # taxon (1 or 2) carrying that zero model; 1 follows the outcome-model
    # description, 2 follows the step-by-step recipe (taxon 1 then has no zeros)
    zero_model_taxon: int = 1
    # zero model of the other member of the taxon 1-2 pair: "none" (never a
    # true zero) or "background" (like taxa 3.., gamma1 = 0)
    partner_zero: str = "none"
    alpha_link: tuple[float, float] = (-2.0, 5.0)
    phi: float = 10.0
    library_sizes: list[int] | None = None
    seed: int = 0
    other_gamma0_range: tuple[float, float] = (1.0, 2.0)
    other_zero_target: float | None = None
    # alpha0 of taxon 1 is tuned so that this taxon's zeros are this share false
    calibration_taxon: int = 1
    false_zero_target: float = 0.40
    false_zero_tolerance: float = 0.01
    pilot_n: int = 2000
    alpha01: float | None = None

    def __post_init__(self):
        if self.n_taxa < 3:
            raise ModelError("Setting II needs at least three taxa")
        w = np.asarray(self.mixture_weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ModelError("mixture weights must be positive and sum to 1")
        if len(self.outcome_beta) != 6:
            raise ModelError("outcome_beta needs six coefficients")
        if self.zero_model_taxon not in (1, 2) or self.calibration_taxon not in (1, 2):
            raise ModelError("zero_model_taxon and calibration_taxon must be 1 or 2")
        if self.partner_zero not in ("none", "background"):
            raise ModelError("partner_zero must be 'none' or 'background'")
        if not 0 < self.false_zero_target < 1:
            raise ModelError("false_zero_target must lie in (0, 1)")

    def gammas(self) -> np.ndarray:
        if self.component_gammas is None:
            return np.array([self.zero_gamma] * len(self.mixture_weights), dtype=float)
        g = np.asarray(self.component_gammas, dtype=float)
        if g.shape != (len(self.mixture_weights), 2):
            raise ModelError("component_gammas needs one (gamma0, gamma1) pair per component")
        return g


@dataclass
class TaxaDraw:
    """Latent and observed quantities of one Setting II draw."""

    x: np.ndarray
    component: np.ndarray
    true_zero: np.ndarray
    latent: np.ndarray
    counts: np.ndarray
    lib: np.ndarray
    dirichlet_means: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        # a taxon holding every read would sit on the boundary; keep it inside (0, 1)
        return np.minimum(self.counts, self.lib[:, None] - 0.5) / self.lib[:, None]

    @property
    def false_zero(self) -> np.ndarray:
        return (~self.true_zero) & (self.counts == 0)


def _dirichlet_means(present, x, spec, alpha01, alpha0_taxa):
    """Step 3 mean allocation.

    Taxa 1 and 2 share the first block ``exp(a01)/sum exp(a0)``, split by
    ``expit(alpha_link . (1, x))`` when both are present; a lone present
    member takes the whole block.  The remaining taxa share the rest in
    proportion to ``exp(a0)``.  Empty blocks hand their mass to the other.
    """
    n, Q1 = present.shape
    a_all = np.concatenate([[alpha01], alpha0_taxa])
    share1 = np.exp(alpha01 - np.logaddexp.reduce(a_all))
    p2 = _expit(spec.alpha_link[0] + spec.alpha_link[1] * x)
    has1, has2 = present[:, 0], present[:, 1]
    split2 = np.where(has1 & has2, p2, np.where(has2, 1.0, 0.0))
    split1 = np.where(has1, 1.0 - split2, 0.0)
    rest = np.where(present[:, 2:], np.exp(alpha0_taxa[1:])[None, :], 0.0)
    rest_sum = rest.sum(axis=1, keepdims=True)
    frac = np.divide(rest, rest_sum, out=np.zeros_like(rest), where=rest_sum > 0)
    head = (has1 | has2).astype(float)
    tail = (rest_sum[:, 0] > 0).astype(float)
    w_head = np.where(tail > 0, share1 * head, head)
    w_tail = np.where(head > 0, 1.0 - share1, 1.0) * tail
    means = np.empty((n, Q1))
    means[:, 0] = w_head * split1
    means[:, 1] = w_head * split2
    means[:, 2:] = w_tail[:, None] * frac
    return means


def _draw_taxa(rng, n, spec: SettingIISpec, alpha0_taxa, other_gamma0, alpha01, lib=None,
               sample_counts=True):
    """Steps 1-5 for ``n`` subjects.  ``alpha0_taxa`` holds taxa 2..Q+1;
    ``other_gamma0`` holds the zero intercepts of the taxa listed by
    ``_other_columns``, in column order."""
    Q1 = spec.n_taxa
    x = rng.binomial(1, 0.5, n).astype(float)
    # Step 1: mixture component
    comp = rng.choice(len(spec.mixture_weights), size=n, p=np.asarray(spec.mixture_weights))
    # Step 2: true zeros
    zt = spec.zero_model_taxon - 1
    g = spec.gammas()[comp]
    delta = np.zeros((n, Q1))
    delta[:, zt] = _expit(g[:, 0] + g[:, 1] * x)
    delta[:, _other_columns(spec)] = _expit(other_gamma0)[None, :]
    true_zero = rng.random((n, Q1)) < delta
    # Step 3: Dirichlet draw over present taxa via normalised gammas
    present = ~true_zero
    means = _dirichlet_means(present, x, spec, alpha01, alpha0_taxa)
    shape = spec.phi * means
    pos = shape > 0
    gam = np.where(pos, rng.standard_gamma(np.where(pos, shape, 1.0)), 0.0)
    tot = gam.sum(axis=1, keepdims=True)
    latent = np.divide(gam, tot, out=np.zeros_like(gam), where=tot > 0)
    # Steps 4-5: multinomial counts with the library size
    if lib is None:
        lib = _draw_library_sizes(rng, n, spec.library_sizes)
    if sample_counts:
        counts = rng.multinomial(lib, np.where(tot > 0, latent, 1.0 / Q1))
        counts[tot[:, 0] == 0] = 0
    else:
        counts = np.zeros((n, Q1), np.int64)
    return TaxaDraw(x, comp, true_zero, latent, counts, lib, means)


def _false_share(draw: TaxaDraw, j: int) -> float:
    zeros = draw.counts[:, j] == 0
    if not zeros.any():
        return 0.0
    return float(np.mean(draw.false_zero[zeros, j]))


def calibrate_alpha01(spec: SettingIISpec, alpha0_taxa, other_gamma0, seed,
                      lo: float = -20.0, hi: float = 20.0, iterations: int = 40):
    """Bisection on alpha0 of taxon 1 so that the calibration taxon's zeros
    are ``false_zero_target`` false.

    Every candidate is scored on the same pilot draw (common random numbers),
    which keeps the objective monotone in alpha0.
    """
    target = spec.false_zero_target
    j = spec.calibration_taxon - 1

    def share(a):
        rng = np.random.default_rng(seed)
        return _false_share(_draw_taxa(rng, spec.pilot_n, spec, alpha0_taxa,
                                       other_gamma0, a), j)

    s_lo, s_hi = share(lo), share(hi)
    # larger alpha01 -> more mass on taxa 1-2 -> fewer false zeros
    if not (s_lo >= target >= s_hi):
        best = lo if abs(s_lo - target) < abs(s_hi - target) else hi
        achieved = s_lo if best == lo else s_hi
        return best, achieved, False
    a, b_ = lo, hi
    mid, s_mid = lo, s_lo
    for _ in range(iterations):
        mid = 0.5 * (a + b_)
        s_mid = share(mid)
        if abs(s_mid - target) <= spec.false_zero_tolerance / 4:
            break
        if s_mid > target:
            a = mid
        else:
            b_ = mid
    ok = abs(s_mid - target) <= spec.false_zero_tolerance
    return mid, s_mid, ok


def _other_columns(spec: SettingIISpec) -> list[int]:
    """Taxa with the exposure-free zero model (gamma1 = 0)."""
    zt = spec.zero_model_taxon - 1
    skip = {zt} if spec.partner_zero == "background" else {0, 1}
    return [j for j in range(spec.n_taxa) if j not in skip]


def _calibrate_other_gamma0(spec, alpha0_taxa, other_gamma0, alpha01, seed):
    """Optional variant: shift other-taxon gamma0 so their zero share is near a target."""
    target = spec.other_zero_target
    out = other_gamma0.copy()
    for _ in range(30):
        rng = np.random.default_rng(seed)
        d = _draw_taxa(rng, spec.pilot_n, spec, alpha0_taxa, out, alpha01)
        rate = (d.counts[:, _other_columns(spec)] == 0).mean(axis=0)
        diff = np.log(target / (1 - target)) - np.log(np.clip(rate, 1e-6, 1 - 1e-6)
                                                      / np.clip(1 - rate, 1e-6, 1))
        out = out + 0.8 * diff
        if np.all(np.abs(rate - target) < 0.01):
            break
    return out


def generate_setting2(spec: SettingIISpec) -> SimulatedDataset:
    """Multi-taxon compositional data with an outcome driven by taxon 1.

    With the defaults, taxon 1 carries the exposure-dependent zero model and
    its Dirichlet partner (taxon 2) is never a true zero; the step-by-step
    recipe's arrangement is ``zero_model_taxon=2, calibration_taxon=2,
    false_zero_target=0.2``.
    """
    from zibmed.screen import TaxaTable

    rng = np.random.default_rng(spec.seed)
    Q1 = spec.n_taxa
    alpha0_taxa = rng.uniform(0.0, 1.0, Q1 - 1)
    lo_g, hi_g = spec.other_gamma0_range
    other_gamma0 = rng.uniform(lo_g, hi_g, len(_other_columns(spec)))
    pilot_seed = int(rng.integers(2 ** 32))
    if spec.alpha01 is None:
        alpha01, achieved, ok = calibrate_alpha01(spec, alpha0_taxa, other_gamma0, pilot_seed)
        if not ok:
            log.warning("alpha0 calibration missed target %.3f; achieved %.3f",
                        spec.false_zero_target, achieved)
    else:
        alpha01, achieved, ok = spec.alpha01, float("nan"), True
    if spec.other_zero_target is not None:
        other_gamma0 = _calibrate_other_gamma0(spec, alpha0_taxa, other_gamma0, alpha01,
                                               pilot_seed)

    draw = _draw_taxa(rng, spec.n, spec, alpha0_taxa, other_gamma0, alpha01)
    m1 = draw.latent[:, 0]
    b = spec.outcome_beta
    r1 = (m1 > 0).astype(float)
    x = draw.x
    y = (b[0] + b[1] * m1 + b[2] * r1 + b[3] * x + b[4] * x * r1 + b[5] * x * m1
         + rng.standard_normal(spec.n))

    names = [f"taxon{j + 1}" for j in range(Q1)]
    table = TaxaTable(y=y, x=x, lib_size=draw.lib, abundance=draw.observed, taxa=names)
    truth = setting2_truth(spec, alpha0_taxa, other_gamma0, alpha01)
    return SimulatedDataset(
        dataset=None,
        truth_effects=truth,
        true_zero_mask=draw.true_zero,
        false_zero_mask=draw.false_zero,
        latent=draw.latent,
        taxa=table,
        meta={"setting": 2, "seed": spec.seed, "alpha01": float(alpha01),
              "alpha01_calibration": {"achieved": achieved, "ok": bool(ok),
                                      "target": spec.false_zero_target},
              "alpha0_taxa": alpha0_taxa.tolist(), "other_gamma0": other_gamma0.tolist(),
              "spec": _spec_dict(spec)},
    )


def _spec_dict(spec) -> dict:
    d = asdict(spec)
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def setting2_truth(spec: SettingIISpec, alpha0_taxa, other_gamma0, alpha01,
                   n_mc: int = 200_000, seed: int = 12345) -> dict:
    """Per-taxon true marginal effects and positive/negative labels.

    Only taxa 1-2 change abundance with the exposure (NIE1 positive) and
    only the zero-model taxon changes presence with it (NIE2 positive);
    every other indirect effect is exactly zero.  Nonzero effects are
    population values: the outcome-model coefficients are the least-squares
    projection of Y on the taxon's latent abundance design, evaluated on a
    large Monte Carlo draw.
    """
    rng = np.random.default_rng(seed)
    d = _draw_taxa(rng, n_mc, spec, alpha0_taxa, other_gamma0, alpha01,
                   lib=np.ones(n_mc, dtype=np.int64), sample_counts=False)
    b = spec.outcome_beta
    m1 = d.latent[:, 0]
    r1 = (m1 > 0).astype(float)
    x = d.x
    mean_y = b[0] + b[1] * m1 + b[2] * r1 + b[3] * x + b[4] * x * r1 + b[5] * x * m1
    zt = spec.zero_model_taxon - 1
    out = {}
    for j in range(spec.n_taxa):
        name = f"taxon{j + 1}"
        if j >= 2:
            out[name] = {"nie1": 0.0, "nie2": 0.0, "nie": 0.0, "nde": None,
                         "positive": {"nie1": False, "nie2": False, "nie": False}}
            continue
        m = d.latent[:, j]
        r = (m > 0).astype(float)
        X = np.column_stack([np.ones(n_mc), m, r, x, x * r, x * m])
        always = bool(np.all(r == 1))
        if always:
            X = np.delete(X, [2, 4], axis=1)
        coef, *_ = np.linalg.lstsq(X, mean_y, rcond=None)
        if always:
            coef = np.insert(coef, [2, 3], 0.0)
        e = [m[x == v].mean() for v in (0.0, 1.0)]
        p0 = [np.mean(r[x == v] == 0) for v in (0.0, 1.0)]
        nie1 = (coef[1] + coef[5]) * (e[1] - e[0])
        nie2 = (coef[2] + coef[4]) * (p0[0] - p0[1]) if j == zt else 0.0
        nde = coef[3] + coef[4] * (1 - p0[0]) + coef[5] * e[0]
        out[name] = {"nie1": float(nie1), "nie2": float(nie2), "nie": float(nie1 + nie2),
                     "nde": float(nde),
                     "positive": {"nie1": True, "nie2": j == zt, "nie": True}}
    return out
