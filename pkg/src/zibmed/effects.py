"""Natural indirect and direct effects of the exposure through the mediator.

For a change of exposure from ``x1`` to ``x2``::

    NIE1 = (b1 + b5*x2) * (E[M_x2] - E[M_x1])
    NIE2 = (b2 + b4*x2) * (Delta_x1 - Delta_x2)
    NIE  = NIE1 + NIE2
    NDE  = (x2 - x1) * (b3 + b4*(1 - Delta_x1) + b5*E[M_x1])

with ``E[M_x] = (1 - Delta_x) * sum_k w_k mu_k(x)``.  The NDE follows from
``E[Y(x2, M_x1) - Y(x1, M_x1)]`` under the outcome model: only the terms
that carry ``x`` change, and ``E[1(M_x1 > 0)] = 1 - Delta_x1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from zibmed.model import Dataset, EffectContrast, MixtureConfig, ParameterVector

log = logging.getLogger(__name__)

EFFECT_NAMES = ("nie1", "nie2", "nie", "nde")


def mean_abundance(params: ParameterVector, config: MixtureConfig, x: float) -> float:
    """Expected relative abundance at exposure ``x``, zeros included."""
    delta = float(params.delta_prob(x)) if config.zero_inflated else 0.0
    mu = params.component_means(x)
    return float((1.0 - delta) * np.dot(params.weights, mu))


@dataclass(frozen=True)
class EffectPoint:
    nie1: float
    nie2: float
    nie: float
    nde: float
    nie2_defined: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.nie1, self.nie2, self.nie, self.nde])


def compute_effects(params: ParameterVector, config: MixtureConfig,
                    contrast: EffectContrast = EffectContrast()) -> EffectPoint:
    x1, x2 = contrast.x1, contrast.x2
    b = params.beta
    e1 = mean_abundance(params, config, x1)
    e2 = mean_abundance(params, config, x2)
    nie1 = (b[1] + b[5] * x2) * (e2 - e1)
    if config.zero_inflated:
        d1 = float(params.delta_prob(x1))
        d2 = float(params.delta_prob(x2))
        nie2 = (b[2] + b[4] * x2) * (d1 - d2)
    else:
        d1 = 0.0
        nie2 = 0.0
    nde = (x2 - x1) * (b[3] + b[4] * (1.0 - d1) + b[5] * e1)
    return EffectPoint(nie1, nie2, nie1 + nie2, nde, nie2_defined=config.zero_inflated)


@dataclass(frozen=True)
class EffectEstimate:
    estimate: float
    std_error: float | None
    ci: tuple[float, float] | None
    p_value: float | None = None

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "std_error": self.std_error,
                "ci": list(self.ci) if self.ci is not None else None, "p_value": self.p_value}


@dataclass
class EffectEstimates:
    nie1: EffectEstimate
    nie2: EffectEstimate
    nie: EffectEstimate
    nde: EffectEstimate
    contrast: EffectContrast
    ci_level: float = 0.95
    ci_method: str = "delta"
    nie2_defined: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def p_values(self) -> dict[str, float | None]:
        return {"nie1": self.nie1.p_value, "nie2": self.nie2.p_value, "nie": self.nie.p_value}

    def as_dict(self) -> dict:
        out = {name: getattr(self, name).as_dict() for name in EFFECT_NAMES}
        out.update(contrast={"x1": self.contrast.x1, "x2": self.contrast.x2},
                   ci_level=self.ci_level, ci_method=self.ci_method,
                   nie2_defined=self.nie2_defined, diagnostics=self.diagnostics)
        return out


def wald_p(estimate: float, se: float | None) -> float | None:
    if se is None or not np.isfinite(se):
        return None
    if se == 0:
        return 1.0 if estimate == 0 else 0.0
    return float(2.0 * norm.sf(abs(estimate) / se))


def effect_gradient(free: np.ndarray, config: MixtureConfig, contrast: EffectContrast,
                    steps: np.ndarray | None = None) -> np.ndarray:
    """Central-difference Jacobian of (nie1, nie2, nie, nde) on the free scale; shape (4, P)."""
    free = np.asarray(free, dtype=float)
    h = steps if steps is not None else 1e-5 * np.maximum(1.0, np.abs(free))
    J = np.empty((4, free.size))
    for j in range(free.size):
        e = np.zeros(free.size)
        e[j] = h[j]
        fp = compute_effects(ParameterVector.from_free(free + e, config), config, contrast)
        fm = compute_effects(ParameterVector.from_free(free - e, config), config, contrast)
        J[:, j] = (fp.as_array() - fm.as_array()) / (2 * h[j])
    return J


def delta_method_ci(fit, contrast: EffectContrast = EffectContrast(),
                    level: float = 0.95) -> EffectEstimates:
    """Wald intervals with multivariate delta-method standard errors."""
    config = fit.config
    point = compute_effects(fit.params_hat, config, contrast)
    z = norm.ppf(0.5 + level / 2.0)
    diagnostics = {"information": dict(fit.info_diagnostics)}
    if fit.cov_free is None:
        ses = [None] * 4
        diagnostics["status"] = "standard errors undefined (information matrix not positive definite)"
    else:
        from zibmed.em import estimable

        J = effect_gradient(fit.free_hat, config, contrast)
        var = np.einsum("ij,jk,ik->i", J, fit.cov_free, J)
        ses = [float(np.sqrt(max(v, 0.0))) if estimable(J[i], fit.null_basis) else None
               for i, v in enumerate(var)]
        if not point.nie2_defined:
            ses[1] = 0.0
        diagnostics["status"] = "ok" if all(s is not None for s in ses) else \
            "some effects not estimable (singular information)"
    ests = {}
    for name, est, se in zip(EFFECT_NAMES, point.as_array(), ses):
        est = float(est)
        ci = None if se is None else (est - z * se, est + z * se)
        p = wald_p(est, se) if name != "nde" else None
        if name == "nie2" and not point.nie2_defined:
            p = None
        ests[name] = EffectEstimate(est, se, ci, p)
    return EffectEstimates(**ests, contrast=contrast, ci_level=level, ci_method="delta",
                           nie2_defined=point.nie2_defined, diagnostics=diagnostics)


def _bootstrap_replicate(args):
    from zibmed.em import EstimationError, EmOptions, em_fit

    data, config, options, contrast, init, seed, b = args
    rng = np.random.default_rng([seed, b])
    idx = rng.integers(0, data.n, data.n)
    boot = data.subset(idx)
    opts = EmOptions(tolerance=options.tolerance, max_iterations=options.max_iterations,
                     n_restarts=1, seed=options.seed, quadrature_nodes=options.quadrature_nodes)
    try:
        f = em_fit(boot, config, opts, init=init, information=False)
    except (EstimationError, ValueError) as exc:
        return None, str(exc)
    if not f.converged:
        return None, "not converged"
    return compute_effects(f.params_hat, f.config, contrast).as_array(), None


def bootstrap_ci(data: Dataset, config: MixtureConfig, options=None,
                 contrast: EffectContrast = EffectContrast(), level: float = 0.95,
                 n_boot: int = 200, fit=None, workers: int = 1) -> EffectEstimates:
    """Case-resampling bootstrap with percentile intervals.

    Each replicate is refitted from the full-data estimate with a single EM
    run.  Replicates that fail or do not converge are dropped; more than 20%
    failures invalidates the intervals.
    """
    from zibmed.em import EmOptions, em_fit
    from zibmed.parallel import ordered_map

    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    options = options or EmOptions()
    if fit is None:
        fit = em_fit(data, config, options, information=False)
    config = fit.config
    point = compute_effects(fit.params_hat, config, contrast)
    jobs = [(data, config, options, contrast, fit.params_hat, options.seed, b)
            for b in range(n_boot)]
    results = ordered_map(_bootstrap_replicate, jobs, workers)
    draws = np.array([r for r, _ in results if r is not None])
    failures = sum(r is None for r, _ in results)
    valid = failures <= 0.2 * n_boot and draws.shape[0] >= 2
    diagnostics = {"n_boot": n_boot, "failures": failures,
                   "status": "ok" if valid else "too many failed replicates; intervals invalid"}
    ests = {}
    for j, name in enumerate(EFFECT_NAMES):
        est = float(point.as_array()[j])
        if not valid:
            ests[name] = EffectEstimate(est, None, None, None)
            continue
        col = draws[:, j]
        se = float(np.std(col, ddof=1))
        lo, hi = np.quantile(col, [0.5 - level / 2.0, 0.5 + level / 2.0])
        p = wald_p(est, se) if name != "nde" else None
        if name == "nie2" and not point.nie2_defined:
            p = None
        ests[name] = EffectEstimate(est, se, (float(lo), float(hi)), p)
    return EffectEstimates(**ests, contrast=contrast, ci_level=level, ci_method="bootstrap",
                           nie2_defined=point.nie2_defined, diagnostics=diagnostics)
