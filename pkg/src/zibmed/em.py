"""EM estimation of the ZIBM mediation model and Oakes-identity information.

The latent label ``c_i`` is 0 for a true zero and ``k`` for membership of
beta component ``k``.  The E-step computes posterior label probabilities
(responsibilities) in log space; the M-step maximises

    Q(theta | theta0) = sum_i sum_k tau_ik(theta0) * (log Psi_ik + l_ik)

by BFGS in an unconstrained parameterisation (log delta, log phi,
additive log-ratio weights).  The inverse-Hessian estimate is carried from
one M-step to the next.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logit, logsumexp

from zibmed.likelihood import QuadratureRule, evaluate, gauss_legendre, row_normalizers
from zibmed.model import Dataset, MixtureConfig, ParameterVector

log = logging.getLogger(__name__)

ASCENT_TOL = 1e-10
LOGLIK_STALL_TOL = 1e-10
LOGLIK_STALL_COUNT = 5
POLISH_SCORE_TOL = 1e-5


class EstimationError(RuntimeError):
    """The model cannot be estimated from the supplied data."""


@dataclass
class EmOptions:
    tolerance: float = 1e-8
    max_iterations: int = 2000
    n_restarts: int = 5
    seed: int = 0
    quadrature_nodes: int = 32

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1 or self.n_restarts < 1:
            raise ValueError("max_iterations and n_restarts must be at least 1")

    @property
    def rule(self) -> QuadratureRule:
        return gauss_legendre(self.quadrature_nodes)


@dataclass
class Responsibilities:
    tau: np.ndarray

    @property
    def n(self) -> int:
        return self.tau.shape[0]


@dataclass
class FitResult:
    params_hat: ParameterVector
    loglik: float
    config: MixtureConfig
    free_hat: np.ndarray
    n_iterations: int
    converged: bool
    stop_reason: str
    trajectory: list[tuple[int, float]]
    info_matrix: np.ndarray | None = None
    cov_free: np.ndarray | None = None
    # basis of directions the data cannot identify (columns), if any
    null_basis: np.ndarray | None = None
    std_errors: np.ndarray | None = None
    info_diagnostics: dict = field(default_factory=dict)
    restart_index: int = 0
    restart_logliks: list[float] = field(default_factory=list)
    max_loglik_decrease: float = 0.0
    stalled_steps: int = 0
    quadrature_nodes: int = 32

    @property
    def param_names(self) -> list[str]:
        return self.config.param_names()

    @property
    def has_valid_information(self) -> bool:
        return self.cov_free is not None

    def summary(self) -> dict:
        se = self.std_errors if self.std_errors is not None else [None] * self.config.n_free
        est = self.params_hat.natural_vector(self.config)
        return {
            "parameters": {
                name: {"estimate": float(e), "std_error": None if s is None or not np.isfinite(s)
                       else float(s)}
                for name, e, s in zip(self.param_names, est, se)
            },
            "loglik": self.loglik,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "zero_inflated": self.config.zero_inflated,
            "K": self.config.K,
            "restart_index": self.restart_index,
            "restart_logliks": list(self.restart_logliks),
            "max_loglik_decrease": self.max_loglik_decrease,
            "information": self.info_diagnostics,
        }


# --------------------------------------------------------------------------
# E-step and Q
# --------------------------------------------------------------------------

def _responsibilities(T: np.ndarray) -> np.ndarray:
    norm = row_normalizers(T)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise EstimationError(f"every component underflowed for subject {bad[0]}")
    return np.exp(T - norm[:, None])


def e_step(data: Dataset, params: ParameterVector, config: MixtureConfig,
           rule: QuadratureRule | None = None) -> Responsibilities:
    """Posterior probabilities of the latent component labels."""
    T = evaluate(params.to_free(config), data, config, rule or gauss_legendre())
    return Responsibilities(_responsibilities(T))


def _q_value(T: np.ndarray, tau: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(tau > 0, tau * T, 0.0)))


def q_function(data: Dataset, params_free, responsibilities: Responsibilities,
               config: MixtureConfig, rule: QuadratureRule | None = None) -> float:
    """Expected complete-data log-likelihood at ``params_free``."""
    T = evaluate(params_free, data, config, rule or gauss_legendre())
    return _q_value(T, responsibilities.tau)


def q_gradient(data: Dataset, params_free, responsibilities: Responsibilities,
               config: MixtureConfig, rule: QuadratureRule | None = None) -> np.ndarray:
    _, g = evaluate(params_free, data, config, rule or gauss_legendre(), responsibilities.tau)
    return g


def score(data: Dataset, params_free, config: MixtureConfig,
          rule: QuadratureRule | None = None) -> np.ndarray:
    """Gradient of the observed log-likelihood (Q-gradient with refreshed tau)."""
    rule = rule or gauss_legendre()
    tau = _responsibilities(evaluate(params_free, data, config, rule))
    return evaluate(params_free, data, config, rule, tau)[1]


def entropy(responsibilities: Responsibilities) -> float:
    tau = responsibilities.tau
    return float(-np.sum(np.where(tau > 0, tau * np.log(np.where(tau > 0, tau, 1.0)), 0.0)))


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------

@dataclass
class _MStepOutcome:
    v: np.ndarray
    q_old: float
    q_new: float
    stalled: bool
    hess_inv: np.ndarray | None


def _m_step_free(data, tau, v0, config, rule, hess_inv0=None, gtol=1e-7) -> _MStepOutcome:
    def neg_q(v):
        T, g = evaluate(v, data, config, rule, tau)
        q = _q_value(T, tau)
        if not np.isfinite(q):
            return np.inf, np.zeros_like(v)
        return -q, -g

    q_old = -neg_q(v0)[0]
    opts = {"gtol": gtol, "maxiter": 500}
    if hess_inv0 is not None:
        opts["hess_inv0"] = hess_inv0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(neg_q, v0, jac=True, method="BFGS", options=opts)
    q_new = -float(res.fun)
    if not np.isfinite(q_new) or q_new < q_old - ASCENT_TOL:
        return _MStepOutcome(np.array(v0, dtype=float), q_old, q_old, True, None)
    hess_inv = 0.5 * (res.hess_inv + res.hess_inv.T)
    if not _positive_definite(hess_inv):
        hess_inv = None
    return _MStepOutcome(np.asarray(res.x, dtype=float), q_old, q_new, False, hess_inv)


def _positive_definite(A) -> bool:
    if not np.all(np.isfinite(A)):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def m_step(data: Dataset, responsibilities: Responsibilities, params_init: ParameterVector,
           config: MixtureConfig, rule: QuadratureRule | None = None,
           options: EmOptions | None = None) -> ParameterVector:
    """Maximise Q for fixed responsibilities, starting at ``params_init``.

    If BFGS cannot improve on the start, the start is returned unchanged.
    """
    rule = rule or (options.rule if options else gauss_legendre())
    out = _m_step_free(data, responsibilities.tau, params_init.to_free(config), config, rule)
    return ParameterVector.from_free(out.v, config)


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def _logistic_fit(x, z, ridge=1e-4, iterations=50):
    X = np.column_stack([np.ones_like(x), x])
    w = np.zeros(2)
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        g = X.T @ (z - p) - ridge * w
        H = X.T @ (X * (p * (1 - p))[:, None]) + ridge * np.eye(2)
        step = np.linalg.solve(H, g)
        w = w + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return np.clip(w, -20.0, 20.0)


def initial_parameters(data: Dataset, config: MixtureConfig) -> ParameterVector:
    """Data-driven starting values.

    Components: equal-frequency bins of sorted logit(m) over positive
    observations.  Outcome: least squares of the outcome model treating
    observed zeros as true.  Zero model: logistic regression of the zero
    indicator on exposure.
    """
    pos = data.m > 0
    lm = np.sort(logit(data.m[pos]))
    bins = np.array_split(lm, config.K + 1)
    alpha0 = np.sort([b.mean() for b in bins])[::-1]
    sizes = np.array([b.size for b in bins], dtype=float)
    weights = sizes / sizes.sum()

    mvals = np.sort(data.m[pos])
    phis = []
    for chunk in np.array_split(mvals, config.K + 1):
        if chunk.size > 1 and chunk.var() > 0:
            mu = chunk.mean()
            phis.append(mu * (1 - mu) / chunk.var() - 1.0)
    phis = [p for p in phis if p > 0]
    phi = float(np.clip(np.median(phis), 1.0, 1e3)) if phis else 10.0

    r = pos.astype(float)
    m, x = data.m, data.x
    X = np.column_stack([np.ones_like(m), m, r, x, x * r, x * m])
    beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    resid = data.y - X @ beta
    delta = float(np.sqrt(np.mean(resid ** 2)))
    delta = max(delta, 1e-3 * max(float(np.std(data.y)), 1.0))

    if config.zero_inflated:
        gamma = _logistic_fit(x, (~pos).astype(float))
    else:
        gamma = np.array([-np.inf, 0.0])
    return ParameterVector(beta, delta, gamma, phi, alpha0, np.zeros(config.K + 1), weights[:-1])


def _jitter(v: np.ndarray, config: MixtureConfig, rng: np.random.Generator) -> np.ndarray:
    v = v.copy()
    s = config.slices()
    v[s["alpha0"]] += rng.normal(0.0, 0.5, config.K + 1)
    v[s["psi"]] += rng.normal(0.0, 0.5, config.K)
    return v


# --------------------------------------------------------------------------
# EM driver
# --------------------------------------------------------------------------

@dataclass
class _RunOutcome:
    v: np.ndarray
    loglik: float
    n_iterations: int
    converged: bool
    stop_reason: str
    trajectory: list
    max_decrease: float
    stalled: int


def _run_em(data, config, v0, options: EmOptions, rule) -> _RunOutcome:
    v = np.asarray(v0, dtype=float)
    T = evaluate(v, data, config, rule)
    tau = _responsibilities(T)
    ll = float(np.sum(row_normalizers(T)))
    trajectory = [(0, ll)]
    hess_inv = None
    max_decrease = 0.0
    stalled = 0
    quiet = 0
    stop_reason = "max_iterations"
    converged = False
    it = 0
    for it in range(1, options.max_iterations + 1):
        out = _m_step_free(data, tau, v, config, rule, hess_inv)
        if out.stalled:
            stalled += 1
            hess_inv = None
        else:
            hess_inv = out.hess_inv
        step = float(np.linalg.norm(out.v - v))
        v = out.v
        T = evaluate(v, data, config, rule)
        tau = _responsibilities(T)
        ll_new = float(np.sum(row_normalizers(T)))
        max_decrease = max(max_decrease, ll - ll_new)
        trajectory.append((it, ll_new))
        quiet = quiet + 1 if abs(ll_new - ll) < LOGLIK_STALL_TOL else 0
        ll = ll_new
        if step < options.tolerance:
            converged, stop_reason = True, "distance"
            break
        if quiet >= LOGLIK_STALL_COUNT:
            converged, stop_reason = True, "loglik"
            break
        if out.stalled and stalled > 3:
            stop_reason = "stalled"
            break
    if stop_reason == "max_iterations":
        polished = _polish(data, config, v, ll, rule)
        if polished is not None:
            v, ll = polished
            trajectory.append((it, ll))
            converged, stop_reason = True, "polished"
    return _RunOutcome(v, ll, it, converged, stop_reason, trajectory, max_decrease, stalled)


def _polish(data, config, v, ll, rule):
    """Quasi-Newton on the observed log-likelihood after EM hits its iteration cap.

    EM crawls along flat ridges when much of the information is missing.  The
    observed-data gradient is the Q-gradient at refreshed responsibilities, so
    BFGS can finish the climb.  Returns (v, loglik) when it ends at a stationary
    point no lower than ``ll``; otherwise None.
    """
    def neg_ll(w):
        T = evaluate(w, data, config, rule)
        norm = row_normalizers(T)
        if not np.all(np.isfinite(norm)):
            return np.inf, np.zeros_like(w)
        tau = np.exp(T - norm[:, None])
        return -float(np.sum(norm)), -evaluate(w, data, config, rule, tau)[1]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(neg_ll, v, jac=True, method="BFGS",
                       options={"gtol": POLISH_SCORE_TOL / 10, "maxiter": 1000})
    ll_new = -float(res.fun)
    if not np.isfinite(ll_new) or ll_new < ll - ASCENT_TOL:
        return None
    if np.max(np.abs(neg_ll(res.x)[1])) > POLISH_SCORE_TOL:
        return None
    return np.asarray(res.x, dtype=float), ll_new


def _check_data(data: Dataset, config: MixtureConfig) -> MixtureConfig:
    pos = data.m > 0
    if not np.any(pos):
        raise EstimationError("mediator is zero for every subject; model is unidentifiable")
    if np.unique(data.m[pos]).size < config.K + 2:
        raise EstimationError(
            f"need at least {config.K + 2} distinct positive abundances for K={config.K}")
    if config.zero_inflated and np.all(pos):
        log.info("no observed zeros; fitting without the zero-inflation component")
        return MixtureConfig(config.K, zero_inflated=False)
    return config


def em_fit(data: Dataset, config: MixtureConfig, options: EmOptions | None = None,
           init: ParameterVector | None = None, information: bool = True) -> FitResult:
    """Maximum-likelihood fit by EM from several starts.

    A mediator without observed zeros is fitted with the zero-inflation part
    removed (``result.config.zero_inflated`` is then False).  With ``init``
    given, a single run is started there instead of the data-driven starts.
    """
    options = options or EmOptions()
    config = _check_data(data, config)
    rule = options.rule

    if init is not None:
        if not config.zero_inflated:
            init = init.replace(gamma=(-np.inf, 0.0))
        starts = [init.to_free(config)]
    else:
        base = initial_parameters(data, config).to_free(config)
        starts = [base]
        for r in range(1, options.n_restarts):
            starts.append(_jitter(base, config, np.random.default_rng([options.seed, r])))

    runs = []
    for r, v0 in enumerate(starts):
        try:
            runs.append((r, _run_em(data, config, v0, options, rule)))
        except (EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("restart %d failed: %s", r, exc)
    if not runs:
        raise EstimationError("every EM start failed")
    best_r, best = min(runs, key=lambda t: (-t[1].loglik, t[1].n_iterations, t[0]))

    params = ParameterVector.from_free(best.v, config).canonical()
    v_hat = params.to_free(config)
    ll = float(np.sum(row_normalizers(evaluate(v_hat, data, config, rule))))
    fit = FitResult(
        params_hat=params, loglik=ll, config=config, free_hat=v_hat,
        n_iterations=best.n_iterations, converged=best.converged,
        stop_reason=best.stop_reason, trajectory=best.trajectory,
        restart_index=best_r, restart_logliks=[run.loglik for _, run in runs],
        max_loglik_decrease=best.max_decrease, stalled_steps=best.stalled,
        quadrature_nodes=options.quadrature_nodes,
    )
    if information:
        attach_information(data, fit, rule)
    return fit


# --------------------------------------------------------------------------
# information matrix
# --------------------------------------------------------------------------

def fd_steps(v: np.ndarray) -> np.ndarray:
    return 1e-5 * np.maximum(1.0, np.abs(v))


def information_matrix(data: Dataset, fit: FitResult, config: MixtureConfig | None = None,
                       rule: QuadratureRule | None = None) -> np.ndarray:
    """Observed information via the Oakes identity, on the free scale.

    ``I = -d2Q(theta|theta*)/dtheta2 - d2Q(theta|theta0)/dtheta dtheta0`` at
    ``theta = theta0 = theta*``; both blocks by central differences of the
    analytic Q-gradient, the second with responsibilities refreshed at the
    perturbed ``theta0``.
    """
    config = config or fit.config
    rule = rule or gauss_legendre(fit.quadrature_nodes)
    v = fit.free_hat
    P = v.size
    tau_hat = _responsibilities(evaluate(v, data, config, rule))
    h = fd_steps(v)
    H1 = np.empty((P, P))
    H2 = np.empty((P, P))
    for j in range(P):
        e = np.zeros(P)
        e[j] = h[j]
        gp = evaluate(v + e, data, config, rule, tau_hat)[1]
        gm = evaluate(v - e, data, config, rule, tau_hat)[1]
        H1[:, j] = (gp - gm) / (2 * h[j])
        tau_p = _responsibilities(evaluate(v + e, data, config, rule))
        tau_m = _responsibilities(evaluate(v - e, data, config, rule))
        cp = evaluate(v, data, config, rule, tau_p)[1]
        cm = evaluate(v, data, config, rule, tau_m)[1]
        H2[:, j] = (cp - cm) / (2 * h[j])
    info = -(H1 + H2)
    return 0.5 * (info + info.T)


NULL_EIG_RTOL = 1e-9
ESTIMABLE_RTOL = 1e-4


def estimable(grad: np.ndarray, null_basis: np.ndarray | None) -> bool:
    """True when a linear functional with gradient ``grad`` ignores every null direction."""
    if null_basis is None or null_basis.shape[1] == 0:
        return True
    norm = np.linalg.norm(grad)
    if norm == 0:
        return True
    return bool(np.linalg.norm(null_basis.T @ grad) <= ESTIMABLE_RTOL * norm)


def attach_information(data: Dataset, fit: FitResult, rule: QuadratureRule | None = None):
    """Compute the information matrix, free-scale covariance and natural-scale SEs.

    A singular information matrix (eigenvalues within ``NULL_EIG_RTOL`` of
    zero relative to the largest) means some parameter directions are not
    identified by the data, e.g. a zero model at a boundary or no zeros at
    one exposure level.  The covariance is then the pseudo-inverse over the
    identified subspace and only estimable quantities get standard errors.
    A clearly negative eigenvalue leaves everything undefined.
    """
    info = information_matrix(data, fit, rule=rule)
    fit.info_matrix = info
    eig, vec = np.linalg.eigh(info)
    top = max(eig[-1], 0.0)
    diag = {"min_eigenvalue": float(eig[0]), "max_eigenvalue": float(eig[-1]),
            "condition_number": float(eig[-1] / eig[0]) if eig[0] > 0 else None,
            "null_directions": 0}
    P = info.shape[0]
    null = np.abs(eig) <= NULL_EIG_RTOL * top
    if top <= 0 or np.any(eig[~null] <= 0) or not np.all(np.isfinite(info)):
        diag["status"] = "not positive definite; standard errors undefined"
        fit.cov_free = None
        fit.null_basis = None
        fit.std_errors = np.full(P, np.nan)
        fit.info_diagnostics = diag
        return fit
    keep = ~null
    cov = (vec[:, keep] / eig[keep]) @ vec[:, keep].T
    cov = 0.5 * (cov + cov.T)
    fit.cov_free = cov
    fit.null_basis = vec[:, null] if null.any() else None
    J = fit.params_hat.free_to_natural_jacobian(fit.config)
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", J, cov, J), 0.0, None))
    if fit.null_basis is not None:
        diag["null_directions"] = int(null.sum())
        for i in range(P):
            if not estimable(J[i], fit.null_basis):
                se[i] = np.nan
        diag["status"] = "singular; standard errors for estimable quantities only"
    else:
        diag["status"] = "ok"
    fit.std_errors = se
    fit.info_diagnostics = diag
    return fit


def observed_information_fd(data: Dataset, v: np.ndarray, config: MixtureConfig,
                            rule: QuadratureRule | None = None, step: float = 1e-4) -> np.ndarray:
    """Negative Hessian of the observed log-likelihood by second differences of its values."""
    rule = rule or gauss_legendre()

    def ll(w):
        return float(np.sum(logsumexp(evaluate(w, data, config, rule), axis=1)))

    P = v.size
    h = step * np.maximum(1.0, np.abs(v))
    f0 = ll(v)
    H = np.empty((P, P))
    for i in range(P):
        ei = np.zeros(P)
        ei[i] = h[i]
        H[i, i] = (ll(v + ei) - 2 * f0 + ll(v - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(P)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (ll(v + ei + ej) - ll(v + ei - ej) - ll(v - ei + ej)
                                 + ll(v - ei - ej)) / (4 * h[i] * h[j])
    return -H
