"""Domain types, link functions and the zero-inflated beta mixture density.

The mediator model is a point mass ``Delta`` at zero plus a ``K+1``
component beta mixture on (0, 1) sharing one dispersion ``phi``::

    logit(Delta)  = gamma0 + gamma1 * x
    logit(mu_k)   = alpha0_k + alpha1_k * x          k = 1..K+1
    weights       = psi_1..psi_K, 1 - sum(psi)

and the outcome follows the linear model

    y = b0 + b1*m + b2*1(m>0) + b3*x + b4*x*1(m>0) + b5*x*m + N(0, delta^2).

``delta`` is a standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import gammaln, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Invalid data or parameters for the mediation model."""


# --------------------------------------------------------------------------
# link functions and densities
# --------------------------------------------------------------------------

def expit(t):
    """Logistic function, stable for large ``|t|``."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def log_expit(t):
    """``log(expit(t))`` without cancellation."""
    t = np.asarray(t, dtype=float)
    return -np.logaddexp(0.0, -t)


def beta_log_pdf(m, mu, phi):
    """Log density of Beta(mu*phi, (1-mu)*phi) at ``m``."""
    m = np.asarray(m, dtype=float)
    if np.any((m <= 0.0) | (m >= 1.0)):
        raise ModelError("beta density evaluated outside (0, 1)")
    a = np.asarray(mu, dtype=float) * phi
    b = (1.0 - np.asarray(mu, dtype=float)) * phi
    out = ((a - 1.0) * np.log(m) + (b - 1.0) * np.log1p(-m)
           - gammaln(a) - gammaln(b) + gammaln(a + b))
    return out if np.ndim(out) else float(out)


def lod_observed(m_true: float, lib_size: int) -> float:
    """Observed abundance under the limit-of-detection rule: zero iff m*L < 1."""
    if m_true * lib_size < 1.0:
        return 0.0
    return float(m_true)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectRecord:
    y: float
    m_obs: float
    x: float
    lib_size: int

    def __post_init__(self):
        if not (0.0 <= self.m_obs < 1.0):
            raise ModelError(f"observed abundance must lie in [0, 1), got {self.m_obs}")
        if int(self.lib_size) != self.lib_size or self.lib_size < 1:
            raise ModelError(f"library size must be a positive integer, got {self.lib_size}")

    @property
    def r(self) -> int:
        return int(self.m_obs > 0)


class Dataset:
    """Column store of subject records.

    Arrays are read-only; construct a new dataset to change values.
    """

    def __init__(self, y, m_obs, x, lib_size):
        y = np.array(y, dtype=float)
        m = np.array(m_obs, dtype=float)
        x = np.array(x, dtype=float)
        lib = np.array(lib_size)
        if not (y.ndim == m.ndim == x.ndim == lib.ndim == 1):
            raise ModelError("dataset columns must be one-dimensional")
        n = len(y)
        if n < 1 or not (len(m) == len(x) == len(lib) == n):
            raise ModelError("dataset columns must be non-empty and of equal length")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ModelError("outcome and exposure must be finite")
        bad = np.flatnonzero(~((m >= 0.0) & (m < 1.0)))
        if bad.size:
            raise ModelError(f"observed abundance outside [0, 1) at row {bad[0]}: {m[bad[0]]}")
        if np.any(lib != np.round(lib)) or np.any(lib < 1):
            raise ModelError("library sizes must be positive integers")
        self.y, self.m, self.x = y, m, x
        self.lib_size = lib.astype(np.int64)
        for arr in (self.y, self.m, self.x, self.lib_size):
            arr.setflags(write=False)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "Dataset":
        records = list(records)
        return cls([r.y for r in records], [r.m_obs for r in records],
                   [r.x for r in records], [r.lib_size for r in records])

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def r(self) -> np.ndarray:
        return self.m > 0

    @property
    def records(self) -> list[SubjectRecord]:
        return [SubjectRecord(float(a), float(b), float(c), int(d))
                for a, b, c, d in zip(self.y, self.m, self.x, self.lib_size)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.y[index], self.m[index], self.x[index], self.lib_size[index])

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in
                   ((self.y, other.y), (self.m, other.m), (self.x, other.x),
                    (self.lib_size, other.lib_size)))

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, zeros={int(np.sum(self.m == 0))})"


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureConfig:
    """Number of free-weight components ``K`` (``K+1`` components in total).

    ``zero_inflated=False`` drops the point mass (Delta fixed at 0), used for
    mediators without observed zeros.
    """

    K: int = 0
    zero_inflated: bool = True

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise ModelError(f"K must be a non-negative integer, got {self.K}")

    @property
    def n_components(self) -> int:
        return self.K + 1

    @property
    def n_free(self) -> int:
        return 6 + 1 + (2 if self.zero_inflated else 0) + 1 + 2 * (self.K + 1) + self.K

    def param_names(self) -> list[str]:
        names = [f"beta{j}" for j in range(6)] + ["delta"]
        if self.zero_inflated:
            names += ["gamma0", "gamma1"]
        names += ["phi"]
        names += [f"alpha0_{k}" for k in range(1, self.K + 2)]
        names += [f"alpha1_{k}" for k in range(1, self.K + 2)]
        names += [f"psi_{k}" for k in range(1, self.K + 1)]
        return names

    def slices(self) -> dict[str, slice]:
        """Positions of each parameter block in the free vector."""
        K1 = self.K + 1
        out = {"beta": slice(0, 6), "delta": slice(6, 7)}
        i = 7
        if self.zero_inflated:
            out["gamma"] = slice(7, 9)
            i = 9
        out["phi"] = slice(i, i + 1)
        out["alpha0"] = slice(i + 1, i + 1 + K1)
        out["alpha1"] = slice(i + 1 + K1, i + 1 + 2 * K1)
        out["psi"] = slice(i + 1 + 2 * K1, i + 1 + 2 * K1 + self.K)
        return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParameterVector:
    beta: np.ndarray
    delta_sd: float
    gamma: np.ndarray
    phi: float
    alpha0: np.ndarray
    alpha1: np.ndarray
    psi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("beta", "gamma", "alpha0", "alpha1", "psi"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "delta_sd", float(self.delta_sd))
        object.__setattr__(self, "phi", float(self.phi))
        if self.beta.size != 6 or self.gamma.size != 2:
            raise ModelError("beta needs 6 entries and gamma 2")
        if self.alpha0.size != self.alpha1.size or self.alpha0.size != self.psi.size + 1:
            raise ModelError("alpha0/alpha1 need K+1 entries and psi K entries")
        if not (self.phi > 0 and self.delta_sd > 0):
            raise ModelError("phi and delta must be positive")
        if np.any(self.psi <= 0) or self.psi.sum() >= 1:
            raise ModelError("psi must be positive with sum < 1")

    @classmethod
    def create(cls, beta, delta_sd, gamma, phi, alpha0, alpha1, psi=()) -> "ParameterVector":
        return cls(beta=beta, delta_sd=delta_sd, gamma=gamma, phi=phi,
                   alpha0=alpha0, alpha1=alpha1, psi=psi)

    @property
    def K(self) -> int:
        return self.psi.size

    @property
    def weights(self) -> np.ndarray:
        """All ``K+1`` mixture weights, the last being ``1 - sum(psi)``."""
        return np.append(self.psi, 1.0 - self.psi.sum())

    def delta_prob(self, x):
        return expit(self.gamma[0] + self.gamma[1] * np.asarray(x, dtype=float))

    def component_means(self, x):
        """``mu_k(x)``; shape ``(..., K+1)``."""
        x = np.asarray(x, dtype=float)[..., None]
        return expit(self.alpha0 + self.alpha1 * x)

    def canonical(self) -> "ParameterVector":
        """Relabel components so that alpha0 is non-increasing."""
        order = np.argsort(-self.alpha0, kind="stable")
        w = self.weights[order]
        return ParameterVector(self.beta, self.delta_sd, self.gamma, self.phi,
                               self.alpha0[order], self.alpha1[order], w[:-1])

    def natural_vector(self, config: MixtureConfig) -> np.ndarray:
        parts = [self.beta, [self.delta_sd]]
        if config.zero_inflated:
            parts.append(self.gamma)
        parts += [[self.phi], self.alpha0, self.alpha1, self.psi]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def to_free(self, config: MixtureConfig) -> np.ndarray:
        """Unconstrained coordinates: log delta, log phi, additive log-ratio psi."""
        self._check_config(config)
        parts = [self.beta, [np.log(self.delta_sd)]]
        if config.zero_inflated:
            parts.append(self.gamma)
        last = 1.0 - self.psi.sum()
        parts += [[np.log(self.phi)], self.alpha0, self.alpha1, np.log(self.psi) - np.log(last)]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    @classmethod
    def from_free(cls, v, config: MixtureConfig) -> "ParameterVector":
        v = np.asarray(v, dtype=float)
        if v.size != config.n_free:
            raise ModelError(f"expected {config.n_free} free parameters, got {v.size}")
        s = config.slices()
        gamma = v[s["gamma"]] if config.zero_inflated else np.array([-np.inf, 0.0])
        alr = v[s["psi"]]
        lse = logsumexp(np.append(alr, 0.0))
        psi = np.exp(alr - lse)
        return cls(v[s["beta"]], float(np.exp(v[s["delta"]][0])), gamma,
                   float(np.exp(v[s["phi"]][0])), v[s["alpha0"]], v[s["alpha1"]], psi)

    def free_to_natural_jacobian(self, config: MixtureConfig) -> np.ndarray:
        """d(natural)/d(free) at this point."""
        P = config.n_free
        J = np.eye(P)
        s = config.slices()
        J[s["delta"], s["delta"]] = self.delta_sd
        J[s["phi"], s["phi"]] = self.phi
        ps = s["psi"]
        if self.K:
            J[ps, ps] = np.diag(self.psi) - np.outer(self.psi, self.psi)
        return J

    def _check_config(self, config: MixtureConfig):
        if config.K != self.K:
            raise ModelError(f"parameters have K={self.K}, config has K={config.K}")

    def as_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "delta": self.delta_sd,
            "gamma": [float(g) for g in self.gamma],
            "phi": self.phi,
            "alpha0": self.alpha0.tolist(),
            "alpha1": self.alpha1.tolist(),
            "psi": self.psi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterVector":
        return cls(d["beta"], d["delta"], d["gamma"], d["phi"], d["alpha0"], d["alpha1"],
                   d.get("psi", ()))

    def replace(self, **changes) -> "ParameterVector":
        kw = dict(beta=self.beta, delta_sd=self.delta_sd, gamma=self.gamma, phi=self.phi,
                  alpha0=self.alpha0, alpha1=self.alpha1, psi=self.psi)
        kw.update(changes)
        return ParameterVector(**kw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.as_dict() == other.as_dict()


@dataclass(frozen=True)
class EffectContrast:
    x1: float = 0.0
    x2: float = 1.0

    def __post_init__(self):
        if self.x1 == self.x2:
            raise ModelError("contrast levels must differ")


def zibm_density(m: float, params: ParameterVector, config: MixtureConfig, x: float) -> float:
    """Mixed density of the mediator: point mass at 0, beta mixture on (0, 1)."""
    params._check_config(config)
    delta = float(params.delta_prob(x)) if config.zero_inflated else 0.0
    if m == 0:
        return delta
    mu = params.component_means(x)
    logs = beta_log_pdf(np.full(mu.shape, m), mu, params.phi)
    return float((1.0 - delta) * np.sum(params.weights * np.exp(logs)))


def table1_truth(n_components: int) -> ParameterVector:
    """Simulation truths with three or two beta components (Setting I)."""
    common = dict(beta=(-5.0, 10.0, 8.0, 1.0, 1.0, 1.0), delta_sd=1.0,
                  gamma=(-1.5, -0.5), phi=10.0)
    if n_components == 3:
        return ParameterVector(alpha0=(0.0, -2.0, -5.0), alpha1=(-0.5, -0.5, -0.5),
                               psi=(0.2, 0.3), **common)
    if n_components == 2:
        return ParameterVector(alpha0=(1.0, -5.0), alpha1=(-0.5, -0.5), psi=(0.3,), **common)
    raise ValueError("only the 2- and 3-component truths are tabulated")
