"""Marginal per-taxon screening with Benjamini-Hochberg control, and benchmarks.

Every taxon is analysed on its own as the mediator (marginal mediation
effect).  Benjamini-Hochberg adjustment is applied separately within each
effect family (NIE1, NIE2, NIE).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from zibmed.effects import EFFECT_NAMES, EffectEstimates, compute_effects, delta_method_ci
from zibmed.em import EmOptions, EstimationError, em_fit
from zibmed.model import Dataset, EffectContrast, MixtureConfig, ModelError
from zibmed.parallel import ordered_map

log = logging.getLogger(__name__)

FAMILIES = ("nie1", "nie2", "nie")
MIN_POSITIVE = 10
MIN_ZEROS = 2


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

class TaxaTable:
    """Subjects (y, x, library size) with an n x T relative-abundance matrix."""

    def __init__(self, y, x, lib_size, abundance, taxa=None):
        self.y = np.asarray(y, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.lib_size = np.asarray(lib_size)
        self.abundance = np.atleast_2d(np.asarray(abundance, dtype=float))
        n, T = self.abundance.shape
        if not (len(self.y) == len(self.x) == len(self.lib_size) == n):
            raise ModelError("subject columns and abundance rows differ in length")
        self.taxa = list(taxa) if taxa is not None else [f"taxon{j + 1}" for j in range(T)]
        if len(self.taxa) != T or len(set(self.taxa)) != T:
            raise ModelError("taxon names must be unique, one per column")
        a = self.abundance
        if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a >= 1):
            raise ModelError("relative abundances must lie in [0, 1)")
        sums = np.where(a > 0, a, 0.0).sum(axis=1)
        bad = np.flatnonzero(sums > 1.0 + 1e-9)
        if bad.size:
            raise ModelError(f"row {bad[0]} abundances sum to {sums[bad[0]]:.6g} > 1")

    @property
    def n(self) -> int:
        return self.abundance.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.abundance.shape[1]

    def dataset(self, j: int) -> Dataset:
        return Dataset(self.y, self.abundance[:, j], self.x, self.lib_size)


# --------------------------------------------------------------------------
# multiple testing
# --------------------------------------------------------------------------

def bh_adjust(p) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    # m/j >= 1, so the product cannot round below p
    scaled = p[order] * (m / np.arange(1, m + 1))
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def _bh_with_missing(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.full(p.shape, np.nan)
    ok = ~np.isnan(p)
    q[ok] = bh_adjust(p[ok])
    return q


# --------------------------------------------------------------------------
# screening
# --------------------------------------------------------------------------

@dataclass
class TaxonResult:
    taxon: str
    fit_summary: dict | None
    effects: EffectEstimates | None
    p: dict = field(default_factory=dict)
    q: dict = field(default_factory=dict)
    significant: dict = field(default_factory=dict)
    skip_reason: str | None = None

    def row(self) -> dict:
        out = {"taxon": self.taxon, "skip_reason": self.skip_reason}
        for name in EFFECT_NAMES:
            e = getattr(self.effects, name) if self.effects else None
            out[f"{name}"] = e.estimate if e else None
            out[f"se_{name}"] = e.std_error if e else None
        for fam in FAMILIES:
            out[f"p_{fam}"] = self.p.get(fam)
            out[f"q_{fam}"] = self.q.get(fam)
            out[f"sig_{fam}"] = bool(self.significant.get(fam, False))
        if self.fit_summary:
            out["converged"] = self.fit_summary["converged"]
            out["zero_inflated"] = self.fit_summary["zero_inflated"]
        return out


@dataclass
class ScreenResult:
    rows: list[TaxonResult]
    fdr: float
    contrast: EffectContrast

    def significant_taxa(self, family: str = "nie1") -> list[str]:
        return [r.taxon for r in self.rows if r.significant.get(family, False)]

    def by_taxon(self) -> dict[str, TaxonResult]:
        return {r.taxon: r for r in self.rows}


def _fit_taxon(args):
    name, data, config, options, contrast = args
    pos = int(np.sum(data.m > 0))
    zeros = data.n - pos
    if pos < MIN_POSITIVE:
        return TaxonResult(name, None, None, skip_reason=f"only {pos} positive observations")
    cfg = config if zeros >= MIN_ZEROS else MixtureConfig(config.K, zero_inflated=False)
    try:
        fit = em_fit(data, cfg, options)
    except (EstimationError, ModelError, np.linalg.LinAlgError) as exc:
        return TaxonResult(name, None, None, skip_reason=f"fit failed: {exc}")
    eff = delta_method_ci(fit, contrast)
    p = {fam: getattr(eff, fam).p_value for fam in FAMILIES}
    return TaxonResult(name, fit.summary(), eff, p=p)


def screen_taxa(table: TaxaTable, config: MixtureConfig, options: EmOptions | None = None,
                contrast: EffectContrast = EffectContrast(), fdr: float = 0.2,
                workers: int = 1) -> ScreenResult:
    """Fit every taxon marginally and flag mediators at the given FDR.

    Taxa with fewer than 10 positive observations are skipped; taxa with
    fewer than two zeros are fitted without the zero-inflation part (their
    NIE2 is undefined and left out of that family's adjustment).
    """
    if not 0 < fdr < 1:
        raise ValueError("fdr must lie in (0, 1)")
    options = options or EmOptions()
    jobs = [(name, table.dataset(j), config, options, contrast)
            for j, name in enumerate(table.taxa)]
    rows = ordered_map(_fit_taxon, jobs, workers)
    for fam in FAMILIES:
        p = np.array([np.nan if r.p.get(fam) is None else r.p[fam] for r in rows])
        q = _bh_with_missing(p)
        for r, qv in zip(rows, q):
            if r.skip_reason is None:
                r.q[fam] = None if np.isnan(qv) else float(qv)
                r.significant[fam] = bool(not np.isnan(qv) and qv <= fdr)
    return ScreenResult(rows, fdr, contrast)


# --------------------------------------------------------------------------
# benchmarks
# --------------------------------------------------------------------------

@dataclass
class ClassificationMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    mean_f1_per_replicate: float | None = None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def f1(self) -> float | None:
        return f1_score(self.recall, self.precision)

    def as_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "mean_f1_per_replicate": self.mean_f1_per_replicate}


def f1_score(recall, precision):
    if recall is None or precision is None or recall + precision == 0:
        return None
    return 2.0 * recall * precision / (recall + precision)


@dataclass
class ParameterSummary:
    name: str
    true: float
    mean_estimate: float
    bias: float
    bias_pct: float | None
    mean_se: float | None
    coverage: float | None
    n: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchmarkMetrics:
    setting: int
    n_replicates: int
    n_failed: int
    parameters: list[ParameterSummary] = field(default_factory=list)
    classification: dict[str, ClassificationMetrics] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def parameter(self, name: str) -> ParameterSummary:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"setting": self.setting, "n_replicates": self.n_replicates,
                "n_failed": self.n_failed,
                "parameters": [p.as_dict() for p in self.parameters],
                "classification": {k: v.as_dict() for k, v in self.classification.items()},
                "extra": self.extra}


def summarize_replicates(names, truth, estimates, ses, level_z=1.959963984540054):
    """Table-1 style summary; rows of ``estimates``/``ses`` are replicates."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    out = []
    for j, name in enumerate(names):
        t = float(truth[j])
        col = est[:, j]
        mean = float(np.mean(col))
        bias = mean - t
        sej = se[:, j]
        ok = np.isfinite(sej)
        cover = np.abs(col[ok] - t) <= level_z * sej[ok]
        out.append(ParameterSummary(
            name=name, true=t, mean_estimate=mean, bias=bias,
            bias_pct=None if t == 0 else 100.0 * bias / t,
            mean_se=float(np.mean(sej[ok])) if ok.any() else None,
            coverage=float(100.0 * np.mean(cover)) if ok.any() else None,
            n=int(col.size)))
    return out


def _setting1_replicate(args):
    from zibmed.simulate import generate_setting1

    spec, config, options, contrast = args
    sim = generate_setting1(spec)
    try:
        fit = em_fit(sim.dataset, config, options)
    except EstimationError as exc:
        return {"failed": str(exc)}
    if fit.cov_free is None or not fit.converged:
        return {"failed": "no valid information matrix" if fit.cov_free is None
                else "not converged"}
    eff = delta_method_ci(fit, contrast)
    return {
        "effects": [getattr(eff, n).estimate for n in ("nie1", "nie2", "nie")],
        "effect_se": [getattr(eff, n).std_error for n in ("nie1", "nie2", "nie")],
        "params": fit.params_hat.natural_vector(fit.config).tolist(),
        "param_se": fit.std_errors.tolist(),
        "zero_fraction": sim.zero_fraction,
        "false_zero_share": sim.false_zero_share,
        "n_iterations": fit.n_iterations,
        "max_loglik_decrease": fit.max_loglik_decrease,
    }


def benchmark_setting1(spec, n_replicates: int, options: EmOptions | None = None,
                       contrast: EffectContrast = EffectContrast(), workers: int = 1,
                       seeds=None) -> BenchmarkMetrics:
    """Repeated simulate-fit cycles summarised as mean/bias/SE/coverage per quantity."""
    from dataclasses import replace

    from zibmed.simulate import replicate_seed

    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    options = options or EmOptions()
    seeds = seeds if seeds is not None else [replicate_seed(spec.seed, r)
                                            for r in range(n_replicates)]
    jobs = [(replace(spec, seed=s), spec.config, options, contrast) for s in seeds]
    results = ordered_map(_setting1_replicate, jobs, workers)
    ok = [r for r in results if "failed" not in r]
    truth_eff = compute_effects(spec.truth, spec.config, contrast)
    names = ["NIE1", "NIE2", "NIE"] + spec.config.param_names()
    truth = [truth_eff.nie1, truth_eff.nie2, truth_eff.nie] + \
        spec.truth.natural_vector(spec.config).tolist()
    metrics = BenchmarkMetrics(setting=1, n_replicates=n_replicates,
                               n_failed=len(results) - len(ok))
    if ok:
        est = [r["effects"] + r["params"] for r in ok]
        se = [[np.nan if v is None else v for v in r["effect_se"]] + r["param_se"] for r in ok]
        metrics.parameters = summarize_replicates(names, truth, est, se)
        metrics.extra = {
            "zero_fraction": float(np.mean([r["zero_fraction"] for r in ok])),
            "false_zero_share": float(np.mean([r["false_zero_share"] for r in ok])),
            "max_loglik_decrease": float(max(r["max_loglik_decrease"] for r in ok)),
            "mean_iterations": float(np.mean([r["n_iterations"] for r in ok])),
            "failures": [r["failed"] for r in results if "failed" in r],
        }
    return metrics


def _setting2_replicate(args):
    from zibmed.simulate import generate_setting2

    spec, config, options, contrast, fdr = args
    sim = generate_setting2(spec)
    res = screen_taxa(sim.taxa, config, options, contrast, fdr)
    labels = {fam: [sim.truth_effects[t]["positive"][fam] for t in sim.taxa.taxa]
              for fam in FAMILIES}
    flags = {fam: [r.significant.get(fam, False) for r in res.rows] for fam in FAMILIES}
    skipped = [r.taxon for r in res.rows if r.skip_reason]
    return {"labels": labels, "flags": flags, "skipped": skipped,
            "alpha01": sim.meta["alpha01"],
            "calibration": sim.meta["alpha01_calibration"],
            "zero_fraction": float(np.mean(sim.taxa.abundance == 0))}


def benchmark_setting2(spec, n_replicates: int, config: MixtureConfig = MixtureConfig(0),
                       options: EmOptions | None = None, fdr: float = 0.2,
                       contrast: EffectContrast = EffectContrast(), workers: int = 1,
                       seeds=None) -> BenchmarkMetrics:
    """Recall/precision/F1 of BH-screened mediators against generator truth labels."""
    from dataclasses import replace

    from zibmed.simulate import replicate_seed

    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    options = options or EmOptions()
    seeds = seeds if seeds is not None else [replicate_seed(spec.seed, r)
                                            for r in range(n_replicates)]
    jobs = [(replace(spec, seed=s), config, options, contrast, fdr) for s in seeds]
    results = ordered_map(_setting2_replicate, jobs, workers)
    metrics = BenchmarkMetrics(setting=2, n_replicates=n_replicates, n_failed=0)
    for fam in FAMILIES:
        tp = fp = fn = tn = 0
        f1s = []
        for r in results:
            lab = np.array(r["labels"][fam], dtype=bool)
            flg = np.array(r["flags"][fam], dtype=bool)
            a, b_, c, d = (int(np.sum(lab & flg)), int(np.sum(~lab & flg)),
                           int(np.sum(lab & ~flg)), int(np.sum(~lab & ~flg)))
            tp, fp, fn, tn = tp + a, fp + b_, fn + c, tn + d
            rec = a / (a + c) if a + c else None
            prec = a / (a + b_) if a + b_ else None
            f1s.append(f1_score(rec, prec) or 0.0)
        metrics.classification[fam] = ClassificationMetrics(
            tp, fp, fn, tn, mean_f1_per_replicate=float(np.mean(f1s)))
    metrics.extra = {
        "detection_rate": {fam: np.mean([r["flags"][fam] for r in results], axis=0).tolist()
                           for fam in FAMILIES},
        "zero_fraction": float(np.mean([r["zero_fraction"] for r in results])),
        "alpha01": [r["alpha01"] for r in results],
        "calibration_failures": int(sum(not r["calibration"]["ok"] for r in results)),
        "skipped": [r["skipped"] for r in results],
    }
    return metrics
