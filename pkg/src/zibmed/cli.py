"""Command-line front end.

    zibmed fit        --input data.csv --output-dir out
    zibmed effects    --input data.csv --output-dir out --ci bootstrap --boot 200
    zibmed simulate   --setting 1 --output-dir out --seed 3
    zibmed benchmark  --setting 2 --replicates 100 --output-dir out
    zibmed screen     --input taxa.csv --output-dir out --fdr 0.2

Every flag can also be set through an environment variable named
``ZIBMED_<FLAG>`` (upper case, dashes as underscores); flags on the command
line win.  Hard failures exit nonzero and print an error JSON document.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from zibmed.effects import bootstrap_ci, delta_method_ci
from zibmed.em import EmOptions, EstimationError, em_fit
from zibmed.io import (
    InputError,
    export_heatmap,
    ingest_csv,
    write_csv,
    write_dataset_csv,
    write_json,
)
from zibmed.model import Dataset, EffectContrast, MixtureConfig, ModelError
from zibmed.screen import TaxaTable, benchmark_setting1, benchmark_setting2, screen_taxa
from zibmed.simulate import SettingISpec, SettingIISpec, generate_setting1, generate_setting2

log = logging.getLogger("zibmed")

COMMANDS = ("fit", "effects", "simulate", "benchmark", "screen")


@dataclass
class RunConfig:
    command: str
    output_dir: str
    input: str | None = None
    taxon: str | None = None
    k: int = 1
    x1: float = 0.0
    x2: float = 1.0
    ci: str = "delta"
    level: float = 0.95
    fdr: float = 0.2
    seed: int = 0
    boot: int = 200
    replicates: int = 100
    nodes: int = 32
    threads: int = 1
    restarts: int = 5
    max_iter: int = 2000
    setting: int = 1
    n: int | None = None
    components: int = 3
    taxa: int = 10
    zero_model_taxon: int = 1
    false_zero_target: float | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.command in ("fit", "effects", "screen") and not self.input:
            raise ValueError(f"{self.command} needs --input")
        checks = [
            (self.k >= 0, "--k must be >= 0"),
            (0 < self.level < 1, "--level must lie in (0, 1)"),
            (0 < self.fdr < 1, "--fdr must lie in (0, 1)"),
            (self.boot >= 100, "--boot must be >= 100"),
            (self.replicates >= 2, "--replicates must be >= 2"),
            (self.nodes >= 2, "--nodes must be >= 2"),
            (self.threads >= 1, "--threads must be >= 1"),
            (self.restarts >= 1, "--restarts must be >= 1"),
            (self.max_iter >= 1, "--max-iter must be >= 1"),
            (self.setting in (1, 2), "--setting must be 1 or 2"),
            (self.components in (2, 3), "--components must be 2 or 3"),
            (self.taxa >= 3, "--taxa must be >= 3"),
            (self.n is None or self.n >= 10, "--n must be >= 10"),
            (self.ci in ("delta", "bootstrap"), "--ci must be delta or bootstrap"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def options(self) -> EmOptions:
        return EmOptions(max_iterations=self.max_iter, n_restarts=self.restarts,
                         seed=self.seed, quadrature_nodes=self.nodes)

    @property
    def contrast(self) -> EffectContrast:
        return EffectContrast(self.x1, self.x2)

    @property
    def mixture(self) -> MixtureConfig:
        return MixtureConfig(self.k)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

_FLAGS = [
    # flag, type, default, help
    ("--input", str, None, "input CSV"),
    ("--output-dir", str, None, "directory for output artifacts"),
    ("--taxon", str, None, "taxon column to analyse when the input is a taxa table"),
    ("--k", int, 1, "number of beta components minus one"),
    ("--x1", float, 0.0, "reference exposure level"),
    ("--x2", float, 1.0, "comparison exposure level"),
    ("--ci", str, "delta", "interval method: delta or bootstrap"),
    ("--level", float, 0.95, "confidence level"),
    ("--fdr", float, 0.2, "Benjamini-Hochberg false discovery rate"),
    ("--seed", int, 0, "random seed"),
    ("--boot", int, 200, "bootstrap replicates"),
    ("--replicates", int, 100, "benchmark replicates"),
    ("--nodes", int, 32, "Gauss-Legendre nodes"),
    ("--threads", int, 1, "worker processes for screen/benchmark/bootstrap"),
    ("--restarts", int, 5, "EM starts per fit"),
    ("--max-iter", int, 2000, "EM iteration cap"),
    ("--setting", int, 1, "simulation setting (1 or 2)"),
    ("--n", int, None, "subjects per simulated dataset"),
    ("--components", int, 3, "Setting I truth: 2 or 3 beta components"),
    ("--taxa", int, 10, "Setting II: number of taxa"),
    ("--zero-model-taxon", int, 1, "Setting II: taxon with exposure-dependent zeros"),
    ("--false-zero-target", float, None, "Setting II: false-zero share used to tune alpha"),
]


def _env_default(flag: str, typ, default):
    name = "ZIBMED_" + flag.lstrip("-").replace("-", "_").upper()
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return typ(raw)
    except ValueError:
        raise ValueError(f"environment variable {name}={raw!r} is not a valid {typ.__name__}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    for flag, typ, default, text in _FLAGS:
        common.add_argument(flag, type=typ, default=_env_default(flag, typ, default), help=text)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(
        prog="zibmed", description="Mediation analysis with a zero-inflated beta mixture mediator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def parse_config(argv=None) -> tuple[RunConfig, bool]:
    ns = build_parser().parse_args(argv)
    d = vars(ns)
    verbose = d.pop("verbose")
    if d["output_dir"] is None:
        raise ValueError("--output-dir is required")
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg, verbose


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _config_echo(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("extra")
    return d


def _single_dataset(cfg: RunConfig) -> Dataset:
    data = ingest_csv(cfg.input)
    if isinstance(data, TaxaTable):
        if cfg.taxon is None:
            raise InputError("input has several taxa; choose one with --taxon")
        if cfg.taxon not in data.taxa:
            raise InputError(f"taxon {cfg.taxon!r} not in input", 1)
        return data.dataset(data.taxa.index(cfg.taxon))
    return data


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    data = _single_dataset(cfg)
    fit = em_fit(data, cfg.mixture, cfg.options)
    write_json(out / "fit.json", {
        "command": "fit", "config": _config_echo(cfg), "fit": fit.summary(),
        "trajectory": [{"iteration": i, "loglik": ll} for i, ll in fit.trajectory],
    })
    return {"loglik": fit.loglik, "converged": fit.converged, "iterations": fit.n_iterations}


def cmd_effects(cfg: RunConfig, out: Path) -> dict:
    data = _single_dataset(cfg)
    fit = em_fit(data, cfg.mixture, cfg.options)
    if cfg.ci == "delta":
        eff = delta_method_ci(fit, cfg.contrast, cfg.level)
    else:
        eff = bootstrap_ci(data, fit.config, cfg.options, cfg.contrast, cfg.level, cfg.boot,
                           fit=fit, workers=cfg.threads)
    write_json(out / "effects.json", {
        "command": "effects", "config": _config_echo(cfg), "fit": fit.summary(),
        "effects": eff.as_dict(),
    })
    return {name: getattr(eff, name).estimate for name in ("nie1", "nie2", "nie", "nde")}


def _setting1_spec(cfg: RunConfig) -> SettingISpec:
    return SettingISpec.table1(cfg.components, n=cfg.n, seed=cfg.seed)


def _setting2_spec(cfg: RunConfig) -> SettingIISpec:
    kw = dict(n=cfg.n or 200, n_taxa=cfg.taxa, seed=cfg.seed,
              zero_model_taxon=cfg.zero_model_taxon, calibration_taxon=cfg.zero_model_taxon)
    if cfg.zero_model_taxon == 2:
        kw["false_zero_target"] = 0.2
    if cfg.false_zero_target is not None:
        kw["false_zero_target"] = cfg.false_zero_target
    return SettingIISpec(**kw)


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    if cfg.setting == 1:
        spec = _setting1_spec(cfg)
        sim = generate_setting1(spec)
        write_dataset_csv(out / "dataset.csv", sim.dataset)
        truth = {"parameters": spec.truth.as_dict(), "K": spec.config.K,
                 "effects": sim.truth_effects}
    else:
        sim = generate_setting2(_setting2_spec(cfg))
        write_dataset_csv(out / "dataset.csv", sim.taxa)
        truth = {"effects": sim.truth_effects, "meta": sim.meta}
    write_json(out / "truth.json", {
        "command": "simulate", "config": _config_echo(cfg), "setting": cfg.setting,
        "truth": truth, "latent": sim.latent, "true_zero_mask": sim.true_zero_mask,
        "false_zero_mask": sim.false_zero_mask,
    })
    return {"zero_fraction": sim.zero_fraction, "false_zero_share": sim.false_zero_share}


def cmd_benchmark(cfg: RunConfig, out: Path) -> dict:
    if cfg.setting == 1:
        spec = _setting1_spec(cfg)
        m = benchmark_setting1(spec, cfg.replicates, cfg.options, cfg.contrast, cfg.threads)
        write_csv(out / "benchmark.csv",
                  ["quantity", "true", "mean_estimate", "bias", "bias_pct", "mean_se", "cp"],
                  ([p.name, p.true, p.mean_estimate, p.bias, p.bias_pct, p.mean_se, p.coverage]
                   for p in m.parameters))
        summary = {p.name: p.coverage for p in m.parameters if p.name in ("NIE1", "NIE2", "NIE")}
    else:
        spec = _setting2_spec(cfg)
        m = benchmark_setting2(spec, cfg.replicates, MixtureConfig(cfg.k), cfg.options,
                               cfg.fdr, cfg.contrast, cfg.threads)
        write_csv(out / "benchmark.csv",
                  ["family", "recall", "precision", "f1", "tp", "fp", "fn", "tn",
                   "mean_f1_per_replicate"],
                  ([fam, c.recall, c.precision, c.f1, c.tp, c.fp, c.fn, c.tn,
                    c.mean_f1_per_replicate] for fam, c in m.classification.items()))
        summary = {fam: c.f1 for fam, c in m.classification.items()}
    write_json(out / "benchmark.json", {"command": "benchmark", "config": _config_echo(cfg),
                                        "metrics": m.as_dict()})
    return summary


def cmd_screen(cfg: RunConfig, out: Path) -> dict:
    table = ingest_csv(cfg.input)
    if isinstance(table, Dataset):
        table = TaxaTable(table.y, table.x, table.lib_size, table.m[:, None], taxa=["m"])
    res = screen_taxa(table, cfg.mixture, cfg.options, cfg.contrast, cfg.fdr, cfg.threads)
    rows = [r.row() for r in res.rows]
    header = list(rows[0].keys()) if rows else ["taxon"]
    write_csv(out / "screen.csv", header, ([row.get(h) for h in header] for row in rows))
    write_json(out / "screen.json", {
        "command": "screen", "config": _config_echo(cfg),
        "results": [{**r.row(), "effects": r.effects.as_dict() if r.effects else None,
                     "fit": r.fit_summary} for r in res.rows],
    })
    export_heatmap(res, table, out / "heatmap.csv")
    return {fam: res.significant_taxa(fam) for fam in ("nie1", "nie2", "nie")}


HANDLERS = {"fit": cmd_fit, "effects": cmd_effects, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark, "screen": cmd_screen}


def _human(summary: dict) -> str:
    def f(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    return "  ".join(f"{k}={f(v)}" for k, v in summary.items())


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(json.dumps({"resolved_config": _config_echo(cfg)}, sort_keys=True), file=sys.stderr)
    summary = HANDLERS[cfg.command](cfg, out)
    print(f"{cfg.command}: {_human(summary)}")
    return 0


def _error_exit(exc: Exception, code: int, output_dir: str | None) -> int:
    err = exc.as_dict() if isinstance(exc, InputError) else {
        "type": type(exc).__name__, "message": str(exc)}
    doc = {"schema_version": 1, "error": err}
    print(json.dumps(doc))
    if output_dir:
        try:
            Path(output_dir).mkdir(parents=True, exist_ok=True)
            write_json(Path(output_dir) / "error.json", {"error": err})
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    output_dir = None
    try:
        cfg, verbose = parse_config(argv)
        output_dir = cfg.output_dir
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return run(cfg)
    except InputError as exc:
        return _error_exit(exc, 2, output_dir)
    except (ValueError, ModelError, EstimationError, OSError, np.linalg.LinAlgError) as exc:
        return _error_exit(exc, 1, output_dir)


if __name__ == "__main__":
    sys.exit(main())
