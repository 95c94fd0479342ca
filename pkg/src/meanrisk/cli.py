"""Command-line front end.

Subcommands: ``synth``, ``optimize``, ``backtest``, ``density``,
``riskmodel``.  Settings come from flags, a ``--config`` key-value file
and built-in defaults, in that order of precedence.  Every output file
carries a provenance header (tool version, command, seed and a hash of
the resolved configuration) and no timestamps, so identical inputs give
byte-identical outputs.

Exit codes: 0 success, 1 invalid input or lookahead, 2 numerical
failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import sweep
from .density import volatility_densities
from .errors import LookaheadError, MeanRiskError, ModelError, NumericalError, ValidationError
from .long_only import diversification_report, fano_long_only, general_long_only, sharpe_long_only
from .long_short import StrategyConfig, _parse_bool, load_strategy_config
from .market_data import (
    GeneratorConfig,
    ReturnsPanel,
    moving_average_returns,
    read_kv_file,
    read_matrix_csv,
    read_panel_csv,
    read_vector_csv,
    rolling_volatility,
    synthesize_panel,
    write_matrix_csv,
    write_panel_csv,
    write_vector_csv,
    drop_zero_volatility,
)
from .ratio_optimizer import RatioSpec, _jsonable, evaluate_portfolio, maximize
from .risk_models import DenseCovariance, build_statistical_model, read_risk_model, write_risk_model

log = logging.getLogger("meanrisk")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# ----------------------------------------------------------------------
# option tables: dest -> (type, default, help)
# ----------------------------------------------------------------------

_DATA_OPTS = {
    "input": (str, None, "returns CSV (tickers x dates, most recent first)"),
    "volumes": (str, None, "dollar volume CSV matching --input"),
    "intraday": (str, None, "open-to-close returns CSV matching --input"),
    "open_prices": (str, None, "open price CSV matching --input"),
    "generator": (str, None, "generator key-value file for a synthetic panel"),
    "n": (int, 500, "synthetic universe size"),
    "t": (int, 504, "synthetic history length"),
    "seed": (int, 0, "random seed for the synthetic panel"),
}

_COMMAND_OPTS = {
    "synth": {},
    "optimize": {
        "ratio": (str, "fano", "sharpe | fano | power | exp"),
        "p": (float, None, "exponent for --ratio power"),
        "xi": (float, None, "rate for --ratio exp"),
        "long_only": (_parse_bool, False, "iterative long-only relaxation"),
        "market_mode": (str, "auto", "keep | remove | auto (remove when long-only)"),
        "ma_days": (int, 21, "moving-average length for expected returns"),
        "window": (int, None, "risk-model window (default: whole panel)"),
        "expected": (str, None, "expected returns CSV (ticker,value); needs --covariance or --riskmodel"),
        "covariance": (str, None, "dense covariance CSV"),
        "riskmodel": (str, None, "risk model file written by 'riskmodel'"),
    },
    "backtest": {
        "strategy": (str, None, "strategy key-value file"),
        "n_opt": (int, 1, "series truncation order"),
        "b_hat": (float, 1.0, "series coefficient"),
        "constraints": (str, "dollar_neutral", "dollar_neutral | none | constraint CSV"),
        "bounds_fraction": (float, 0.01, "|H_i| cap as a fraction of ADDV"),
        "ma_days": (int, 5, "moving-average length of the reversal signal"),
        "risk_window": (int, 21, "statistical risk model window"),
        "remove_market_mode": (_parse_bool, False, "drop the market mode from the risk model"),
        "investment": (float, 2e7, "dollars invested"),
        "sweep": (_parse_bool, False, "run n_opt = 1..5 and write a summary table"),
    },
    "density": {
        "window": (int, 21, "volatility window"),
        "points": (int, 512, "grid points per density"),
    },
    "riskmodel": {
        "window": (int, None, "window (default: whole panel)"),
        "remove_market_mode": (_parse_bool, False, "fold the market mode into specific risk"),
        "truncate": (_parse_bool, False, "floor the eRank instead of rounding"),
    },
}

_FLAG_ONLY = {"long_only", "remove_market_mode", "truncate", "sweep"}


def _options(cmd: str) -> dict:
    return {**_DATA_OPTS, **_COMMAND_OPTS[cmd]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meanrisk", description="Mean-to-risk ratio portfolios and backtests.")
    parser.add_argument("--version", action="version", version=f"meanrisk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "write a synthetic panel",
        "optimize": "Sharpe / Fano / f(V) portfolio for one date",
        "backtest": "intraday backtest of the multiply-optimized strategy",
        "density": "kernel densities of sigma and log sigma",
        "riskmodel": "build and save a statistical risk model",
    }
    for cmd, opts in ((c, _options(c)) for c in _COMMAND_OPTS):
        p = sub.add_parser(cmd, help=helps[cmd])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key-value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        for dest, (typ, default, text) in opts.items():
            flag = "--" + dest.replace("_", "-")
            if dest in _FLAG_ONLY:
                p.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS, help=text)
            else:
                shown = f" (default {default})" if default is not None else ""
                p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=text + shown)
    return parser


def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags; unknown config keys are rejected."""
    opts = _options(cmd)
    cfg = {dest: default for dest, (_, default, _) in opts.items()}
    if getattr(args, "config", None):
        raw = read_kv_file(args.config)
        unknown = sorted(set(k.replace("-", "_") for k in raw) - set(opts))
        if unknown:
            raise ValidationError(f"unknown config keys for '{cmd}': {', '.join(unknown)}")
        for key, value in raw.items():
            dest = key.replace("-", "_")
            try:
                cfg[dest] = opts[dest][0](value)
            except ValueError as exc:
                raise ValidationError(f"config key {key}: {exc}") from exc
    for dest in opts:
        if hasattr(args, dest):
            cfg[dest] = getattr(args, dest)
    return cfg


# ----------------------------------------------------------------------
# provenance and output helpers
# ----------------------------------------------------------------------

def provenance(cmd: str, cfg: dict) -> dict:
    canon = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    synthetic = cfg.get("input") is None and cfg.get("expected") is None
    return {
        "tool": "meanrisk",
        "version": __version__,
        "command": cmd,
        "seed": cfg.get("seed") if synthetic else None,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest()[:16],
    }


def _header_line(prov: dict) -> str:
    return "provenance " + json.dumps(prov, sort_keys=True, separators=(",", ":"))


def _write_json(path: Path, prov: dict, body: dict) -> Path:
    path.write_text(json.dumps(_jsonable({"provenance": prov, **body}), indent=2, sort_keys=True,
                               allow_nan=False) + "\n")
    return path


def load_panel(cfg: dict) -> ReturnsPanel:
    if cfg.get("input"):
        return read_panel_csv(cfg["input"], cfg.get("volumes"), cfg.get("intraday"), cfg.get("open_prices"))
    if cfg.get("generator"):
        spec = GeneratorConfig.from_mapping(read_kv_file(cfg["generator"]))
        return synthesize_panel(spec=spec, n=cfg["n"], t=cfg["t"], seed=cfg["seed"])
    return synthesize_panel(n=cfg["n"], t=cfg["t"], seed=cfg["seed"])


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path, prov: dict) -> list[Path]:
    panel = load_panel(cfg)
    paths = list(write_panel_csv(panel, out, header_comment=_header_line(prov)).values())
    return paths


def _ratio_spec(cfg: dict) -> RatioSpec:
    kind = cfg["ratio"]
    if kind == "sharpe":
        return RatioSpec.sharpe()
    if kind == "fano":
        return RatioSpec.fano()
    if kind == "power":
        if cfg["p"] is None:
            raise ValidationError("--ratio power needs --p")
        return RatioSpec.power(cfg["p"])
    if kind == "exp":
        if cfg["xi"] is None:
            raise ValidationError("--ratio exp needs --xi")
        return RatioSpec.exp(cfg["xi"])
    raise ValidationError(f"unknown ratio {kind!r}")


def _optimize_inputs(cfg: dict):
    """(tickers, expected returns, risk model, sigma or None)."""
    if cfg["expected"]:
        tickers, e = read_vector_csv(cfg["expected"])
        if cfg["covariance"]:
            rows, cols, c = read_matrix_csv(cfg["covariance"])
            if rows != tickers or cols != tickers:
                raise ValidationError("covariance labels do not match the expected-returns tickers")
            model = DenseCovariance(c)
        elif cfg["riskmodel"]:
            model, _ = read_risk_model(cfg["riskmodel"])
            if model.n != len(tickers):
                raise ValidationError("risk model size does not match the expected returns")
        else:
            raise ValidationError("--expected needs --covariance or --riskmodel")
        return tickers, e, model, np.sqrt(model.diag())
    panel = load_panel(cfg)
    window = cfg["window"] or panel.t
    panel, prof = drop_zero_volatility(panel, rolling_volatility(panel, window))
    mode = cfg["market_mode"]
    if mode not in ("keep", "remove", "auto"):
        raise ValidationError("--market-mode must be keep, remove or auto")
    remove = mode == "remove" or (mode == "auto" and cfg["long_only"])
    model = build_statistical_model(panel, remove_market_mode=remove, window=window)
    e = moving_average_returns(panel, cfg["ma_days"]).values
    return list(panel.tickers), e, model, prof.sigma


def cmd_optimize(cfg: dict, out: Path, prov: dict) -> list[Path]:
    spec = _ratio_spec(cfg)
    tickers, e, model, sigma = _optimize_inputs(cfg)
    body: dict = {"ratio": spec.to_dict(), "long_only": bool(cfg["long_only"])}
    if cfg["long_only"]:
        if spec.kind == "fano":
            sol = fano_long_only(model, e)
        elif spec.kind == "sharpe":
            sol = sharpe_long_only(model, e)
        else:
            sol = general_long_only(model, e, spec)
            body["experimental"] = True
        w = sol.weights
        body["active_set"] = sol.active_set.to_dict()
        body["history"] = sol.history
        fano, sharpe = fano_long_only(model, e), sharpe_long_only(model, e)
        body["diversification"] = diversification_report(fano, sharpe, sigma, e)
        pair = {"sharpe": sharpe.weights, "fano": fano.weights}
    else:
        sol = maximize(model, e, spec)
        w = sol.weights
        body["solution"] = sol.to_dict()
        pair = {"sharpe": maximize(model, e, RatioSpec.sharpe()).weights,
                "fano": maximize(model, e, RatioSpec.fano()).weights}
    body["stats"] = evaluate_portfolio(w, model, e).to_dict()

    paths = []
    path = out / "weights.csv"
    write_vector_csv(path, tickers, w, name="weight", header_comment=_header_line(prov))
    paths.append(path)
    paths.append(_write_json(out / "solution.json", prov, body))
    stats = {k: evaluate_portfolio(v, model, e) for k, v in pair.items()}
    cols = ["E", "V", "S", "F", "kappa", "n_nonzero"]
    table = [[*(getattr(s, c) for c in cols[:-1]), float(np.sum(pair[k] != 0))] for k, s in stats.items()]
    path = out / "comparison.csv"
    write_matrix_csv(path, list(stats), cols, table, corner="ratio", header_comment=_header_line(prov))
    paths.append(path)
    return paths


def _strategy_config(cfg: dict, args) -> StrategyConfig:
    keys = ["n_opt", "b_hat", "constraints", "bounds_fraction", "ma_days", "risk_window", "remove_market_mode"]
    base = load_strategy_config(cfg["strategy"]).__dict__ if cfg["strategy"] else {}
    merged = {k: cfg[k] for k in keys}
    # values from the strategy file beat defaults but not explicit flags or --config
    explicit = set()
    if getattr(args, "config", None):
        explicit |= {k.replace("-", "_") for k in read_kv_file(args.config)}
    explicit |= {k for k in keys if hasattr(args, k)}
    for k, v in base.items():
        if k not in explicit:
            merged[k] = v
    return StrategyConfig(**merged)


def cmd_backtest(cfg: dict, out: Path, prov: dict, args=None) -> list[Path]:
    panel = load_panel(cfg)
    scfg = _strategy_config(cfg, args)
    head = _header_line(prov)
    paths = []
    if cfg["sweep"]:
        rows, reports = sweep(panel, scfg, investment=cfg["investment"])
        for rep in reports:
            k = rep.meta["n_opt"]
            paths.append(rep.write_json(out / f"report_nopt{k}.json", prov))
            paths.append(rep.write_csv(out / f"daily_nopt{k}.csv", head))
        table = [[float("nan") if r[c] is None else r[c] for c in ("roc", "sr", "cps")] for r in rows]
        path = out / "summary.csv"
        write_matrix_csv(path, [str(r["n_opt"]) for r in rows], ["ROC", "SR", "CPS"],
                         np.array(table, dtype=float), corner="n_opt", header_comment=head)
        paths.append(path)
        paths.append(_write_json(out / "summary.json", prov, {"rows": rows}))
        return paths
    rows, reports = sweep(panel, scfg, n_opts=(scfg.n_opt,), investment=cfg["investment"])
    rep = reports[0]
    paths.append(rep.write_json(out / "report.json", prov))
    paths.append(rep.write_csv(out / "daily.csv", head))
    return paths


def cmd_density(cfg: dict, out: Path, prov: dict) -> list[Path]:
    panel = load_panel(cfg)
    prof = rolling_volatility(panel, cfg["window"])
    curves = volatility_densities(prof, cfg["points"])
    head = _header_line(prov)
    paths = []
    for name, curve in curves.items():
        path = out / f"density_{name}.csv"
        write_matrix_csv(path, [repr(float(x)) for x in curve.x], ["density"], curve.density[:, None],
                         corner="x", header_comment=head)
        paths.append(path)
    body = {name: c.summary() for name, c in curves.items()}
    body["n"] = int(prof.kept.size)
    body["sigma_star"] = prof.sigma_star()
    paths.append(_write_json(out / "density.json", prov, body))
    return paths


def cmd_riskmodel(cfg: dict, out: Path, prov: dict) -> list[Path]:
    panel = load_panel(cfg)
    window = cfg["window"] or panel.t
    panel, _ = drop_zero_volatility(panel, rolling_volatility(panel, window))
    model = build_statistical_model(panel, remove_market_mode=cfg["remove_market_mode"], window=window,
                                    truncate=cfg["truncate"])
    path = out / "riskmodel.txt"
    write_risk_model(path, model)
    text = path.read_text()
    path.write_text(f"# {_header_line(prov)}\n" + text)
    body = {
        "n": model.n,
        "k": model.k,
        "erank": model.erank,
        "market_mode_removed": model.market_mode_removed,
        "market_eigenvalue": model.market_eigenvalue,
        "eigenvalues": model.eigenvalues,
        "tickers": list(panel.tickers),
    }
    return [path, _write_json(out / "riskmodel.json", prov, body)]


_COMMANDS = {
    "synth": cmd_synth,
    "optimize": cmd_optimize,
    "backtest": cmd_backtest,
    "density": cmd_density,
    "riskmodel": cmd_riskmodel,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "verbose", False):
            logging.getLogger().setLevel(logging.INFO)
        cmd = args.command
        cfg = resolve_config(cmd, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        prov = provenance(cmd, cfg)
        fn = _COMMANDS[cmd]
        paths = fn(cfg, out, prov, args) if cmd == "backtest" else fn(cfg, out, prov)
        for p in paths:
            print(p)
        return EXIT_OK
    except (ValidationError, LookaheadError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MeanRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
