"""Command-line interface: ``sigalloc <command> [options]``.

Exit status is 0 on success, 2 on bad usage and 1 on any runtime failure,
in which case the error class name is printed to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidConfig, SigallocError

USAGE_EXIT, FAILURE_EXIT = 2, 1


class UsageError(Exception):
    pass


def _pairs(values: list[str]) -> dict[str, str]:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _add_config_args(p: argparse.ArgumentParser, seed: bool) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[], help="override a config key")
    p.add_argument("--data", help="price CSV (overrides the 'data' key)")
    p.add_argument("--out", help="run directory (overrides the 'out_dir' key)")
    if seed:
        p.add_argument("--seed", type=_seeds, required=True, help="seed, or comma-separated seed list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigalloc", description="Signature-informed allocation pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sig", help="signatures and signed areas of a price CSV")
    p.add_argument("csv")
    p.add_argument("--pair", help="two asset ids, 'A,B'; omit for the full signed-area matrix")
    p.add_argument("--level", type=int, default=2, help="cross-signature level for --pair")
    p.add_argument("--window", type=int, default=0, help="use only the last N rows")
    p.add_argument("--out", help="directory for signed_area.csv / signature.json")

    p = sub.add_parser("synth", help="generate a synthetic panel with planted lead-lag pairs")
    p.add_argument("--assets", type=int, default=8)
    p.add_argument("--length", type=int, default=3000)
    p.add_argument("--pairs", default="0:1,2:3,4:5", help="leader:lagger list, e.g. '0:1,2:3'")
    p.add_argument("--lag", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("--vol", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", default="2000-01-03")
    p.add_argument("--output", required=True, help="CSV path to write")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _add_config_args(p, seed=True)

    p = sub.add_parser("backtest", help="backtest baselines and optionally a trained model")
    _add_config_args(p, seed=False)
    p.add_argument("--checkpoint", help="trained model checkpoint to include as strategy 'sit'")
    p.add_argument("--strategies", default="ewp,gmv,cvar,hrp", help="baseline strategies to run")

    p = sub.add_parser("ablate", help="train and backtest module-drop variants over seeds")
    _add_config_args(p, seed=True)
    p.add_argument("--variants", default="full,no_cvar,no_asset_attn,no_bias,no_gate")

    p = sub.add_parser("sweep", help="temperature x cost grid of mean/std Sharpe")
    _add_config_args(p, seed=True)

    p = sub.add_parser("gradcheck", help="run all finite-difference checks")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    return parser


# --- helpers -------------------------------------------------------------------------
def _load_config(args):
    from .config import RunConfig

    overrides = _pairs(args.set)
    if args.data:
        overrides["data"] = args.data
    if args.out:
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None):
        overrides["seeds"] = ",".join(map(str, args.seed))
    return RunConfig.load(args.config, overrides)


def _prepare(args):
    """Resolve config, load data and write the resolved config to the run directory."""
    from .market import ingest_csv

    cfg = _load_config(args)
    if not cfg.data:
        raise InvalidConfig("no price data: set 'data' or pass --data")
    panel = ingest_csv(cfg.data)
    sit = cfg.sit_config(panel.n_assets)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.replace(n_assets=sit.n_assets).to_text())
    return cfg, sit, panel, out


def _dataset(cfg, sit, panel):
    from .market import make_dataset

    return make_dataset(panel, sit, cfg.split_spec(), cfg.train_stride)


def _summary(rep) -> str:
    def fmt(x):
        return "undefined" if x is None else f"{x:.4f}"

    tag = rep.meta.get("variant", rep.meta.get("strategy", "?"))
    seed = f" seed={rep.meta['seed']}" if "seed" in rep.meta else ""
    return (f"{tag}{seed} c={rep.cost.c_bps:g}bps sharpe={fmt(rep.sharpe)} sortino={fmt(rep.sortino)} "
            f"mdd={rep.mdd:.4f} wealth={rep.final_wealth:.4f} turnover={rep.turnover.sum():.3f}")


# --- commands ------------------------------------------------------------------------
def cmd_sig(args) -> int:
    from .market import ingest_csv
    from .sigcore import PiecewisePath, cross_signature, signed_area_matrix

    panel = ingest_csv(args.csv)
    logp = np.log(panel.prices[-args.window:] if args.window else panel.prices)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.pair:
        names = [s.strip() for s in args.pair.split(",")]
        if len(names) != 2 or any(n not in panel.assets for n in names):
            raise InvalidConfig(f"--pair needs two asset ids from {', '.join(panel.assets)}")
        j, l = (panel.assets.index(n) for n in names)
        area = float(signed_area_matrix(logp[:, [j, l]])[0, 1])
        sig = cross_signature(PiecewisePath.from_values(logp[:, j]), PiecewisePath.from_values(logp[:, l]),
                              args.level)
        print(f"signed_area({names[0]},{names[1]}) = {area:.10g}")
        relation = "leads" if area > 0 else "lags" if area < 0 else "shows no lead-lag with"
        print(f"{names[0]} {relation} {names[1]} (n={len(logp)} rows)")
        if out:
            (out / "signature.json").write_text(json.dumps(
                {"pair": names, "level": args.level, "signed_area": area, "coords": sig.coords.tolist()}) + "\n")
        return 0
    areas = signed_area_matrix(logp)
    width = max(len(a) for a in panel.assets)
    print(" " * width + "".join(f"{a:>12}" for a in panel.assets))
    for a, row in zip(panel.assets, areas):
        print(f"{a:<{width}}" + "".join(f"{v:12.4g}" for v in row))
    if out:
        with open(out / "signed_area.csv", "w") as fh:
            fh.write("asset," + ",".join(panel.assets) + "\n")
            for a, row in zip(panel.assets, areas):
                fh.write(a + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return 0


def cmd_synth(args) -> int:
    from .market import synth_market

    try:
        pairs = [tuple(int(i) for i in p.split(":")) for p in args.pairs.split(",") if p.strip()]
    except ValueError:
        raise InvalidConfig(f"--pairs must look like '0:1,2:3', got {args.pairs!r}") from None
    panel = synth_market(args.assets, args.length, pairs, args.noise, args.seed, lag=args.lag, vol=args.vol,
                         start=args.start)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    panel.to_csv(args.output)
    print(f"wrote {panel.n_obs} rows x {panel.n_assets} assets to {args.output}")
    return 0


def cmd_train(args) -> int:
    from .model import save_params
    from .objective import train

    cfg, sit, panel, out = _prepare(args)
    if len(cfg.seeds) != 1:
        raise InvalidConfig("train takes exactly one seed")
    data = _dataset(cfg, sit, panel)
    with open(out / "train.log", "w") as log:
        log.write("epoch\ttrain_objective\tval_objective\tgamma\twall_time\n")
        result = train(data, sit, cfg.seeds[0], cfg.train_settings(), log=log)
    save_params(result.params, out / "model.ckpt")
    print(f"trained {result.epochs_run} epochs, best epoch {result.best_epoch}; wrote {out / 'model.ckpt'}")
    return 0


def cmd_backtest(args) -> int:
    from .backtest import CostModel, SitStrategy, baseline_strategies, run, write_jsonl
    from .model import load_params

    cfg, sit, panel, out = _prepare(args)
    data = _dataset(cfg, sit, panel)
    available = baseline_strategies(sit, cfg.cov_window or None)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [n for n in names if n not in available]
    if unknown:
        raise InvalidConfig(f"unknown strategies {unknown}; choose from {sorted(available)}")
    strategies = [available[n] for n in names]
    if args.checkpoint:
        strategies.append(SitStrategy(load_params(args.checkpoint), sit))
    reports = [run(s, data.test_panel, sit, CostModel(cfg.cost_bps), cfg.eval_stride) for s in strategies]
    write_jsonl(reports, out / "reports.jsonl", append=False)
    for rep in reports:
        print(_summary(rep))
    return 0


def cmd_ablate(args) -> int:
    from .backtest import CostModel, ablate, write_jsonl
    from .model import VARIANTS

    cfg, sit, panel, out = _prepare(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise InvalidConfig(f"unknown variants {bad}; choose from {', '.join(VARIANTS)}")
    data = _dataset(cfg, sit, panel)
    path = out / "ablation.jsonl"
    path.write_text("")
    for v in variants:
        reports = ablate(v, data, sit, cfg.seeds, CostModel(cfg.cost_bps), cfg.eval_stride, cfg.train_settings())
        write_jsonl(reports, path)
        sharpes = [r.sharpe for r in reports if r.sharpe is not None]
        mean = f"{np.mean(sharpes):.4f}" if sharpes else "undefined"
        print(f"{v}: mean sharpe {mean} over {len(sharpes)} seed(s)")
    return 0


def cmd_sweep(args) -> int:
    from .backtest import sweep, write_sweep_csv

    cfg, sit, panel, out = _prepare(args)
    data = _dataset(cfg, sit, panel)
    res = sweep(cfg.tau_grid, cfg.cost_grid, data, sit, cfg.seeds, cfg.eval_stride, cfg.train_settings(),
                retrain=cfg.sweep_mode == "retrain")
    write_sweep_csv(res.cells, out / "sweep.csv")
    for c in res.cells:
        print(f"tau={c.tau:g} c={c.c_bps:g}bps sharpe {c.sharpe_mean:.4f} +- {c.sharpe_std:.4f} "
              f"wealth {c.wealth_mean:.4f} +- {c.wealth_std:.4f}")
    print(f"wrote {len(res.cells)} cells to {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return FAILURE_EXIT if failed else 0


COMMANDS = {
    "sig": cmd_sig, "synth": cmd_synth, "train": cmd_train, "backtest": cmd_backtest,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0) and USAGE_EXIT
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sigalloc: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (SigallocError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
