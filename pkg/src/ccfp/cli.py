"""Command-line entry point: ``ccfp {train,eval,sweep,diagnose,compare}``.

Exit codes: 0 success, 2 configuration or usage error, 3 failed run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import harness, plots
from .backbone import accuracy, build_dual_model, build_stream, load_checkpoint, save_checkpoint
from .data import (
    CMNIST_CORRELATIONS,
    RMNIST_ANGLES,
    DomainDataset,
    cmnist_mini,
    load_idx,
    rmnist_mini,
    split_domains,
)
from .errors import CCFPError, ConfigError
from .trainer import TrainConfig, init_rng

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 2, 3

log = logging.getLogger("ccfp")

# flag dest -> TrainConfig field
_CFG_FLAGS = ("lr", "batch_size", "steps", "lambda_dis", "lambda_sem", "apply_prob", "sem_variant",
              "seed", "eval_every", "widths", "grad_clip", "dtype", "bn_recalibration")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", default="rmnist-mini",
                   help="rmnist-mini, cmnist-mini, or idx:<images>,<labels>[,rotated|colored]")
    g.add_argument("--target-domain", type=int, default=None,
                   help="held-out domain id (angle, or correlation in percent); default: the last domain")
    g.add_argument("--n-per-domain", type=int, default=2000)
    g.add_argument("--data-seed", type=int, default=0, help="seed for dataset generation")
    g = p.add_argument_group("training")
    g.add_argument("--algorithm", default="ccfp", choices=harness.ALGORITHMS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=5000)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lambda-dis", type=float, default=1.0)
    g.add_argument("--lambda-sem", type=float, default=1.0)
    g.add_argument("--apply-prob", type=float, default=0.5)
    g.add_argument("--sem-variant", default="classifier", choices=("classifier", "feature"))
    g.add_argument("--eval-every", type=int, default=300)
    g.add_argument("--widths", type=_int_list, default=[32, 32, 64, 64])
    g.add_argument("--grad-clip", type=float, default=None)
    g.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    g.add_argument("--bn-recalibration", type=int, default=1024,
                   help="training examples for re-estimating inference BN statistics at checkpoints (0 = off)")
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; explicit flags win")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccfp", description="Dual-stream feature-perturbation training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and evaluate the selected checkpoint")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the target domain")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("sweep", help="random hyperparameter search over seeds")
    _add_common(p)
    p.add_argument("--n-trials", type=int, default=20)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--search-seed", type=int, default=0)
    p.add_argument("--lambda-range", type=float, nargs=2, default=[0.1, 10.0], metavar=("LO", "HI"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("diagnose", help="dump per-domain feature statistics")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="default: a freshly initialized model")
    p.add_argument("--sites", type=_int_list, default=None, help="block indices; default: the tap sites")

    p = sub.add_parser("compare", help="side-by-side table of several algorithms")
    _add_common(p)
    p.add_argument("--algorithms", default="erm,ccfp,mixstyle_dual,dsu_dual")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--target-domains", type=_int_list, default=None,
                   help="evaluate each as the held-out domain; default: --target-domain only")
    return parser


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
    known = vars(args)
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    # a second parse with file values as defaults lets explicit flags win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


# -- helpers ----------------------------------------------------------------

def load_dataset(args) -> DomainDataset:
    source = args.dataset
    if args.n_per_domain < 1:
        raise ConfigError("--n-per-domain must be >= 1")
    if source == "rmnist-mini":
        return rmnist_mini(args.n_per_domain, RMNIST_ANGLES, seed=args.data_seed)
    if source == "cmnist-mini":
        return cmnist_mini(args.n_per_domain, CMNIST_CORRELATIONS, seed=args.data_seed)
    if source.startswith("idx:"):
        parts = source[4:].split(",")
        variant = "rotated"
        if len(parts) == 3:
            variant = parts.pop()
        if len(parts) != 2 or variant not in ("rotated", "colored"):
            raise ConfigError("idx dataset must be idx:<images>,<labels>[,rotated|colored]")
        base = load_idx(*parts)
        if variant == "rotated":
            return rmnist_mini(args.n_per_domain, RMNIST_ANGLES, seed=args.data_seed, base=base)
        return cmnist_mini(args.n_per_domain, CMNIST_CORRELATIONS, seed=args.data_seed, base=base)
    raise ConfigError(f"unknown dataset {source!r}")


def target_of(args, ds: DomainDataset) -> int:
    target = ds.domain_ids[-1] if args.target_domain is None else args.target_domain
    if target not in ds.domain_ids:
        raise ConfigError(f"unknown target domain {target}; available {ds.domain_ids}")
    return target


def train_config(args) -> TrainConfig:
    values = {k: getattr(args, k) for k in _CFG_FLAGS}
    values["widths"] = tuple(values["widths"])
    if len(values["widths"]) != 4:
        raise ConfigError("--widths needs four block widths")
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _header(args, ds: DomainDataset, target: int) -> dict:
    return {"command": args.command, "dataset": args.dataset, "n_per_domain": args.n_per_domain,
            "data_seed": args.data_seed, "target_domain": target, "domain_ids": ds.domain_ids}


def _print_rows(rows: Sequence[dict], fields: Sequence[str]) -> None:
    print(",".join(fields))
    for r in rows:
        print(",".join("" if r[f] is None else str(r[f]) for f in fields))


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    ds = load_dataset(args)
    target = target_of(args, ds)
    cfg = train_config(args)
    result = harness.run_trial(args.algorithm, cfg, ds, target, keep_model=True)
    out = args.out
    write_json(out / "trial.json", result.to_dict())
    metrics = {**_header(args, ds, target), "trial": result.to_dict(include_timing=False)}
    write_json(out / "metrics.json", metrics)
    if not result.ok:
        log.error("training failed: %s", result.error)
        return EXIT_FAILED
    result.log.write_jsonl(out / "trainlog.jsonl")
    save_checkpoint(out / "checkpoint.npz", result.model,
                    extra={"algorithm": args.algorithm, "selected_step": result.selected_step,
                           "train_config": cfg.to_dict()})
    if not args.no_plots:
        plots.plot_train_log(result.log, out / "trainlog.png", title=f"{args.algorithm}, target {target}")
    print("algorithm,seed,target_domain,selected_step,selected_val_acc,target_acc")
    print(f"{args.algorithm},{cfg.seed},{target},{result.selected_step},"
          f"{result.selected_val_acc:.4f},{result.target_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args)
    target = target_of(args, ds)
    splits = split_domains(ds, target, seed=args.seed)
    dtype = np.dtype(meta["dtype"])
    metrics = {**_header(args, ds, target), "checkpoint": str(args.checkpoint),
               "source_val_acc": accuracy(model, splits.source_val.x.astype(dtype), splits.source_val.y),
               "target_test_acc": accuracy(model, splits.target_test.x.astype(dtype), splits.target_test.y)}
    write_json(args.out / "metrics.json", metrics)
    print("source_val_acc,target_test_acc")
    print(f"{metrics['source_val_acc']:.4f},{metrics['target_test_acc']:.4f}")
    return EXIT_OK


def _summary_rows(table) -> List[dict]:
    return [{"algorithm": alg, "target_domain": d, "mean": agg.mean, "stderr": agg.stderr, "n": agg.n,
             "n1_flag": agg.single, "formatted": agg.format()} for (alg, d), agg in table.items()]


_SUMMARY_FIELDS = ("algorithm", "target_domain", "mean", "stderr", "n", "n1_flag", "formatted")


def cmd_sweep(args) -> int:
    ds = load_dataset(args)
    target = target_of(args, ds)
    base = train_config(args)
    lo, hi = args.lambda_range
    space = harness.SearchSpace(lr_range=(base.lr, base.lr), batch_sizes=(base.batch_size,),
                                lambda_dis_range=(lo, hi), lambda_sem_range=(lo, hi),
                                apply_probs=(base.apply_prob,))
    search = harness.random_search(space, args.n_trials, args.seeds, args.algorithm, ds, target,
                                   base=base, search_seed=args.search_seed, workers=args.workers)
    out = args.out
    rows = harness.results_rows(search.results)
    harness.write_csv(out / "results.csv", rows, harness.RESULT_FIELDS)
    with (out / "trials.jsonl").open("w") as fh:
        for r in search.results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    summary: Dict = {"best_per_seed": {str(s): r.trial for s, r in search.best_per_seed.items()}}
    if search.best_per_seed:
        table = harness.aggregate_results(search.results)
        srows = _summary_rows(table)
        harness.write_csv(out / "summary.csv", srows, _SUMMARY_FIELDS)
        summary["aggregate"] = srows
        _print_rows(srows, _SUMMARY_FIELDS)
    n_failed = sum(not r.ok for r in search.results)
    summary["n_results"], summary["n_failed"] = len(search.results), n_failed
    write_json(out / "summary.json", summary)
    write_json(out / "metrics.json", {**_header(args, ds, target), **summary,
                                      "trials": [r.to_dict(include_timing=False) for r in search.results]})
    if not search.best_per_seed:
        log.error("every trial failed")
        return EXIT_FAILED
    return EXIT_OK


def _model_for_diagnose(args, ds: DomainDataset):
    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
        if model.n_classes != ds.class_count:
            raise ConfigError(f"checkpoint has {model.n_classes} classes, dataset has {ds.class_count}")
        return model
    cfg = train_config(args)
    bcfg = cfg.backbone_config(ds.input_shape[0])
    dtype = np.dtype(cfg.dtype)
    if args.algorithm == "erm":
        return build_stream(bcfg, ds.class_count, init_rng(cfg.seed), dtype)
    perturbation = {"ccfp": "ldp", "mixstyle_dual": "mixstyle", "dsu_dual": "dsu"}[args.algorithm]
    return build_dual_model(bcfg, ds.class_count, init_rng(cfg.seed),
                            apply_prob=cfg.apply_prob, perturbation=perturbation, dtype=dtype)


def cmd_diagnose(args) -> int:
    ds = load_dataset(args)
    model = _model_for_diagnose(args, ds)
    rows = harness.dump_feature_stats(model, ds, args.sites, path=args.out / "feature_stats.csv")
    sites = sorted({r[1] for r in rows})
    expected = harness.expected_stats_rows(model, len(ds.domain_ids), sites)
    if not args.no_plots:
        plots.plot_feature_stats(rows, args.out / "feature_stats.png")
    metrics = {"command": "diagnose", "dataset": args.dataset, "n_per_domain": args.n_per_domain,
               "data_seed": args.data_seed, "domain_ids": ds.domain_ids, "sites": sites,
               "rows": len(rows), "expected_rows": expected,
               "checkpoint": None if args.checkpoint is None else str(args.checkpoint)}
    write_json(args.out / "metrics.json", metrics)
    print("domain,site,channels")
    for d in ds.domain_ids:
        for s in sites:
            print(f"{d},{s},{sum(1 for r in rows if r[0] == d and r[1] == s)}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ds = load_dataset(args)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    bad = [a for a in algorithms if a not in harness.ALGORITHMS]
    if bad or not algorithms:
        raise ConfigError(f"unknown algorithms {bad}; choose from {harness.ALGORITHMS}")
    targets = args.target_domains or [target_of(args, ds)]
    for t in targets:
        if t not in ds.domain_ids:
            raise ConfigError(f"unknown target domain {t}; available {ds.domain_ids}")
    base = train_config(args)
    results = []
    for alg in algorithms:
        for t in targets:
            for s in args.seeds:
                results.append(harness.run_trial(alg, replace(base, seed=s), ds, t))
    ok = [r for r in results if r.ok]
    table = harness.aggregate_results(ok) if ok else {}
    out = args.out
    # Table-style layout: one row per algorithm, one column per target domain, then the average
    cols = [str(t) for t in targets] + ["avg"]
    rows = []
    for alg in algorithms:
        row = {"algorithm": alg}
        means = []
        for t in targets:
            agg = table.get((alg, t))
            row[str(t)] = agg.format() if agg else "failed"
            if agg:
                means.append(agg.mean)
        row["avg"] = f"{100 * np.mean(means):.1f}" if len(means) == len(targets) else "n/a"
        rows.append(row)
    harness.write_csv(out / "compare.csv", rows, ["algorithm"] + cols)
    harness.write_csv(out / "results.csv", harness.results_rows(results), harness.RESULT_FIELDS)
    if table and not args.no_plots:
        plots.plot_comparison(table, out / "compare.png")
    write_json(out / "metrics.json", {"command": "compare", "dataset": args.dataset,
                                      "n_per_domain": args.n_per_domain, "data_seed": args.data_seed,
                                      "table": rows,
                                      "trials": [r.to_dict(include_timing=False) for r in results]})
    _print_rows(rows, ["algorithm"] + cols)
    return EXIT_OK if len(ok) == len(results) else EXIT_FAILED


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "diagnose": cmd_diagnose,
            "compare": cmd_compare}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    except ConfigError as exc:
        print(f"ccfp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"ccfp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CCFPError, OSError, ValueError) as exc:
        print(f"ccfp: {harness.format_exception(exc)}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, (OSError, ValueError)) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
