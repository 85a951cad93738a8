"""Command-line entry point: ``srnet <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import checkpoint as ckpt
from . import harness as H
from .config import RunConfig, load_config, parse_pairs
from .debias import LOSSES

OUT_ENV = "SRNET_OUT"

log = logging.getLogger("srnet")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override its values")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes over seeds")
    g = p.add_argument_group("config keys")
    for f in fields(RunConfig):
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srnet", description="Sparse and robust subnetwork experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and write the synthetic splits")
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="pretrain θ_pt by masked-token reconstruction")
    _add_config_flags(p)

    p = sub.add_parser("finetune", help="fine-tune the full model from θ_pt")
    _add_config_flags(p)
    p.add_argument("--loss", choices=LOSSES, default="std")

    p = sub.add_parser("search", help="one subnetwork search from θ_ft (or θ_pt with --source pt)")
    _add_config_flags(p)
    p.add_argument("--method", choices=("imp", "imp-rw", "mask"), default="mask")
    p.add_argument("--loss", choices=LOSSES, default="poe")
    p.add_argument("--ft-loss", choices=LOSSES, default="std")
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--source", choices=("ft", "pt"), default="ft")

    p = sub.add_parser("run-paradigm", help="sweep one paradigm over sparsities and seeds")
    _add_config_flags(p)
    p.add_argument("--paradigm", choices=H.PARADIGMS, required=True)
    p.add_argument("--method", choices=("imp", "imp-rw", "mask"), default="mask")
    p.add_argument("--search-loss", choices=LOSSES, default="poe")
    p.add_argument("--ft-loss", choices=LOSSES, default="std")

    p = sub.add_parser("oracle", help="mask training on ID + OOD training data")
    _add_config_flags(p)

    p = sub.add_parser("timing", help="mask training from intermediate fine-tuning snapshots")
    _add_config_flags(p)
    p.add_argument("--search-loss", choices=LOSSES, default="poe")

    p = sub.add_parser("gradual", help="fixed versus gradually increased sparsity")
    _add_config_flags(p)
    p.add_argument("--search-loss", choices=LOSSES, default="poe")

    p = sub.add_parser("report", help="aggregate records.csv files below a directory")
    p.add_argument("path", nargs="?", default=None)
    p.add_argument("--out", help="where to write report.csv (default: the scanned directory)")
    return ap


def resolve_config(args) -> RunConfig:
    overrides = parse_pairs(args.set)
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = v
    return load_config(args.config, overrides)


def output_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


# ----------------------------------------------------------------------------
# per-seed work, runnable in worker processes


def _work(command: str, cfg_text: str, root: str, seed: int, opts: dict) -> list[H.ExperimentRecord]:
    cfg = RunConfig.from_text(cfg_text)
    lab = H.Lab(cfg, root)
    seeds = [seed]
    if command == "finetune":
        return H.run_full_models(lab, (opts["loss"],), seeds)
    if command == "search":
        if opts["source"] == "pt":
            return [H.run_single(lab, "mask_only", "mask", opts["loss"], "", opts["sparsity"], seed)]
        if opts["method"] == "imp-rw":
            raise SystemExit("search --method imp-rw prunes θ_pt; use --source pt or run-paradigm prune_then_ft")
        return [H.run_single(lab, "prune_after_ft", opts["method"], opts["loss"], opts["ft_loss"],
                             opts["sparsity"], seed)]
    if command == "run-paradigm":
        return H.run_paradigm(lab, opts["paradigm"], opts["method"], opts["search_loss"], opts["ft_loss"],
                              seeds=seeds)
    if command == "oracle":
        return H.run_ood_oracle(lab, seeds=seeds)
    if command == "timing":
        return H.run_timing_study(lab, opts["search_loss"], seeds=seeds)
    if command == "gradual":
        return H.run_gradual_vs_fixed(lab, opts["search_loss"], seeds=seeds)
    raise ValueError(command)


def run_seeds(command: str, cfg: RunConfig, root: Path, opts: dict, jobs: int) -> list[H.ExperimentRecord]:
    # warm the shared caches once so workers never race on them
    lab = H.Lab(cfg, root)
    lab.theta_pt()
    lab.bias_probs()
    text = cfg.to_text()
    if jobs <= 1 or len(cfg.seeds) <= 1:
        batches = [_work(command, text, str(root), s, opts) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_work, command, text, str(root), s, opts) for s in cfg.seeds]
            batches = [f.result() for f in futs]
    return [r for b in batches for r in b]


def _run_dir(root: Path, command: str, opts: dict) -> Path:
    parts = [command] + [f"{k}-{v}" for k, v in sorted(opts.items())]
    return root / "_".join(str(p).replace("/", "-") for p in parts)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "report":
        return cmd_report(args)

    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    root = output_root(args)

    if args.command == "gen-data":
        lab = H.Lab(cfg, root)
        out = root / "data"
        H.export_splits(lab, out)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / "manifest.txt").write_text(H.manifest(cfg, "gen-data"), encoding="utf-8")
        print(f"wrote {', '.join(lab.splits)} to {out}")
        return 0

    if args.command == "pretrain":
        lab = H.Lab(cfg, root)
        snap = lab.theta_pt()
        out = root / "pretrain"
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "theta_pt.srnt", snap.params, provenance={"tag": "pt", "steps": str(cfg.pretrain_steps)})
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / "manifest.txt").write_text(H.manifest(cfg, "pretrain"), encoding="utf-8")
        print(f"wrote {out / 'theta_pt.srnt'}")
        return 0

    opts = {k: getattr(args, k) for k in ("loss", "method", "sparsity", "source", "paradigm", "search_loss",
                                          "ft_loss") if hasattr(args, k)}
    records = run_seeds(args.command, cfg, root, opts, args.jobs)
    out = H.write_outputs(_run_dir(root, args.command, opts), cfg, args.command, records)
    for row in H.aggregate(records):
        print(_summary(row))
    if args.command == "gradual":
        _, verdict = H.gradual_verdict(records, cfg.metric_key)
        (out / "gradual_check.txt").write_text(verdict, encoding="utf-8")
        print(verdict, end="")
    print(f"records written to {out}")
    try:
        H.assert_contracts(records)
    except H.ContractError as e:
        print(str(e), file=sys.stderr)
        return 3
    return 0


def _summary(row: dict[str, str]) -> str:
    label = " ".join(row[k] for k in ("study", "paradigm", "method", "ft_loss", "search_loss", "arm") if row[k])
    return (f"{label} s={row['sparsity']}: ID acc {row['id_acc_mean']}±{row['id_acc_std']}  "
            f"OOD acc {row['ood_acc_mean']}±{row['ood_acc_std']}  (n={row['n_seeds']})")


def cmd_report(args) -> int:
    base = Path(args.path or os.environ.get(OUT_ENV) or "runs")
    files = sorted(base.rglob("records.csv")) if base.is_dir() else []
    rows = [r for f in files for r in H.read_records_csv(f)]
    if not rows:
        print(f"no records found under {base}", file=sys.stderr)
        return 1
    table = H.report_table(rows)
    dest = Path(args.out) if args.out else base
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "report.csv").write_text(H.rows_to_csv(table), encoding="utf-8")
    for row in table:
        print(_summary(row))
    print(f"report written to {dest / 'report.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
