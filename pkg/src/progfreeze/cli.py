"""Command-line entry point.

Every subcommand reads one YAML config (``--config``; defaults apply when
omitted) and writes into an output directory. Precedence for the output
directory is ``--out``, then ``$PROGFREEZE_OUTPUT_DIR``, then the config.
Errors print one line ``error: <category>: <detail>`` to stderr; config
problems exit 2, runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nnet
from . import config as cfgmod
from .baseline import evaluate_baseline
from .cohort import Cohort, export_cohort, generate_cohort
from .config import ConfigError, ExperimentConfig
from .fedsim import make_site, run_federation, shard_cohort
from .metrics import paired_t
from .report import (LEDGER_FIELDS, emit_table, matrix_rows, read_rows, summarize, write_csv,
                     write_rows)
from .splitter import FoldPlan, audit, make_folds
from .trainer import Init, fold_seed, initial_network, pretrain, run_config

OUTPUT_ENV = "PROGFREEZE_OUTPUT_DIR"
log = logging.getLogger("progfreeze")


class UsageError(Exception):
    """Bad invocation or inconsistent inputs (exit code 2)."""


# ------------------------------------------------------------------ helpers

def _out_dir(args, cfg: ExperimentConfig, sub: str) -> Path:
    base = args.out or os.environ.get(OUTPUT_ENV) or cfg.output.directory
    d = Path(base) / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _cohort(cfg: ExperimentConfig) -> Cohort:
    c = cfg.cohort
    return generate_cohort(cfg.cohort_seed(), c.n_pos, c.n_neg, tuple(c.images_per_patient),
                           c.signal_strength, cfg.image_model(), c.irds_coupling,
                           c.irds_missing_rate)


def _plan(cfg: ExperimentConfig, cohort: Cohort) -> FoldPlan:
    s = cfg.split
    plan = make_folds(cohort, s.k, s.repeats, cfg.split_seed(), "bpd", s.test_image)
    result = audit(plan, cohort)
    if not result.passed:
        raise RuntimeError(f"fold plan failed audit: {sorted(result.failures())}")
    return plan


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")


def _manifest(cfg: ExperimentConfig, command: str, started: float, **extra) -> dict:
    m = {
        "command": command,
        "config": cfgmod.to_dict(cfg),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    m.update(extra)
    return m


def _weights_path(d: Path, init: Init) -> Path:
    return d / f"{init.prefix.lower()}_backbone.npz"


def _save_net(path: Path, net: nnet.Network) -> None:
    flat = {f"{g}/{k}": v for g, params in net.state_dict().items() for k, v in params.items()}
    np.savez(path, **flat)


def _load_net(path: Path, arch: nnet.ArchConfig) -> nnet.Network:
    net = nnet.zero_network(arch)
    state: dict = {}
    with np.load(path) as z:
        for key in z.files:
            g, k = key.split("/", 1)
            state.setdefault(g, {})[k] = z[key]
    net.load_groups(state)
    return net


def _init_cache(cfg: ExperimentConfig, args) -> dict:
    """Reuse backbones written by ``pretrain`` when they match this config."""
    cache: dict = {}
    base = Path(args.out or os.environ.get(OUTPUT_ENV) or cfg.output.directory) / "pretrain"
    meta_path = base / "manifest.json"
    if not meta_path.exists():
        return cache
    meta = json.loads(meta_path.read_text())
    want = {"seed": cfg.seed, "epochs": cfg.pretrain.epochs, "samples": cfg.pretrain.samples,
            "architecture": cfgmod.to_dict(cfg)["architecture"], "image_size": cfg.cohort.image_size}
    if {k: meta.get(k) for k in want} != want:
        return cache
    arch = cfg.arch()
    for init in (Init.XRAY_LIKE_PRETRAIN, Init.RGB_LIKE_PRETRAIN):
        p = _weights_path(base, init)
        if p.exists():
            key = (init.value, arch, cfg.seed, cfg.pretrain.epochs, cfg.pretrain.samples,
                   cfg.image_model())
            cache[key] = _load_net(p, arch)
    return cache


# -------------------------------------------------------------- subcommands

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    t0 = time.time()
    out = _out_dir(args, cfg, "cohort")
    coh = _cohort(cfg)
    export_cohort(coh, out)
    plan = _plan(cfg, coh)
    _write_json(out / "fold_plan.json", plan.to_dict())
    _write_json(out / "manifest.json", _manifest(cfg, "generate", t0,
                                                 plan_fingerprint=plan.fingerprint(),
                                                 n_patients=len(coh)))
    print(f"wrote {len(coh)} patients to {out}")
    return 0


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    t0 = time.time()
    out = _out_dir(args, cfg, "pretrain")
    arch = cfg.arch()
    info = {}
    for init in (Init.XRAY_LIKE_PRETRAIN, Init.RGB_LIKE_PRETRAIN):
        res = pretrain(init.domain, arch, cfg.pretrain.epochs, cfg.seed, cfg.pretrain.samples,
                       image_model=cfg.image_model())
        _save_net(_weights_path(out, init), res.net)
        info[init.value] = {"train_accuracy": res.train_accuracy, "final_loss": res.losses[-1],
                            "hash": res.net.hash()}
        print(f"{init.value}: train accuracy {res.train_accuracy:.3f}")
    _write_json(out / "manifest.json", _manifest(
        cfg, "pretrain", t0, seed=cfg.seed, epochs=cfg.pretrain.epochs,
        samples=cfg.pretrain.samples, architecture=cfgmod.to_dict(cfg)["architecture"],
        image_size=cfg.cohort.image_size, backbones=info))
    return 0


def _run_grid(args, cfg: ExperimentConfig, configs, sub: str) -> int:
    t0 = time.time()
    out = _out_dir(args, cfg, sub)
    coh = _cohort(cfg)
    plan = _plan(cfg, coh)
    cache = _init_cache(cfg, args)
    rows, runs = [], {}
    for tc in configs:
        log.info("running %s", tc.label)
        res = run_config(tc, coh, plan, cfg.arch(), cfg.pretrain.epochs, cfg.pretrain.samples,
                         args.jobs, cache)
        rows.extend(res.rows())
        runs[tc.label] = {**res.manifest,
                          "folds": [{"repeat": f.repeat, "fold": f.fold, "seed": f.seed,
                                     **f.manifest} for f in res.folds]}
    write_rows(out / "rows.csv", rows)
    _write_json(out / "fold_plan.json", plan.to_dict())
    _write_json(out / "manifest.json", _manifest(cfg, sub, t0, plan_fingerprint=plan.fingerprint(),
                                                 runs=runs))
    print(emit_table(summarize(rows)), end="")
    return 0


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    configs = cfg.train_configs()
    if args.name:
        picked = [c for c in configs if c.label == args.name]
        if not picked:
            raise UsageError(f"no config named {args.name!r}; have {[c.label for c in configs]}")
    else:
        picked = configs[args.index:args.index + 1]
        if not picked:
            raise UsageError(f"config index {args.index} out of range ({len(configs)} configs)")
    return _run_grid(args, cfg, picked, "finetune")


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    return _run_grid(args, cfg, cfg.train_configs(), "ablate")


def cmd_baseline(args, cfg: ExperimentConfig) -> int:
    t0 = time.time()
    out = _out_dir(args, cfg, "baseline-irds")
    # BPD outcome, balanced on BPD, among patients with all three IRDS grades
    coh = _cohort(cfg).with_target("irds")
    s = cfg.split
    plan = make_folds(coh, s.k, args.repeats, cfg.split_seed(), "bpd", s.test_image)
    if not audit(plan, coh).passed:
        raise RuntimeError("baseline fold plan failed audit")
    res = evaluate_baseline(coh, plan, args.l2, threshold=cfg.train.threshold)
    write_rows(out / "rows.csv", res.rows)
    flagged = [[r.repeat, r.fold] for r, rep in zip(plan.folds, res.reports) if rep.flags]
    _write_json(out / "manifest.json", _manifest(
        cfg, "baseline-irds", t0, plan_fingerprint=plan.fingerprint(), l2_lambda=args.l2,
        excluded_patients=res.n_excluded, flagged_folds=flagged))
    print(emit_table(summarize(res.rows)), end="")
    return 0


def cmd_fedsim(args, cfg: ExperimentConfig) -> int:
    t0 = time.time()
    out = _out_dir(args, cfg, "fedsim")
    fed = cfg.federation()
    coh = _cohort(cfg)
    tc = cfg.base_train_config()
    shards = shard_cohort(coh, fed.n_sites, cfg.seed, fed.skew_concentration)
    sites = [make_site(i, sh, tc, fold_seed(cfg.seed, 0xFED, i)) for i, sh in enumerate(shards)]
    backbone = initial_network(tc.init, cfg.arch(), cfg.seed, cfg.pretrain.epochs,
                               cfg.pretrain.samples, cfg.image_model(), _init_cache(cfg, args))
    res = run_federation(sites, backbone, fed, tc)
    write_csv(out / "ledger.csv", res.ledger.as_rows(), LEDGER_FIELDS)
    write_csv(out / "cross_site.csv", matrix_rows(res.matrix), ("model_site", "test_site", "auroc"))
    _write_json(out / "manifest.json", _manifest(
        cfg, "fedsim", t0, sites=[{"site": s.site_id, "patients": len(s.shard),
                                   "positives": len(s.shard.ids(1)), "seed": s.seed}
                                  for s in res.sites],
        global_hash=res.global_net.hash()))
    for i, row in enumerate(res.matrix):
        print(" ".join(f"{r.auroc:.3f}" for r in row))
    return 0


def cmd_report(args, cfg: ExperimentConfig | None) -> int:
    d = Path(args.results)
    rows = read_rows(d / "rows.csv")
    summary = summarize(rows)
    md = emit_table(summary, "markdown")
    (d / "table.md").write_text(md)
    (d / "table.csv").write_text(emit_table(summary, "csv"))
    print(md if args.format == "markdown" else emit_table(summary, "csv"), end="")
    return 0


def _fingerprints(d: Path) -> dict[str, str]:
    m = json.loads((d / "manifest.json").read_text())
    return {label: run["plan_fingerprint"] for label, run in m.get("runs", {}).items()}


def cmd_compare(args, cfg: ExperimentConfig | None) -> int:
    da = Path(args.results)
    db = Path(args.results_b) if args.results_b else da
    fa, fb = _fingerprints(da), _fingerprints(db)
    for name, fps in ((args.a, fa), (args.b, fb)):
        if name not in fps:
            raise UsageError(f"config {name!r} not found in results")
    if fa[args.a] != fb[args.b]:
        raise UsageError(f"fold plans differ ({fa[args.a]} vs {fb[args.b]}); comparison is not paired")
    ra = [r for r in read_rows(da / "rows.csv") if r["config_id"] == args.a]
    rb = [r for r in read_rows(db / "rows.csv") if r["config_id"] == args.b]
    res = paired_t(ra, rb, args.metric)
    doc = {"a": args.a, "b": args.b, "metric": args.metric, **res.to_dict()}
    print(json.dumps(doc, indent=1))
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progfreeze", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for fold runs")
    common.add_argument("--out", help="output directory (overrides env and config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic cohort and fold plan")
    sub.add_parser("pretrain", parents=[common], help="pretrain both surrogate backbones")
    ft = sub.add_parser("finetune", parents=[common], help="run one config of the grid")
    ft.add_argument("--name", help="config label")
    ft.add_argument("--index", type=int, default=0, help="grid position when --name is absent")
    sub.add_parser("ablate", parents=[common], help="run the whole grid")
    bl = sub.add_parser("baseline-irds", parents=[common], help="IRDS polynomial baseline")
    bl.add_argument("--l2", type=float, default=1.0, help="L2 penalty strength")
    bl.add_argument("--repeats", type=int, default=5, help="outer repeats of the 5-fold split")
    sub.add_parser("fedsim", parents=[common], help="three-phase federated simulation")
    rp = sub.add_parser("report", parents=[common], help="summary table from a results directory")
    rp.add_argument("results")
    rp.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    cp = sub.add_parser("compare", parents=[common], help="paired t-test between two configs")
    cp.add_argument("a")
    cp.add_argument("b")
    cp.add_argument("results")
    cp.add_argument("--results-b", help="second results directory (defaults to the first)")
    cp.add_argument("--metric", default="auroc")
    return p


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "ablate": cmd_ablate, "baseline-irds": cmd_baseline, "fedsim": cmd_fedsim,
    "report": cmd_report, "compare": cmd_compare,
}
NEEDS_CONFIG = {"generate", "pretrain", "finetune", "ablate", "baseline-irds", "fedsim"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args) if args.command in NEEDS_CONFIG else None
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: config: {e.key_path}: {str(e).split(': ', 1)[-1]}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - surfaced as a single machine-readable line
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
