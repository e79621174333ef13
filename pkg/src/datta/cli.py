"""Command-line entry point: ``train``, ``run`` and ``sweep``.

Exit codes: 0 ok, 2 usage or config error, 3 data or checkpoint error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as C
from .adaptation import METHODS
from .datagen import ScenarioSpec
from .harness import (CheckpointError, TrainingDiverged, load_checkpoint, run_experiment, save_checkpoint,
                      train_source, write_report)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("datta")

SWEEP_COLUMNS = ("method", "scenario", "seed", "domains", "mean_acc", "mean_score", "backward_count",
                 "low_branch_count", "updated_values")


def _overrides(args) -> list[tuple[str, object]]:
    return [C.parse_override(s) for s in (args.set or [])]


def _seed_overrides(seed, sections) -> list[tuple[str, object]]:
    return [] if seed is None else [(f"{s}.seed", seed) for s in sections]


def read_scenario(path, overrides=()) -> ScenarioSpec:
    data = C.read_toml(path)
    if set(data) == {"scenario"}:
        data = data["scenario"]
    data = {**data, **dict(overrides)}
    data.setdefault("seed", C.env_seed())
    try:
        return ScenarioSpec.from_dict(data)
    except (TypeError, ValueError, KeyError) as e:
        raise C.ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = C.load(args.config, _overrides(args) + _seed_overrides(args.seed, ("train",)))
    ckpt = train_source(cfg.task, cfg.model, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    print(json.dumps({"checkpoint": str(out), "heldout_acc": ckpt.heldout_acc,
                      "state_hash": ckpt.model.state_hash()}))
    return EXIT_OK


def cmd_run(args) -> int:
    extra = _overrides(args) + _seed_overrides(args.seed, ("adapt", "scenario"))
    if args.method:
        extra.append(("adapt.method", args.method))
    # scenario keys patch the scenario file rather than the run config
    scen = [(k.partition(".")[2], v) for k, v in extra if k.startswith("scenario.")]
    cfg = C.load(args.config, [(k, v) for k, v in extra if not k.startswith("scenario.")])
    spec = read_scenario(args.scenario, scen)
    ckpt = load_checkpoint(args.ckpt)
    timing = args.timing or cfg.output.timing
    records, summary = run_experiment(ckpt, spec, cfg.adapt, timing=timing)
    out_dir = Path(args.out_dir or cfg.output.dir)
    stem = f"{cfg.adapt.method}_{spec.kind}_s{spec.seed}"
    write_report(records, out_dir / stem, summary, plots=cfg.output.plots and not args.no_plots)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cell(job):
    ckpt, name, spec, adapt, timing = job
    records, summary = run_experiment(ckpt, spec, adapt, timing=timing)
    return name, spec, adapt.method, records, summary


def read_grid(path, overrides) -> list[tuple[str, ScenarioSpec, C.AdaptationConfig]]:
    data = C.read_toml(path)
    allowed = {"methods", "seeds", "scenarios", "adapt"}
    bad = sorted(set(data) - allowed)
    if bad:
        raise C.ConfigError(f"unknown grid key(s): {', '.join(bad)}; valid: {', '.join(sorted(allowed))}")
    methods = data.get("methods", [])
    seeds = data.get("seeds", [0])
    scenarios = data.get("scenarios", [])
    if not methods or not scenarios or not seeds:
        raise C.ConfigError(f"{path}: empty grid (need methods, scenarios and seeds)")
    cells = []
    for sc in scenarios:
        sc = dict(sc)
        name = sc.pop("name", None)
        if name is None:
            raise C.ConfigError(f"{path}: every [[scenarios]] entry needs a name")
        for method in methods:
            for seed in seeds:
                try:
                    spec = ScenarioSpec.from_dict({**sc, "seed": seed})
                except (TypeError, ValueError, KeyError) as e:
                    raise C.ConfigError(f"{path}: scenario {name}: {e}") from None
                ad = {**data.get("adapt", {}), "method": method, "seed": seed}
                cfg = C.build(C.merge({"adapt": ad}, overrides)).adapt
                cells.append((name, spec, cfg))
    return cells


def cmd_sweep(args) -> int:
    cells = read_grid(args.grid, _overrides(args))
    ckpt = load_checkpoint(args.ckpt)
    jobs = [(ckpt, name, spec, cfg, args.timing) for name, spec, cfg in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    results.sort(key=lambda r: (r[2], r[0], r[1].seed))
    out_dir = Path(args.out_dir)
    columns = SWEEP_COLUMNS + (("mean_latency_ms",) if args.timing else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    by_m: dict[int, list[float]] = {}
    for name, spec, method, records, summary in results:
        row = {**summary, "method": method, "scenario": name, "seed": spec.seed, "domains": len(spec.domains)}
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
        by_m.setdefault(len(spec.domains), []).append(summary["mean_score"])
        if args.records:
            write_report(records, out_dir / "cells" / f"{method}_{name}_s{spec.seed}", summary,
                         plots=not args.no_plots)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(buf.getvalue())
    lines = ["domains,mean_score"] + [f"{m},{sum(v) / len(v)!r}" for m, v in sorted(by_m.items())]
    (out_dir / "diversity_by_domains.csv").write_text("\n".join(lines) + "\n")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="datta", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Diversity-gated test-time adaptation on synthetic domain-shift streams.",
        epilog="config keys (TOML, dotted sections; override with --set section.key=value):\n"
               + C.key_help()
               + "\n\nscenario file keys: kind, domains (list of {kind, severity} or \"kind:severity\"), "
                 "batch_size, num_batches, delta, seed, run_length"
               + "\n\nexit codes: 0 ok, 2 usage/config, 3 data/checkpoint, 4 runtime; "
                 f"${C.SEED_ENV} sets unset seeds")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="seed for every seeded component")

    t = sub.add_parser("train", help="train the source model and write a checkpoint")
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--out", required=True, help="checkpoint path")
    common(t)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("run", help="replay one scenario through one method")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scenario", required=True, help="TOML scenario file")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--config", help="TOML run config ([adapt] and [output] are used)")
    r.add_argument("--out-dir")
    r.add_argument("--no-plots", action="store_true", help="skip the SVG timeline")
    r.add_argument("--timing", action="store_true", help="write per-batch wall time into the CSV")
    common(r)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a methods x scenarios x seeds grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--grid", required=True, help="TOML grid: methods, seeds, [[scenarios]], optional [adapt]")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--records", action="store_true", help="also write per-cell record files")
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--timing", action="store_true", help="add a latency column (not reproducible)")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except C.ConfigError as e:
        print(f"datta: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"datta: checkpoint error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"datta: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"datta: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.debug("unhandled", exc_info=True)
        print(f"datta: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
