"""Command-line entry point: train, eval, simulate, export.

Exit codes: 0 success, 2 bad configuration or arguments, 3 file I/O failure.
Machine-readable summaries go to stdout as JSON; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from .config import ConfigError, load_config, write_config_echo
from .model import ConsistencyError

EXPORT_KINDS = ("topology", "routing", "curves")
CURVE_FIELDS = ["epoch", "task_loss", "aux_loss", "total_loss", "acc_id", "acc_blind", "mean_p", "entropy"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    from .trainer import run_training
    overrides = list(args.set)
    if args.variant:
        overrides.append(f"train.variant={json.dumps(args.variant)}")
    if args.out:
        overrides.append(f"output.directory={json.dumps(args.out)}")
    cfg = load_config(args.config, overrides)
    out = Path(cfg.output.directory)
    write_config_echo(cfg, out)
    _, log = run_training(cfg.train, cfg.model, cfg.data, out_dir=out, verbose=not args.quiet)
    _emit({"output": str(out), **{k: v for k, v in log.summary.items() if not isinstance(v, dict)}})
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import build_mixed_stream, load_task_sets
    from .metrics import HeatmapSpec, export_csv, export_svg_heatmap
    from .trainer import evaluate
    cfg = load_config(args.config, args.set)
    model = load_checkpoint(args.checkpoint)
    if args.config or any(o.startswith("model.") for o in args.set):
        want, have = cfg.model.to_dict(), model.config.to_dict()
        diff = sorted(k for k in want if want[k] != have.get(k))
        if diff:
            raise ConsistencyError(f"config model section disagrees with the checkpoint on: {', '.join(diff)}")
    sets = load_task_sets(cfg.data)
    width = sets[0].images.shape[1]
    if model.config.input_dim != width or model.config.n_tasks != len(sets):
        raise ConsistencyError(f"checkpoint expects input_dim={model.config.input_dim}, n_tasks={model.config.n_tasks}; "
                               f"data has input_dim={width}, n_tasks={len(sets)}")
    held = build_mixed_stream([s.split(cfg.data.holdout_frac)[1] for s in sets], cfg.train.eval_batch)
    mode = "blind" if args.blind else "id"
    acc, hist = evaluate(model, held.inputs, held.task_ids, held.unified_labels, mode, cfg.train.eval_batch)
    out = Path(args.out or cfg.output.directory)
    experts = [f"e{i}" for i in range(hist.shape[1])]
    tasks = [f"t{t}" for t in range(hist.shape[0])]
    export_csv(hist, out / f"routing_{mode}.csv", experts, tasks)
    export_svg_heatmap(HeatmapSpec(hist, tasks, experts, f"top-1 routing ({mode})"), out / f"routing_{mode}.svg")
    _emit({"mode": mode, "accuracy": acc, "n_examples": len(held), "histogram": hist.tolist()})
    return 0


def cmd_simulate(args) -> int:
    from . import dynamics
    from .config import RunConfig
    from .linalg import Rng
    base = None
    if args.preset and args.preset != "conflict-rate":
        if args.preset not in dynamics.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; valid: {', '.join(sorted(dynamics.PRESETS))}, conflict-rate")
        base = RunConfig(dynamics=dynamics.preset(args.preset))
    overrides = list(args.set) + ([f"output.directory={json.dumps(args.out)}"] if args.out else [])
    cfg = load_config(args.config, overrides, base)
    out = Path(cfg.output.directory)
    write_config_echo(cfg, out)
    if args.preset == "conflict-rate":
        lp = dynamics.CONFLICT_RATE_PRESET
        report = dynamics.conflict_probability_experiment(lp["d_out"], lp["n_pairs"], Rng(cfg.dynamics.seed))
        summary = {"preset": "conflict-rate", "conflict_rate": report}
    else:
        result = dynamics.simulate(cfg.dynamics)
        dynamics.export_trajectories(result, out / "trajectories.csv", max_chains=args.max_chains)
        summary = {"preset": args.preset or "config", **result.summary()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    brief = {k: v for k, v in summary.items() if not isinstance(v, dict)}
    if "conflict_rate" in summary:
        brief.update(summary["conflict_rate"])
    _emit({"output": str(out), **brief})
    return 0


def _snapshots(run: Path, pattern: str) -> list[tuple[int, Path]]:
    rx = re.compile(pattern)
    found = [(int(m.group(1)), p) for p in sorted((run / "snapshots").glob("*.csv")) if (m := rx.fullmatch(p.name))]
    return sorted(found)


def cmd_export(args) -> int:
    from .metrics import HeatmapSpec, export_csv, export_svg_heatmap, read_csv_log, read_csv_matrix
    run = Path(args.run_dir)
    figs = run / "figures"
    written = []
    if args.what == "curves":
        metrics = run / "metrics.csv"
        if not metrics.exists():
            raise ConfigError(f"no metrics.csv in {run}")
        rows = read_csv_log(metrics)
        rows = [{**r, "epoch": int(r["epoch"])} for r in rows]
        written.append(export_csv(rows, figs / "curves.csv", CURVE_FIELDS))
    else:
        pattern = r"topology_epoch_(\d+)\.csv" if args.what == "topology" else r"routing_(?:id|blind)_epoch_(\d+)\.csv"
        snaps = _snapshots(run, pattern)
        if not snaps:
            raise ConfigError(f"no {args.what} snapshots under {run / 'snapshots'}")
        for epoch, path in snaps:
            header, mat, labels = read_csv_matrix(path)
            spec = HeatmapSpec(mat, labels or [], header, path.stem.replace("_", " "), vmin=0.0, vmax=1.0)
            written.append(export_svg_heatmap(spec, figs / f"{path.stem}.svg"))
    _emit({"what": args.what, "files": [str(p) for p in written]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdsp-moe", description="Conflict-driven subspace pruning MoE: training, evaluation, "
                                             "topology dynamics simulation and figure export.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (sections data/model/train/dynamics/output)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=1 (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output.directory)")

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--variant", choices=["cdsp", "standard", "pure_blind"])
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--blind", action="store_true", help="strip task ids")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="run the connection-logit dynamics simulator")
    common(s)
    s.add_argument("--preset", help="conflict, no-force, quiet or conflict-rate")
    s.add_argument("--max-chains", type=int, default=100, help="chains written to trajectories.csv")
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("export", help="regenerate figures from a run directory")
    x.add_argument("run_dir")
    x.add_argument("--what", required=True, choices=EXPORT_KINDS)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConsistencyError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
