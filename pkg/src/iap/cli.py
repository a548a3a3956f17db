"""Command line: ``iap --config run.yaml`` runs a stream, ``iap --report DIR`` prints its metrics.

A run directory holds::

    config.yaml              resolved configuration (re-runs to identical results)
    checkpoint.iap           backbone, prompt pools, gates and feature statistics
    backbone-<key>.iap       pre-trained backbone (only when no cache_dir is configured)
    accuracy_matrix.csv      rows = sessions, columns = tasks
    metrics.csv              Transfer / Avg / Last / zero-shot / open layers per task, then means
    gate_usage.csv           mean open layers and per-layer open rate per task
    routing_telemetry.csv    final-session routing decision for every test instance
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from . import checkpoint as ckpt
from .config import RunConfig, dump_config, from_dict, load_config, replace, to_dict
from .errors import ConfigError, FormatError, StateError
from .harness import MetricsReport, RunResult, compute_metrics, model_state, run_stream

log = logging.getLogger("iap")

ACCURACY_FILE = "accuracy_matrix.csv"
METRICS_FILE = "metrics.csv"
GATE_FILE = "gate_usage.csv"
ROUTING_FILE = "routing_telemetry.csv"
CONFIG_FILE = "config.yaml"
CHECKPOINT_FILE = "checkpoint.iap"
BARS_FILE = "gate_usage_bars.csv"


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- writers

def accuracy_csv(A, names: Sequence[str]) -> str:
    rows = [["session", *names]]
    rows += [[s, *(_fmt(v) for v in row)] for s, row in enumerate(np.asarray(A))]
    return _csv(rows)


def metrics_csv(m: MetricsReport, names: Sequence[str]) -> str:
    rows = [["task", "name", "transfer", "average", "last", "zero_shot", "open_layers"]]
    for j, name in enumerate(names):
        rows.append([j, name, _fmt(m.transfer[j]), _fmt(m.average[j]), _fmt(m.last[j]),
                     _fmt(m.zero_shot[j]), _fmt(m.open_layers.get(j))])
    opens = list(m.open_layers.values())
    rows.append(["mean", "", _fmt(m.transfer_mean), _fmt(m.average_mean), _fmt(m.last_mean),
                 _fmt(m.zero_shot_mean), _fmt(np.mean(opens) if opens else None)])
    return _csv(rows)


def gate_csv(res: RunResult) -> str:
    depth = max((len(v) for v in res.layer_open_rates.values()), default=0)
    rows = [["task", "name", "mean_open_layers", *(f"layer{i}" for i in range(depth))]]
    for j, name in enumerate(res.task_names):
        rows.append([j, name, _fmt(res.metrics.open_layers.get(j)),
                     *(_fmt(v) for v in res.layer_open_rates.get(j, []))])
    return _csv(rows)


def routing_csv(res: RunResult) -> str:
    rows = [["eval_task", "index", "routed_task", "stage", "e_max", "weight"]]
    for key, task, stage, e_max, weight in res.routing_rows:
        j, i = key.split(":")
        rows.append([j, i, task, stage, f"{e_max:.6f}", f"{weight:.6f}"])
    return _csv(rows)


def write_run(res: RunResult, out: Path) -> None:
    cfg = res.config
    ckpt.atomic_write(out / CONFIG_FILE, dump_config(cfg))
    ckpt.save(out / CHECKPOINT_FILE, model_state(res.model),
              {"version": __version__, "task_names": list(res.task_names), "config": to_dict(cfg)})
    ckpt.atomic_write(out / ACCURACY_FILE, accuracy_csv(res.accuracy, res.task_names))
    ckpt.atomic_write(out / METRICS_FILE, metrics_csv(res.metrics, res.task_names))
    ckpt.atomic_write(out / GATE_FILE, gate_csv(res))
    ckpt.atomic_write(out / ROUTING_FILE, routing_csv(res))


# --------------------------------------------------------------------------- report

def _read_csv(path: Path) -> list[list[str]]:
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def format_report(run_dir: str | Path) -> tuple[str, list[list]]:
    """Metric table text and gate-usage bar rows for a finished run directory."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / CONFIG_FILE
    if not cfg_path.is_file():
        raise FileNotFoundError(f"missing file: {cfg_path}")
    cfg = load_config(cfg_path)
    acc = _read_csv(run_dir / ACCURACY_FILE)
    met = _read_csv(run_dir / METRICS_FILE)
    gates = _read_csv(run_dir / GATE_FILE)
    try:
        names = acc[0][1:]
        A = np.array([[float(v) for v in row[1:]] for row in acc[1:]])
        by_task = {r[0]: r for r in met[1:]}
        zs = [float(by_task[str(j)][5]) for j in range(len(names))]
        opens = {int(r[0]): float(r[2]) for r in gates[1:] if r[2] != ""}
    except (IndexError, KeyError, ValueError) as e:
        raise FormatError(f"{run_dir}: malformed run files ({e})") from None
    m = compute_metrics(A, zs, opens)

    setting = f"{cfg.stream.few_shot}-shot" if cfg.stream.few_shot else "full-shot"
    lines = [f"run {run_dir}  |  {cfg.stream.order}  |  {setting}  |  gate {cfg.gate.mode}  |  "
             f"cddp {'on' if cfg.routing.use_cddp else 'off'}  |  seed {cfg.seed}"]
    width = max([len(n) for n in names] + [8])
    head = f"{'metric':<10}" + "".join(f"{n:>{width + 2}}" for n in names) + f"{'mean':>{width + 2}}"
    lines.append(head)
    lines.append("-" * len(head))

    def row(label, vals, mean):
        cells = "".join(f"{'' if v is None else f'{100 * v:.1f}':>{width + 2}}" for v in vals)
        return f"{label:<10}{cells}{'' if mean is None else f'{100 * mean:.1f}':>{width + 2}}"

    lines.append(row("Zero-shot", m.zero_shot, m.zero_shot_mean))
    lines.append(row("Transfer", m.transfer, m.transfer_mean))
    lines.append(row("Avg", m.average, m.average_mean))
    lines.append(row("Last", m.last, m.last_mean))
    lines.append(f"headline  Transfer {_pct(m.transfer_mean)}  Avg {_pct(m.average_mean)}  Last {_pct(m.last_mean)}")
    bars = [["task", "name", "mean_open_layers"]] + [[j, names[j], _fmt(opens.get(j))] for j in range(len(names))]
    if opens:
        lines.append("mean open layers  " + "  ".join(f"{names[j]}={opens[j]:.2f}" for j in sorted(opens)))
    return "\n".join(lines), bars


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.3f}"


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iap", description="Instance-aware prompting on a synthetic MTIL stream.")
    p.add_argument("--config", help="YAML run configuration (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="master seed (seed)")
    p.add_argument("--order", choices=["order-1", "order-2"], help="task order (stream.order)")
    p.add_argument("--few-shot", type=int, metavar="N", help="training samples per class (stream.few_shot)")
    p.add_argument("--ablate", choices=["ia_gp", "ia_cddp"],
                   help="ia_gp: gate.mode=always_on; ia_cddp: routing.use_cddp=false")
    p.add_argument("--gate-mode", choices=["hard", "soft", "random", "always_on"], help="gate.mode")
    p.add_argument("--output", help="run directory (output_dir)")
    p.add_argument("--report", metavar="RUN_DIR", help="print the metric table of a finished run")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.order is not None:
        overrides["stream.order"] = args.order
    if args.few_shot is not None:
        overrides["stream.few_shot"] = args.few_shot
    if args.gate_mode is not None:
        overrides["gate.mode"] = args.gate_mode
    if args.ablate == "ia_gp":
        if args.gate_mode not in (None, "always_on"):
            raise ConfigError("--ablate ia_gp forces gate.mode=always_on; drop --gate-mode")
        overrides["gate.mode"] = "always_on"
    elif args.ablate == "ia_cddp":
        overrides["routing.use_cddp"] = False
    if args.output is not None:
        overrides["output_dir"] = args.output
    return replace(cfg, **overrides)


def cmd_run(cfg: RunConfig, say=print) -> Path:
    out = Path(cfg.output_dir)
    if not cfg.pretrain.cache_dir:
        # keep the pre-trained backbone beside the run; the snapshot still records null
        res = run_stream(replace(cfg, **{"pretrain.cache_dir": str(out)}), progress=say)
        res.config = cfg
    else:
        res = run_stream(cfg, progress=say)
    write_run(res, out)
    m = res.metrics
    say(f"Transfer {_pct(m.transfer_mean)}  Avg {_pct(m.average_mean)}  Last {_pct(m.last_mean)}  -> {out}")
    return out


def cmd_report(run_dir: str, out=print) -> None:
    text, bars = format_report(run_dir)
    out(text)
    path = Path(run_dir) / BARS_FILE
    ckpt.atomic_write(path, _csv(bars))
    out(f"gate-usage bar data: {path}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    say = (lambda s: None) if args.quiet else (lambda s: print(s, flush=True))
    try:
        if args.report:
            cmd_report(args.report)
        else:
            cmd_run(resolve_config(args), say)
    except ConfigError as e:
        print(f"iap: invalid configuration: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"iap: {e}", file=sys.stderr)
        return 2
    except (FormatError, StateError, yaml.YAMLError) as e:
        print(f"iap: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
