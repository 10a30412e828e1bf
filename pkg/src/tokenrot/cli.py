"""Command-line interface.

``tokenrot <command> [config] [key=value ...]``. Overrides may be written
``key=value`` or ``--key=value``; unknown keys are rejected. Every run writes to
``<runs-dir>/<run-id>/`` and refuses to overwrite an existing directory unless
``--force`` is given. Exit codes: 2 configuration, 3 data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import (RunConfig, apply_pairs, default_finetune_config, default_pretrain_config,
                     load_config, parse_lines, parse_override)
from .encoder import TokenEncoder
from .errors import ConfigError, DataError, MissingRecord, TokenRotError
from .numeric import torch_dtype
from .objectives import ProjectionHead, collapse_metrics, grid_to_tokens
from .records import CONFIG, RunRecord
from .synthetic_data import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .training import ablation_table, finetune, pretrain, run_ablation_grid

log = logging.getLogger("tokenrot")

REPORT_METRICS = ("final_loss", "dice", "hd95", "proj.cross_volume_cos",
                  "proj.within_volume_cos", "proj.positive_cos", "enc.cross_volume_cos")


# ---------------------------------------------------------------- helpers

def _split_overrides(extras: List[str]):
    pairs = []
    for item in extras:
        if "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r} (overrides are key=value)")
        pairs.append(parse_override(item))
    return pairs


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_dir(args, kind, cfg: RunConfig) -> Path:
    run_id = args.run_id or f"{kind}-{cfg.framework}-s{cfg.seed}-{cfg.digest()}"
    return _prepare_dir(Path(args.runs_dir) / run_id, args.force)


def _load_run_config(path, extras, base):
    # a lone "key=value" lands in the optional config slot when no file is given
    if path is not None and "=" in path and not Path(path).exists():
        extras, path = [path] + list(extras), None
    return load_config(path, _split_overrides(extras), base)


def _print_summary(run_dir, summary):
    print(f"run_dir\t{run_dir}")
    for k, v in sorted(summary.items()):
        if isinstance(v, (int, float, str)):
            print(f"{k}\t{v}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, extras):
    pairs = []
    if args.config is not None and "=" in args.config and not Path(args.config).exists():
        extras = [args.config] + list(extras)
    elif args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs = parse_lines(path.read_text().splitlines(), str(path))
    spec = apply_pairs(DatasetSpec(), pairs + _split_overrides(extras))
    out = _prepare_dir(Path(args.out), args.force)
    ds = generate_dataset(spec)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} volumes to {out}")
    return 0


def cmd_pretrain(args, extras):
    cfg = _load_run_config(args.config, extras, default_pretrain_config())
    run_dir = _run_dir(args, "pretrain", cfg)
    rec = pretrain(cfg, out_dir=run_dir)
    _print_summary(run_dir, rec.summary)
    return 0


def cmd_finetune(args, extras):
    cfg = _load_run_config(args.config, extras, default_finetune_config())
    if args.pretrained:
        cfg.pretrained = args.pretrained
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    kind = "finetune" if cfg.pretrained else "scratch"
    run_dir = _run_dir(args, kind, cfg)
    rec = finetune(cfg, out_dir=run_dir)
    _print_summary(run_dir, rec.summary)
    return 0


def _parse_axis(text):
    if "=" not in text:
        raise ConfigError(f"--axis expects key=v1,v2,..., got {text!r}")
    key, values = text.split("=", 1)
    return key.strip().lstrip("-"), [v.strip() for v in values.split(",") if v.strip()]


def cmd_ablate(args, extras):
    base = default_finetune_config() if args.stage == "finetune" else default_pretrain_config()
    cfg = _load_run_config(args.config, extras, base)
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    axes = dict(_parse_axis(a) for a in args.axis or [])
    root = _run_dir(args, f"ablate-{args.stage}", cfg)

    def runner(point_cfg, name):
        out = root / name
        if args.stage == "pretrain":
            return pretrain(point_cfg, out_dir=out)
        return finetune(point_cfg, out_dir=out)

    results = run_ablation_grid(cfg, axes, runner)
    metrics = [m for m in REPORT_METRICS if any(m in r[2].summary for r in results)]
    rows = ablation_table(results, metrics)
    text = _format_table(rows, "\t")
    (root / "ablation.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def _config_from_checkpoint(config: dict) -> RunConfig:
    run_text = config.get("run")
    if not run_text:
        raise ConfigError("checkpoint carries no run configuration")
    return apply_pairs(RunConfig(), parse_lines(run_text.splitlines(), "checkpoint"))


def cmd_diagnose(args, extras):
    if args.n_volumes < 2:
        raise ConfigError(f"--n-volumes must be at least 2, got {args.n_volumes}")
    tensors, config, meta = ckpt.load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(config)
    apply_pairs(cfg, _split_overrides(extras))
    dataset = load_dataset(args.dataset or cfg.dataset)
    if len(dataset) < args.n_volumes:
        raise DataError(f"dataset has {len(dataset)} volumes, need {args.n_volumes}")
    dtype = torch_dtype()
    encoder = TokenEncoder(cfg.encoder).to(dtype)
    ckpt.load_into(encoder, tensors, "encoder")
    proj = None
    if any(k.startswith("proj.") for k in tensors):
        proj = ProjectionHead(cfg.encoder.out_dim, cfg.loss.proj_dim).to(dtype)
        ckpt.load_into(proj, tensors, "proj")
    volumes = list(dataset)[:args.n_volumes]
    x = torch.from_numpy(np.stack([v.intensities for v in volumes])).to(dtype)
    with torch.no_grad():
        tokens = {"enc.": grid_to_tokens(encoder(x))}
        if proj is not None:
            tokens["proj."] = proj(tokens["enc."])
    out = _prepare_dir(Path(args.out) if args.out else
                       Path(args.runs_dir) / (args.run_id or f"diagnose-{Path(args.checkpoint).stem}"),
                       args.force)
    rec = RunRecord(kind="diagnose")
    step = int(meta.get("step", 0))
    summary = {"checkpoint": str(args.checkpoint), "n_volumes": args.n_volumes, "step": step}
    for prefix, tok in tokens.items():
        report = collapse_metrics(tok)
        rec.log_collapse(step, report, prefix)
        summary.update({prefix + k: v for k, v in report.as_dict().items()})
    rec.summary = summary
    rec.write(out)
    from .plotting import plot_token_projection
    key = "proj." if "proj." in tokens else "enc."
    plot_token_projection(tokens[key].numpy(), out / "tokens_pca.png",
                          f"{key.rstrip('.')} tokens, {args.n_volumes} volumes")
    _print_summary(out, summary)
    return 0


def _format_value(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else ("nan" if math.isnan(v) else f"{v:.6g}")
    return "" if v is None else str(v)


def _format_table(rows: List[Dict], delimiter=","):
    columns: List[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_format_value(r.get(c)) for c in columns])
    return buf.getvalue()


def _read_config_pairs(run_dir: Path):
    path = run_dir / CONFIG
    return dict(parse_lines(path.read_text().splitlines(), str(path))) if path.is_file() else {}


def _sweep_value(text):
    try:
        return float(text)
    except (TypeError, ValueError):
        return text


def cmd_report(args, extras):
    if extras:
        raise ConfigError(f"report takes no overrides, got {extras}")
    records, configs, missing = {}, {}, []
    for d in args.run_dirs:
        d = Path(d)
        try:
            name = d.name
            while name in records:
                name += "'"
            records[name] = RunRecord.read(d)
            configs[name] = _read_config_pairs(d)
        except MissingRecord as e:
            missing.append(str(d))
            print(f"missing record: {e}", file=sys.stderr)
    if not records:
        raise MissingRecord(f"no run records found in {len(args.run_dirs)} director"
                            f"{'y' if len(args.run_dirs) == 1 else 'ies'}")

    keys = sorted({k for c in configs.values() for k in c})
    varied = [k for k in keys if len({c.get(k) for c in configs.values()}) > 1
              and k not in ("dataset", "pretrained")]
    metrics = [m for m in REPORT_METRICS if any(m in r.summary for r in records.values())]
    rows = []
    for name, rec in records.items():
        s = rec.summary
        framework = s.get("framework", configs[name].get("framework", ""))
        row = {"run": name, "kind": rec.kind, "framework": framework}
        row.update({k: configs[name].get(k, "") for k in varied if k != "framework"})
        row.update({m: s.get(m) for m in metrics})
        rows.append(row)

    out = _prepare_dir(Path(args.out) if args.out else Path(args.runs_dir) / "report", args.force)
    delim = "\t" if args.format == "tsv" else ","
    table = _format_table(rows, delim)
    (out / f"summary.{args.format}").write_text(table)
    sys.stdout.write(table)

    from .plotting import plot_collapse, plot_loss_curves, plot_sweep
    figures = [plot_loss_curves(records, out / "loss.png")]
    if any(r.collapse() for r in records.values()):
        figures.append(plot_collapse(records, out / "collapse.png"))
    sweep_key = args.sweep or next((k for k in varied if k not in ("framework", "seed")), None)
    if sweep_key:
        y_key = args.metric or ("dice" if "dice" in metrics else metrics[0] if metrics else None)
        if y_key:
            curves: Dict[str, list] = {}
            for row, name in zip(rows, records):
                label = row["framework"] or "run"
                x = _sweep_value(configs[name].get(sweep_key))
                curves.setdefault(label, []).append((x, row.get(y_key)))
            figures.append(plot_sweep(curves, sweep_key, y_key, out / "sweep.png"))
    for f in figures:
        print(f"figure\t{f}", file=sys.stderr)
    if missing:
        (out / "missing.txt").write_text("".join(m + "\n" for m in missing))
    return 0


# ---------------------------------------------------------------- entry point

def _common(p, runs=True):
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    if runs:
        p.add_argument("--runs-dir", default="runs", help="parent of run directories")
        p.add_argument("--run-id", default=None, help="run directory name (default: derived)")


def build_parser():
    parser = argparse.ArgumentParser(prog="tokenrot", allow_abbrev=False,
                                     description="Token-level rotation-restore pre-training toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic dataset")
    p.add_argument("config", nargs="?", default=None, help="key = value dataset spec file")
    p.add_argument("--out", default="data")
    _common(p, runs=False)

    for name, helptext in (("pretrain", "self-supervised pre-training"),
                           ("finetune", "segmentation fine-tuning")):
        p = sub.add_parser(name, allow_abbrev=False, help=helptext)
        p.add_argument("config", nargs="?", default=None, help="key = value config file")
        _common(p)
        if name == "finetune":
            p.add_argument("--pretrained", default=None, help="pre-training checkpoint")
            p.add_argument("--max-steps", type=int, default=None, help="same as max_steps=N")

    p = sub.add_parser("ablate", allow_abbrev=False, help="run a grid of configurations")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--axis", action="append", help="key=v1,v2,... (repeatable)")
    p.add_argument("--stage", choices=("pretrain", "finetune"), default="pretrain")
    p.add_argument("--max-steps", type=int, default=None, help="same as max_steps=N")
    _common(p)

    p = sub.add_parser("diagnose", allow_abbrev=False, help="collapse metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default=None)
    p.add_argument("--n-volumes", type=int, default=4)
    p.add_argument("--out", default=None)
    _common(p)

    p = sub.add_parser("report", allow_abbrev=False, help="tables and figures from run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("csv", "tsv"), default="csv")
    p.add_argument("--sweep", default=None, help="config key on the x axis of sweep.png")
    p.add_argument("--metric", default=None, help="summary metric on the y axis")
    _common(p)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "ablate": cmd_ablate, "diagnose": cmd_diagnose, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, extras)
    except TokenRotError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
