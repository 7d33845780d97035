"""Command-line interface.

Subcommands: gen-data (write a dataset file), train (run one config or a
multi-run preset), sample (draw from a checkpoint), eval (re-score a run's
checkpoint), diagnose (leakage and gap CSVs), ablate (the loss-combination
preset), report (aggregate a ledger into a comparison table).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from trajdiff.config import load as load_config
from trajdiff.datasets import DATASET_KINDS, gen_dataset, write_dataset
from trajdiff.runner import (
    ema_denoiser_from,
    gap_report_for,
    generate_samples,
    leakage_curve,
    load_checkpoint,
    preset_table1,
    preset_table3,
    reevaluate,
    run_experiment,
    schedule_from_checkpoint,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajdiff",
                                description="desk-scale diffusion training lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset file")
    g.add_argument("--kind", choices=DATASET_KINDS, default="gaussian-ring")
    g.add_argument("--n", type=int, default=8000)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one config or a preset")
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--preset", choices=("table1-analog",),
                   help="multi-run preset instead of a single config")
    t.add_argument("--out-dir", default="runs")
    t.add_argument("--seeds", type=int, nargs="+", default=list(range(10)),
                   help="preset seeds")
    t.add_argument("--steps", type=int, default=5000,
                   help="preset fine-tune step budget")
    t.add_argument("--pretrain-steps", type=int, default=1500,
                   help="preset pretrain step budget")
    t.add_argument("--data-n", type=int, default=8000)
    t.add_argument("--eval-n", type=int, default=2000)
    t.add_argument("--workers", type=int, default=None)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--nfe", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label", type=int, default=None,
                   help="condition every draw on this class")
    s.add_argument("--live", action="store_true",
                   help="sample the live weights instead of the EMA")
    s.add_argument("--out", default="-", help="output JSONL ('-' = stdout)")

    e = sub.add_parser("eval", help="re-score a run directory's checkpoint")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--nfe", type=int, default=None)
    e.add_argument("--seeds", type=int, nargs="+", default=None)
    e.add_argument("--checkpoint", default="final")
    e.add_argument("--live", action="store_true")

    d = sub.add_parser("diagnose", help="leakage and gap diagnostics for a run")
    d.add_argument("--run-dir", required=True)
    d.add_argument("--nfe", type=int, default=None)
    d.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="loss-combination ablation preset")
    a.add_argument("--out-dir", default="runs")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--steps", type=int, default=5000)
    a.add_argument("--pretrain-steps", type=int, default=1500)
    a.add_argument("--data-n", type=int, default=8000)
    a.add_argument("--eval-n", type=int, default=2000)
    a.add_argument("--workers", type=int, default=None)

    r = sub.add_parser("report", help="aggregate a ledger into a table")
    r.add_argument("--ledger", required=True)
    r.add_argument("--out", default=None, help="also write the table as CSV")
    return p


def _cmd_gen_data(args) -> int:
    ds = gen_dataset(args.kind, args.n, args.d, args.k, seed=args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {ds.n} x {ds.d} {ds.kind} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.preset:
        out = preset_table1(args.out_dir, seeds=tuple(args.seeds),
                            steps=args.steps,
                            pretrain_steps=args.pretrain_steps,
                            data_n=args.data_n, eval_n=args.eval_n,
                            workers=args.workers)
        for name in ("stepwise", "e2e4", "e2e3"):
            for rec in out[name]:
                r = rec.reports[0]
                print(f"{name:9s} seed={rec.config.run.seed} "
                      f"frechet={r.frechet:.4f} alignment={r.alignment:.3f}")
        return 0
    if not args.config:
        print("train needs --config or --preset", file=sys.stderr)
        return 2
    rec = run_experiment(load_config(args.config))
    for r in rec.reports:
        print(f"run {rec.run_id}: frechet={r.frechet:.4f} mmd={r.mmd:.5f} "
              f"alignment={r.alignment:.3f} (nfe {r.nfe}, seed {r.seed})")
    print(f"artifacts in {rec.run_dir}")
    return 0


def _cmd_sample(args) -> int:
    net, ema, cond, blob = load_checkpoint(args.checkpoint)
    if not args.live:
        net = ema_denoiser_from(net, ema)
    schedule = schedule_from_checkpoint(blob)
    rng = np.random.default_rng(args.seed)
    e_c = None
    if cond is not None and net.cond_dim > 0:
        labels = [args.label] * args.n
        e_c = cond.rows(labels)
    samples = generate_samples(net, schedule, args.nfe, args.n, rng, e_c=e_c)
    lines = [json.dumps({"index": i, "x": list(map(float, row))})
             for i, row in enumerate(samples)]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    reports = reevaluate(args.run_dir, nfe=args.nfe, seeds=args.seeds,
                         checkpoint=args.checkpoint, use_ema=not args.live)
    print(json.dumps([r.to_dict() for r in reports], indent=1))
    return 0


def _cmd_diagnose(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.toml")
    from trajdiff.runner import build_problem

    ds, schedule = build_problem(cfg)
    leak_path = run_dir / "leakage.csv"
    with open(leak_path, "w") as f:
        f.write("t,kl\n")
        for t, kl in leakage_curve(schedule, ds):
            f.write(f"{t},{kl!r}\n")

    g = gap_report_for(run_dir, nfe=args.nfe, seed=args.seed)
    gap_path = run_dir / "gap.csv"
    with open(gap_path, "w") as f:
        f.write("kind,t,value\n")
        for rec in g.per_step:
            f.write(f"teacher_forced,{rec['t']},{rec['error']!r}\n")
        f.write(f"rollout,,{g.rollout!r}\n")
        f.write(f"gap,,{g.gap!r}\n")
    print(f"leakage curve -> {leak_path}")
    print(f"gap probe (rollout {g.rollout:.4f}, gap {g.gap:+.4f}) -> {gap_path}")
    return 0


def _cmd_ablate(args) -> int:
    out = preset_table3(args.out_dir, seed=args.seed, steps=args.steps,
                        pretrain_steps=args.pretrain_steps,
                        data_n=args.data_n, eval_n=args.eval_n,
                        workers=args.workers)
    print(Path(out["csv"]).read_text().rstrip())
    print(f"full table -> {out['csv']}")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.ledger)
    if not path.exists():
        print(f"ledger not found: {path}", file=sys.stderr)
        return 1
    with open(path) as f:
        rows = list(csv.DictReader(f))
    rows.sort(key=lambda r: (r["mode"], int(r["nfe"]), r["run_id"]))
    header = ("run_id", "mode", "nfe", "frechet", "mmd", "alignment")
    widths = [max(len(h), *(len(_fmt(r[h])) for r in rows)) if rows else len(h)
              for h in header]
    out_lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        out_lines.append("  ".join(_fmt(r[h]).ljust(w)
                                   for h, w in zip(header, widths)))
    out_lines.append("")
    out_lines.append("group means (mode, nfe):")
    for key in sorted({(r["mode"], r["nfe"]) for r in rows}):
        grp = [r for r in rows if (r["mode"], r["nfe"]) == key]
        fr = np.mean([float(r["frechet"]) for r in grp])
        al = np.mean([float(r["alignment"]) for r in grp])
        out_lines.append(f"  {key[0]:9s} nfe={key[1]}: n={len(grp)} "
                         f"frechet={fr:.4f} alignment={al:.3f}")
    table = "\n".join(out_lines)
    print(table)
    if args.out:
        with open(args.out, "w") as f:
            f.write(",".join(header) + "\n")
            for r in rows:
                f.write(",".join(r[h] for h in header) + "\n")
        print(f"csv -> {args.out}")
    return 0


def _fmt(v: str) -> str:
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v


_COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train,
             "sample": _cmd_sample, "eval": _cmd_eval,
             "diagnose": _cmd_diagnose, "ablate": _cmd_ablate,
             "report": _cmd_report}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
