"""Command-line harness.

Commands: ``gen-data``, ``train``, ``eval-forecast``, ``run-mpc``,
``lead-sweep``, ``diagnose``. Outputs are versioned CSV tables, JSON
summaries, and deterministic SVG figures, all carrying (preset, model,
seed, git) provenance. A JSON config file may supply per-command
defaults; explicit flags win, and the effective configuration is echoed
into the output directory.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import datagen as dg
from . import model as mdl
from . import results
from . import scp_mpc as mpc
from . import simulators as sim
from . import svgplot
from . import training as tr


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: usage error: {message}\n")


def build_parser():
    p = _Parser(prog="bkmpc", description=__doc__)
    p.add_argument("--config", help="JSON file with per-command defaults")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a windowed dataset")
    g.add_argument("--preset", required=True, choices=sim.PRESET_NAMES)
    g.add_argument("--out", required=True)
    g.add_argument("--train-windows", type=int, default=None)
    g.add_argument("--test-windows", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True, choices=("linear", "bilinear"))
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--latent-dim", type=int, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--no-log-test", action="store_true")
    t.add_argument("--log-test-every", type=int, default=None)

    e = sub.add_parser("eval-forecast", help="forecast-MSE table from runs")
    e.add_argument("--data", required=True)
    e.add_argument("--run", action="append", required=True,
                   help="train output directory (repeatable)")
    e.add_argument("--out", required=True)

    r = sub.add_parser("run-mpc", help="closed-loop episodes")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--preset", required=True, choices=sim.PRESET_NAMES)
    r.add_argument("--controller", required=True,
                   choices=mpc.CONTROLLER_KINDS)
    r.add_argument("--episodes", type=int, default=None)
    r.add_argument("--lead", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--episode-len", type=int, default=None)
    r.add_argument("--out", required=True)

    s = sub.add_parser("lead-sweep", help="commitment-window sweep")
    s.add_argument("--preset", required=True, choices=sim.PRESET_NAMES)
    s.add_argument("--linear-ckpt", required=True)
    s.add_argument("--bilinear-ckpt", required=True)
    s.add_argument("--lead", default=None, help="comma list, default 0,1,3,5")
    s.add_argument("--episodes", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--episode-len", type=int, default=None)
    s.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="coupling norms and disk diagnostics")
    d.add_argument("--ckpt", action="append", default=[])
    d.add_argument("--episode-log", action="append", default=[])
    d.add_argument("--out", required=True)
    return p


_DEFAULTS = {
    "gen-data": {"train_windows": 39_900, "test_windows": 4_000, "seed": 1},
    "train": {
        "epochs": 401, "seed": 1, "batch_size": 256, "lr": 1e-3,
        "latent_dim": None, "hidden": None, "log_test_every": 10,
    },
    "eval-forecast": {},
    "run-mpc": {"episodes": 10, "lead": 0, "seed": 1, "episode_len": 1_000},
    "lead-sweep": {
        "lead": "0,1,3,5", "episodes": 10, "seed": 1, "episode_len": 1_000,
    },
    "diagnose": {},
}


def _resolve(args):
    """CLI > config-file > built-in default, per option."""
    config = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    section = config.get(args.command, {})
    for key, builtin in _DEFAULTS.get(args.command, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, section.get(key, builtin))
    return args


def _echo_config(args, outdir):
    os.makedirs(outdir, exist_ok=True)
    effective = {
        k: v for k, v in vars(args).items() if k != "config" and v is not None
    }
    effective["git"] = results.git_rev()
    results.write_json(os.path.join(outdir, "effective_config.json"), effective)


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"checkpoint not found: {path} (run `bkmpc train` first or fix "
            "the path)"
        )
    return mdl.load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = sim.preset(args.preset)
    ds = dg.generate_dataset(
        cfg,
        train_pool=args.train_windows,
        test_windows=args.test_windows,
        seed=args.seed,
    )
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(outdir, exist_ok=True)
    dg.write_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.counts()} windows of preset {ds.preset}")
    return 0


def cmd_train(args):
    ds = dg.read_dataset(args.data)
    overrides = {}
    if args.latent_dim:
        overrides.update(latent_dim=args.latent_dim, rank=args.latent_dim)
    if args.hidden:
        overrides.update(hidden=args.hidden)
    params = mdl.params_for_dataset(ds, args.model, seed=args.seed, **overrides)
    cfg = tr.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        log_test_every=args.log_test_every,
    )
    _echo_config(args, args.out)
    final, best, log = tr.train(ds, params, cfg, log_test=not args.no_log_test)
    rev = results.git_rev()
    for tag, p in (("final", final), ("best", best)):
        meta = {
            "epoch": log.best_epoch if tag == "best" else cfg.epochs - 1,
            "val_loss": log.best_val if tag == "best" else log.val_losses[-1],
            "seed": cfg.seed,
            "data_seed": ds.seed,
            "preset": ds.preset,
            "best_test_mse": log.best_test_mse,
            "git": rev,
        }
        mdl.save_checkpoint(
            p, os.path.join(args.out, f"{args.model}-{tag}.bkcp"), meta=meta
        )
    log.to_csv(os.path.join(args.out, f"{args.model}-trainlog.csv"), git_rev=rev)
    print(
        f"trained {args.model} on {ds.preset}: best val {log.best_val:.6g} "
        f"at epoch {log.best_epoch}"
    )
    return 0


def _read_trainlog(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            rows.append(dict(zip(header, line.strip().split(","))))
    return rows


def cmd_eval_forecast(args):
    ds = dg.read_dataset(args.data)
    te_s, te_c = ds.subset(dg.SPLIT_TEST)
    rev = results.git_rev()
    rows = []
    for rundir in args.run:
        found = [
            f for f in sorted(os.listdir(rundir)) if f.endswith("-best.bkcp")
        ] if os.path.isdir(rundir) else []
        if not found:
            raise FileNotFoundError(
                f"no '*-best.bkcp' checkpoint in run directory: {rundir}"
            )
        for fname in found:
            kind = fname.rsplit("-best.bkcp", 1)[0]
            params = _load_checkpoint(os.path.join(rundir, fname))
            best = tr.evaluate_forecast(params, te_s, te_c)
            mean50 = float("nan")
            logpath = os.path.join(rundir, f"{kind}-trainlog.csv")
            if os.path.exists(logpath):
                mses = [
                    float(r["test_mse"])
                    for r in _read_trainlog(logpath)
                    if r["test_mse"] != "nan"
                ]
                if mses:
                    mean50 = float(np.mean(mses[-50:]))
            for metric, value in (("best", best), ("mean_50", mean50)):
                rows.append((
                    results.FORECAST_SCHEMA, ds.preset, kind, params.seed,
                    rev, metric, f"{value:.10g}", te_s.shape[0],
                ))
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args, args.out)
    path = os.path.join(args.out, "forecast.csv")
    results.write_csv(path, results.FORECAST_COLUMNS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _episode_batch(preset, params, mpc_cfg, controller, lead, episodes, seed,
                   outdir, rev):
    """Run episodes, write per-episode CSVs, return logs + summary rows."""
    cfg_sim = sim.preset(preset)
    logs = []
    rows = []
    for ep in range(episodes):
        log = mpc.run_episode(
            cfg_sim, params, mpc_cfg, controller=controller, lead=lead,
            seed=seed, episode_index=ep,
        )
        logs.append(log)
        fname = f"episode-{controller}-d{lead}-ep{ep}.csv"
        log.to_csv(os.path.join(outdir, fname), git_rev=rev)
        solves = log.solve_wall_s[log.solve_wall_s > 0]
        rows.append((
            results.MPC_SUMMARY_SCHEMA, preset, params.hyper.kind,
            seed, rev, controller, lead, ep, log.steps,
            f"{log.final_log_cost():.6g}",
            f"{float(np.mean(solves)) if solves.size else 0.0:.6g}",
            f"{log.straddle_fraction():.4f}", log.termination,
        ))
    return logs, rows


def cmd_run_mpc(args):
    params = _load_checkpoint(args.ckpt)
    system = args.preset.split("-")[0]
    if params.preset and not params.preset.startswith(system):
        raise ValueError(
            f"checkpoint was trained on {params.preset}, not {args.preset}"
        )
    mpc_cfg = mpc.mpc_preset(system, episode_len=args.episode_len)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args, args.out)
    rev = results.git_rev()
    logs, rows = _episode_batch(
        args.preset, params, mpc_cfg, args.controller, args.lead,
        args.episodes, args.seed, args.out, rev,
    )
    results.write_csv(
        os.path.join(args.out, "mpc_summary.csv"),
        results.MPC_SUMMARY_COLUMNS,
        rows,
    )
    finals = [log.final_log_cost() for log in logs]
    summary = {
        "preset": args.preset,
        "model": params.hyper.kind,
        "controller": args.controller,
        "lead": args.lead,
        "episodes": args.episodes,
        "seed": args.seed,
        "git": rev,
        "final_log_costs": finals,
        "mean_final_log_cost": float(np.mean(finals)),
    }
    results.write_json(os.path.join(args.out, "summary.json"), summary)
    print(
        f"{args.controller} d={args.lead} on {args.preset}: mean final "
        f"log-cost {summary['mean_final_log_cost']:.4f}"
    )
    return 0


def _band_rows_and_series(preset, model_kind, seed, rev, controller, lead,
                          logs, dt):
    max_len = max(log.steps for log in logs)
    rows = []
    xs, means, hws = [], [], []
    for step in range(max_len):
        alive = [log.running_avg[step] for log in logs if log.steps > step]
        mean = float(np.mean(alive))
        std = float(np.std(alive))
        rows.append((
            results.BAND_SCHEMA, preset, model_kind, seed, rev, controller,
            lead, step, f"{mean:.10g}", f"{0.3 * std:.10g}", len(alive),
        ))
        xs.append(step * dt)
        means.append(mean)
        hws.append(0.3 * std)
    return rows, svgplot.Series(f"{controller} d={lead}", xs, means, hws)


def cmd_lead_sweep(args):
    leads = [int(v) for v in str(args.lead).split(",") if v != ""]
    lin = _load_checkpoint(args.linear_ckpt)
    bil = _load_checkpoint(args.bilinear_ckpt)
    system = args.preset.split("-")[0]
    mpc_cfg = mpc.mpc_preset(system, episode_len=args.episode_len)
    cfg_sim = sim.preset(args.preset)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args, args.out)
    rev = results.git_rev()

    summary_rows, lead_rows, wall_rows, band_rows = [], [], [], []
    series_by_lead = {d: [] for d in leads}
    for controller, params in (("linear", lin), ("scp5", bil)):
        for d in leads:
            logs, rows = _episode_batch(
                args.preset, params, mpc_cfg, controller, d, args.episodes,
                args.seed, args.out, rev,
            )
            summary_rows.extend(rows)
            finals = np.array([log.final_log_cost() for log in logs])
            lead_rows.append((
                results.LEAD_TABLE_SCHEMA, args.preset, params.hyper.kind,
                args.seed, rev, controller, d, len(logs),
                f"{finals.mean():.6g}", f"{finals.std():.6g}",
            ))
            solve_walls = np.concatenate(
                [log.solve_wall_s[log.solve_wall_s > 0] for log in logs]
            )
            wall_rows.append((
                results.WALL_TABLE_SCHEMA, args.preset, params.hyper.kind,
                args.seed, rev, controller, d,
                f"{float(solve_walls.mean()):.6g}",
            ))
            rows_b, series = _band_rows_and_series(
                args.preset, params.hyper.kind, args.seed, rev, controller,
                d, logs, cfg_sim.dt,
            )
            band_rows.extend(rows_b)
            series_by_lead[d].append(series)

    results.write_csv(
        os.path.join(args.out, "mpc_summary.csv"),
        results.MPC_SUMMARY_COLUMNS, summary_rows,
    )
    results.write_csv(
        os.path.join(args.out, "lead_table.csv"),
        results.LEAD_TABLE_COLUMNS, lead_rows,
    )
    results.write_csv(
        os.path.join(args.out, "wall_table.csv"),
        results.WALL_TABLE_COLUMNS, wall_rows,
    )
    results.write_csv(
        os.path.join(args.out, "cost_bands.csv"),
        results.BAND_COLUMNS, band_rows,
    )
    unit = "s" if system == "cartpole" else "h"
    for d in leads:
        svgplot.emit_svg(
            series_by_lead[d],
            os.path.join(args.out, f"lead-d{d}.svg"),
            title=f"{args.preset}: running-average cost, d={d}",
            xlabel=f"time [{unit}]",
            ylabel="log10 running-average cost",
            logy=True,
        )
    print(f"lead sweep done: {len(lead_rows)} (controller, d) cells")
    return 0


def cmd_diagnose(args):
    rev = results.git_rev()
    rows = []
    for path in args.ckpt:
        params = _load_checkpoint(path)
        rows.append((
            results.DIAG_SCHEMA, params.preset, params.hyper.kind,
            params.seed, rev, "coupling_frobenius_norm",
            f"{mdl.g_norm(params):.10g}", os.path.basename(path),
        ))
    for path in args.episode_log:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            idx = header.index("gershgorin_straddle")
            pidx = header.index("preset")
            cidx = header.index("controller")
            flags, preset, ctl = [], "", ""
            for line in fh:
                parts = line.strip().split(",")
                flags.append(int(parts[idx]))
                preset, ctl = parts[pidx], parts[cidx]
        rows.append((
            results.DIAG_SCHEMA, preset, ctl, "-", rev,
            "gershgorin_straddle_fraction",
            f"{float(np.mean(flags)) if flags else 0.0:.6g}",
            os.path.basename(path),
        ))
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args, args.out)
    path = os.path.join(args.out, "diagnose.csv")
    results.write_csv(path, results.DIAG_COLUMNS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-forecast": cmd_eval_forecast,
    "run-mpc": cmd_run_mpc,
    "lead-sweep": cmd_lead_sweep,
    "diagnose": cmd_diagnose,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        args = _resolve(args)
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"bkmpc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
