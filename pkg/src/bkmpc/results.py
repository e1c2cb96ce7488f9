"""CSV / JSON artifact writers with schema versions and provenance.

Every emitted table row carries (preset, model, seed, git revision) so
aggregate numbers trace back to the runs that produced them. Schema names
are versioned in the first column; any column change bumps the version.
"""

import json
import subprocess


def git_rev():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        rev = out.stdout.strip()
        return rev if out.returncode == 0 and rev else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


FORECAST_SCHEMA = "forecast.v1"
FORECAST_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "metric", "mse", "test_windows",
)

MPC_SUMMARY_SCHEMA = "mpc_summary.v1"
MPC_SUMMARY_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "controller", "lead",
    "episode", "steps", "final_log_cost", "mean_wall_per_solve_s",
    "straddle_fraction", "termination",
)

LEAD_TABLE_SCHEMA = "lead_table.v1"
LEAD_TABLE_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "controller", "lead",
    "episodes", "mean_final_log_cost", "std_final_log_cost",
)

WALL_TABLE_SCHEMA = "wall_table.v1"
WALL_TABLE_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "controller", "lead",
    "mean_wall_per_control_step_s",
)

BAND_SCHEMA = "cost_band.v1"
BAND_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "controller", "lead",
    "step", "mean_running_avg", "band_halfwidth", "episodes_alive",
)

DIAG_SCHEMA = "diagnose.v1"
DIAG_COLUMNS = (
    "schema", "preset", "model", "seed", "git", "quantity", "value", "source",
)
