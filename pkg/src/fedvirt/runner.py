"""Run directories: configuration snapshot, metrics CSV, summary and checkpoints.

Layout of a run directory::

    config.json           the parsed configuration, re-parseable
    metrics.csv           "# fedvirt-metrics v1" then a header row and one row per round
    summary.json          final accuracies, seed, wall time, notes
    model_final.fvck      final global model
    virtual/t{t}_global.fvck, virtual/t{t}_client{i}.fvck
                          virtual datasets at t = 0, tau and T
    FAILED                present only if the run stopped with an error
"""
import csv
import io
import json
import math
import os
import time

from . import checkpoint
from .federation import make_clients, run_pipeline

METRICS_SCHEMA = "# fedvirt-metrics v1"


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def metrics_csv(rows):
    """Render metric rows as CSV text; floats use ``repr`` so they round-trip exactly."""
    buf = io.StringIO()
    buf.write(METRICS_SCHEMA + "\n")
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0])
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def read_metrics(path):
    """-> list of dicts with floats (blank cells become NaN), ints for ``round``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != METRICS_SCHEMA:
            raise ValueError(f"{path}: missing or unknown schema line {first!r}")
        rows = []
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                if k == "stage":
                    out[k] = v
                elif k == "round":
                    out[k] = int(v)
                else:
                    out[k] = float(v) if v != "" else float("nan")
            rows.append(out)
    return rows


def summary_from_rows(rows, cfg, wall_time, notes):
    last = rows[-1]
    per_client = {k[len("acc_"):]: last[k] for k in last if k.startswith("acc_") and k != "acc_avg"}
    return {
        "rule": cfg.rule,
        "seed": cfg.seed,
        "rounds": last["round"],
        "final_accuracy": per_client,
        "final_average": last["acc_avg"],
        "wall_time_s": wall_time,
        "notes": notes,
    }


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def run(cfg, out_dir=None, clients=None, on_round=None, on_report=None, init=None):
    """Execute ``cfg`` and write its run directory; returns (out_dir, RunResult).

    ``init`` is an optional shared stage-1 result (see ``federation.initialize``).
    """
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    failed = os.path.join(out_dir, "FAILED")
    if os.path.exists(failed):
        os.remove(failed)
    _write(os.path.join(out_dir, "config.json"), cfg.to_json())
    start = time.perf_counter()
    rows = []

    def keep(row):
        rows.append(row)
        # rewrite as we go so an interrupted run still leaves its progress
        _write(os.path.join(out_dir, "metrics.csv"), metrics_csv(rows))
        if on_round:
            on_round(row)

    try:
        clients = make_clients(cfg) if clients is None else clients
        result = run_pipeline(cfg, clients, on_round=keep, on_report=on_report, init=init)
        checkpoint.save_model(os.path.join(out_dir, "model_final.fvck"), result.server.global_params)
        vdir = os.path.join(out_dir, "virtual")
        os.makedirs(vdir, exist_ok=True)
        for t, snap in sorted(result.snapshots.items()):
            if snap["global"] is not None:
                checkpoint.save_virtual(os.path.join(vdir, f"t{t}_global.fvck"), snap["global"])
            for i, v in enumerate(snap["clients"]):
                checkpoint.save_virtual(os.path.join(vdir, f"t{t}_client{i}.fvck"), v)
        summary = summary_from_rows(result.rows, cfg, time.perf_counter() - start, result.notes)
        _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except BaseException as e:
        _write(failed, f"{type(e).__name__}: {e}\n")
        raise
    return out_dir, result


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def compare(run_dirs):
    """Method-by-client accuracy table from completed run directories.

    Returns ``(header, rows, failed)``: rows are sorted by method then
    directory; ``Average`` is recomputed as the unweighted mean of the client
    columns and checked against the stored value.
    """
    entries, failed = [], []
    client_cols = set()
    for d in run_dirs:
        path = os.path.join(d, "summary.json")
        if not os.path.exists(path) or os.path.exists(os.path.join(d, "FAILED")):
            failed.append(d)
            continue
        with open(path, encoding="utf-8") as fh:
            s = json.load(fh)
        accs = {str(k): float(v) for k, v in s["final_accuracy"].items()}
        client_cols |= set(accs)
        entries.append((s["rule"], d, accs, s["final_average"]))
    cols = sorted(client_cols, key=lambda c: int(c) if c.isdigit() else c)
    header = ["method", "run"] + [f"client{c}" for c in cols] + ["Average"]
    rows = []
    for rule, d, accs, stored in sorted(entries, key=lambda e: (e[0], e[1])):
        vals = [accs[c] for c in cols if c in accs and not math.isnan(accs[c])]
        avg = sum(vals) / len(vals) if vals else float("nan")
        if vals and not math.isnan(stored) and abs(avg - stored) > 1e-12:
            raise ValueError(f"{d}: stored average {stored} disagrees with recomputed {avg}")
        rows.append([rule, d] + [accs.get(c, float("nan")) for c in cols] + [avg])
    return header, rows, failed


def format_table(header, rows, failed=()):
    def cell(v):
        return f"{100 * v:.2f}" if isinstance(v, float) else str(v)
    table = [header] + [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip() for r in table]
    lines += [f"FAILED  {d}" for d in failed]
    return "\n".join(lines) + "\n"


def format_csv(header, rows, failed=()):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    for d in failed:
        w.writerow(["FAILED", d] + [""] * (len(header) - 2))
    return buf.getvalue()
