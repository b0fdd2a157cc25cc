"""Report rendering: delimited text output plus matplotlib figures.

Every report path writes machine-readable delimited files and, alongside
them, PNG figures rendered with the Agg backend so no display is needed.
"""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402


def write_bench_report(report: BenchReport, samples: list[float], out_dir: str) -> list[str]:
    """Write key=value block, latency CSV, and latency figures; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    kv_path = os.path.join(out_dir, "bench_report.txt")
    with open(kv_path, "w") as fp:
        fp.write(report.to_kv())
    paths.append(kv_path)

    csv_path = os.path.join(out_dir, "bench_latency.csv")
    with open(csv_path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["payment_index", "latency_ms"])
        for i, s in enumerate(samples):
            writer.writerow([i, f"{s * 1e3:.6f}"])
    paths.append(csv_path)

    lat_ms = [s * 1e3 for s in samples]

    fig, (ax_hist, ax_series) = plt.subplots(1, 2, figsize=(11, 4))
    ax_hist.hist(lat_ms, bins=80, color="steelblue")
    ax_hist.set_xlabel("latency (ms)")
    ax_hist.set_ylabel("payments")
    ax_hist.set_title(f"send-to-accept latency ({report.mode})")
    ax_series.plot(lat_ms, lw=0.3, color="darkorange")
    ax_series.set_xlabel("payment index")
    ax_series.set_ylabel("latency (ms)")
    ax_series.set_title(
        f"throughput {report.throughput:.0f}/s, mean {report.latency_mean * 1e3:.3f} ms")
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "bench_latency.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    paths.append(fig_path)
    return paths


def write_soak_report(rows: list[dict], out_dir: str) -> list[str]:
    """rows: one dict per scenario (name, seed, channel_txs, violations, events)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    csv_path = os.path.join(out_dir, "soak_results.csv")
    fieldnames = ["scenario", "seed", "channel_txs", "violations", "events",
                  "payout_hash", "payout_broadcast"]
    with open(csv_path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fieldnames})
    paths.append(csv_path)

    kinds: dict[str, list[int]] = {}
    for row in rows:
        kind = str(row["scenario"]).rsplit("-", 1)[0]
        kinds.setdefault(kind, []).append(int(row["violations"]))

    fig, (ax_counts, ax_txs) = plt.subplots(1, 2, figsize=(11, 4))
    names = sorted(kinds)
    ax_counts.bar(names, [len(kinds[k]) for k in names], color="steelblue",
                  label="scenarios")
    ax_counts.bar(names, [sum(kinds[k]) for k in names], color="firebrick",
                  label="violations")
    ax_counts.set_ylabel("count")
    ax_counts.set_title("scenarios run vs invariant violations")
    ax_counts.tick_params(axis="x", rotation=45)
    ax_counts.legend()
    txs = [int(r["channel_txs"]) for r in rows]
    ax_txs.hist(txs, bins=range(0, 5), align="left", rwidth=0.8, color="darkorange")
    ax_txs.set_xlabel("on-chain channel transactions")
    ax_txs.set_ylabel("scenarios")
    ax_txs.set_title("on-chain footprint (must be <= 2)")
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "soak_summary.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    paths.append(fig_path)
    return paths
