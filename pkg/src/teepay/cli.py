"""Command-line entry point.

Subcommands: `demo` (honest end-to-end run), `scenario` (named or file-based
adversarial runs), `soak` (the seeded scenario suite), `bench` (lock-step
benchmark), and `node` (two-process mode over sockets, including the shared
ledger service).

Exit codes: 0 pass, 1 invariant violation or protocol failure, 2 usage error.
"""
from __future__ import annotations

import os
import sys

import click

from .demo import ChannelConfig, btc, run_demo
from .enclave import Role
from .netsim import (BUILTIN_NAMES, InvariantViolation, ScenarioParseError,
                     builtin_scenario, parse_scenario_file, run as run_scenario,
                     soak_scenarios)


def _config_options(fn):
    fn = click.option("--deposit-a", type=float, default=50.0, show_default=True,
                      help="HashSide deposit in BTC")(fn)
    fn = click.option("--deposit-b", type=float, default=50.0, show_default=True,
                      help="BroadcastSide deposit in BTC")(fn)
    fn = click.option("--fee", type=float, default=0.002, show_default=True,
                      help="fee in BTC per on-chain transaction")(fn)
    fn = click.option("--lock-height", type=int, default=144, show_default=True,
                      help="refund transaction lock height")(fn)
    fn = click.option("--seed", type=int, default=1, show_default=True)(fn)
    return fn


def _make_config(deposit_a, deposit_b, fee, lock_height, seed) -> ChannelConfig:
    return ChannelConfig(seed=seed, deposit_hash=btc(deposit_a),
                         deposit_broadcast=btc(deposit_b),
                         fee_setup=btc(fee), fee_close=btc(fee),
                         refund_lock_height=lock_height)


@click.group()
def main():
    """Duplex payment channels with emulated TEEs on a simulated ledger."""


@main.command()
@_config_options
@click.option("--payments", type=int, default=1000, show_default=True,
              help="number of random bidirectional payments")
@click.option("--close-b", type=float, default=9.0, show_default=True,
              help="steer the final payment so BroadcastSide closes at this "
                   "balance in BTC; negative disables steering")
def demo(deposit_a, deposit_b, fee, lock_height, seed, payments, close_b):
    """Full establish -> pay -> settle run with a human-readable trace."""
    cfg = _make_config(deposit_a, deposit_b, fee, lock_height, seed)
    target = btc(close_b) if close_b >= 0 and payments > 0 else None
    try:
        result = run_demo(cfg, payments, target_broadcast_final=target)
    except Exception as exc:
        click.echo(f"demo failed: {exc}", err=True)
        sys.exit(1)
    for line in result.trace:
        click.echo(line)
    sys.exit(0 if result.ok else 1)


@main.command()
@click.argument("name_or_path")
@click.option("--seed", type=int, default=1, show_default=True)
def scenario(name_or_path, seed):
    """Run a builtin scenario (see `teepay scenario list`) or a scenario file."""
    if name_or_path == "list":
        for name in BUILTIN_NAMES:
            click.echo(name)
        return
    try:
        if name_or_path in BUILTIN_NAMES:
            sc = builtin_scenario(name_or_path, seed)
        elif os.path.exists(name_or_path):
            sc = parse_scenario_file(name_or_path)
        else:
            raise click.UsageError(f"unknown scenario: {name_or_path}")
        trace = run_scenario(sc)
    except ScenarioParseError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    except InvariantViolation as exc:
        click.echo(f"INVARIANT VIOLATION: {exc}", err=True)
        for line in exc.trace:
            click.echo(line, err=True)
        sys.exit(1)
    click.echo(trace.text(), nl=False)
    sys.exit(0)


@main.command()
@click.option("--count", type=int, default=500, show_default=True)
@click.option("--first-seed", type=int, default=1, show_default=True)
@click.option("--out-dir", type=click.Path(), default=None,
              help="write soak_results.csv and summary figures here")
def soak(count, first_seed, out_dir):
    """Run the seeded adversarial scenario suite and report violations."""
    rows = []
    violations = 0
    for sc in soak_scenarios(count, first_seed):
        try:
            trace = run_scenario(sc)
            n_viol = len(trace.violations)
        except InvariantViolation as exc:
            click.echo(f"VIOLATION {exc}", err=True)
            n_viol = 1
            trace = None
        violations += n_viol
        rows.append({
            "scenario": sc.name, "seed": sc.seed,
            "channel_txs": trace.channel_txs if trace else -1,
            "violations": n_viol,
            "events": len(trace.events) if trace else 0,
            "payout_hash": trace.payout_hash if trace else None,
            "payout_broadcast": trace.payout_broadcast if trace else None,
        })
    click.echo(f"scenarios={len(rows)} violations={violations}")
    if out_dir:
        from .report import write_soak_report

        for path in write_soak_report(rows, out_dir):
            click.echo(f"wrote {path}")
    sys.exit(0 if violations == 0 else 1)


@main.command()
@click.option("-n", "--payments", type=int, default=100_000, show_default=True,
              help="payments per direction")
@click.option("--mode", type=click.Choice(["inprocess", "loopback"]),
              default="inprocess", show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out-dir", type=click.Path(), default=None,
              help="write bench_report.txt, bench_latency.csv and figures here")
def bench(payments, mode, seed, out_dir):
    """Lock-step bidirectional payment benchmark."""
    from .bench import run_lockstep

    try:
        report, samples = run_lockstep(payments, mode, seed)
    except Exception as exc:
        click.echo(f"benchmark failed: {exc}", err=True)
        sys.exit(1)
    click.echo(report.to_kv(), nl=False)
    if out_dir:
        from .report import write_bench_report

        for path in write_bench_report(report, samples, out_dir):
            click.echo(f"wrote {path}")
    sys.exit(0)


@main.command()
@_config_options
@click.option("--role", type=click.Choice(["hash", "broadcast"]), default=None,
              help="which side this process plays")
@click.option("--listen", default=None, help="host:port to accept the peer on")
@click.option("--connect", default=None, help="host:port of the peer")
@click.option("--ledger", "ledger_addr", default=None, help="host:port of the ledger service")
@click.option("--ledger-serve", default=None,
              help="host:port; run the shared ledger service instead of a party")
@click.option("--payments", type=int, default=100, show_default=True)
@click.option("--close-b", type=float, default=9.0, show_default=True)
def node(deposit_a, deposit_b, fee, lock_height, seed, role, listen, connect,
         ledger_addr, ledger_serve, payments, close_b):
    """Run one party (or the ledger service) of a two-process channel."""
    cfg = _make_config(deposit_a, deposit_b, fee, lock_height, seed)
    if ledger_serve:
        from .node import serve_ledger

        host, port = ledger_serve.rsplit(":", 1)[0], int(ledger_serve.rsplit(":", 1)[1])
        click.echo(f"ledger service on {host}:{port}")
        serve_ledger(host, port, cfg)
        return
    if role is None or ledger_addr is None:
        raise click.UsageError("--role and --ledger are required for a party node")
    from .node import NodeError, run_party

    party_role = Role.HASH_SIDE if role == "hash" else Role.BROADCAST_SIDE
    target = btc(close_b) if close_b >= 0 and payments > 0 else None
    try:
        summary = run_party(cfg, party_role, listen, connect, ledger_addr,
                            payments, target)
    except NodeError as exc:
        click.echo(f"node failed: {exc}", err=True)
        sys.exit(1)
    for key, value in summary.items():
        click.echo(f"{key}={value}")
    sys.exit(0)


if __name__ == "__main__":
    main()
