"""End-to-end acceptance suite.

Each test covers one acceptance criterion; a conftest hook emits one
pass/fail line per criterion on the terminal so a full run reads as a
checklist.  All monetary assertions are exact integer satoshi comparisons
with zero tolerance unless a tolerance is stated inline.
"""
import os
import socket
import subprocess
import sys
import time

import pytest

from teepay.bench import run_lockstep
from teepay.demo import (ChannelConfig, btc, make_fixture, payment_schedule,
                         run_demo, settlement_payouts)
from teepay.enclave import ReplayOrGap, Role, close_fee_shares
from teepay.host import establish
from teepay.ledger import RejectReason, serialize_tx
from teepay.netsim import run as run_scenario, soak_scenarios

GOLDEN_TRACE = os.path.join(os.path.dirname(__file__), "data", "golden_demo_trace.txt")


# test function name -> (criterion number, label); conftest prints one
# "criterion N (...): PASS|FAIL" line per entry as results come in
CRITERIA = {}


def criterion(num, name):
    def deco(fn):
        CRITERIA[fn.__name__] = (num, name)
        return fn
    return deco


@criterion(1, "honest run, 1000 payments")
def test_criterion_1_honest_run():
    cfg = ChannelConfig(seed=1)  # 50/50 BTC deposits, 0.002 BTC fee per tx
    t0 = time.perf_counter()
    result = run_demo(cfg, 1000)
    elapsed = time.perf_counter() - t0

    # independent expectation from the (deterministic) schedule
    schedule = payment_schedule(cfg, 1000)
    fee_h, fee_b = close_fee_shares(cfg.fee_close)
    bal_h = cfg.deposit_hash - fee_h
    bal_b = cfg.deposit_broadcast - fee_b
    for payer, amount in schedule:
        if payer is Role.HASH_SIDE:
            bal_h, bal_b = bal_h - amount, bal_b + amount
        else:
            bal_h, bal_b = bal_h + amount, bal_b - amount

    assert result.ok
    assert result.payout_hash == bal_h          # exact, zero tolerance
    assert result.payout_broadcast == bal_b     # exact, zero tolerance
    assert (result.payout_hash + result.payout_broadcast
            == cfg.deposit_hash + cfg.deposit_broadcast - cfg.fee_close)
    assert result.channel_txs == 2              # funding + settlement only
    assert elapsed < 10.0, f"took {elapsed:.2f}s"


@criterion(2, "published demo parameters reproduce as a golden trace")
def test_criterion_2_demo_reproduction():
    cfg = ChannelConfig(seed=1)  # 50/50 BTC deposits, 0.002 BTC per-tx fee
    result = run_demo(cfg, 10, target_broadcast_final=btc(9))
    assert result.ok
    # the broadcast side closes holding exactly 9 BTC; the hash side receives
    # the remaining channel value net of the settlement fee
    assert result.payout_broadcast == 900_000_000
    assert result.payout_hash == 9_099_800_000
    with open(GOLDEN_TRACE) as fp:
        golden = fp.read().splitlines()
    assert result.trace == golden


@criterion(3, "adversarial soak: 500 seeded scenarios, zero violations")
def test_criterion_3_security_suite():
    t0 = time.perf_counter()
    scenarios = soak_scenarios(500, first_seed=1)
    assert len(scenarios) == 500
    for sc in scenarios:
        trace = run_scenario(sc)  # raises InvariantViolation on any breach
        assert trace.violations == [], sc.name
        assert trace.channel_txs <= 2, sc.name
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.2f}s"


def _paid_channel(seed, with_replay):
    fx = make_fixture(ChannelConfig(seed=seed))
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    enc_a = fx.node_hash.enclave
    enc_b = fx.node_broadcast.enclave
    cts = [enc_a.pay(amount) for amount in (10_000, 20_000, 30_000)]
    enc_b.receive_payment(cts[0])
    enc_b.receive_payment(cts[1])
    if with_replay:
        with pytest.raises(ReplayOrGap):
            enc_b.receive_payment(cts[1])  # adversary redelivers ciphertext 2
    enc_b.receive_payment(cts[2])
    settlement = enc_b.settle()
    assert fx.ledger.submit(settlement).accepted
    return settlement


@criterion(4, "replayed payment rejected; settlement bit-identical")
def test_criterion_4_replay_attack():
    clean = _paid_channel(seed=31, with_replay=False)
    replayed = _paid_channel(seed=31, with_replay=True)
    assert serialize_tx(replayed) == serialize_tx(clean)  # bit-identical


@criterion(5, "maul recovery returns initial deposits")
def test_criterion_5_maul_recovery():
    cfg = ChannelConfig(seed=32)
    fx = make_fixture(cfg)
    fx.node_broadcast.maul_on_broadcast = True
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    assert fx.node_hash.maul_recovered
    assert fx.ledger.channel_tx_count() == 2  # mauled funding + immediate refund

    refund = fx.ledger.confirmed[-1]
    assert refund.lock_time == 0  # reissued refund is immediately spendable
    fee_h, fee_b = close_fee_shares(cfg.fee_close)
    payouts = settlement_payouts(cfg, refund)
    assert payouts == (cfg.deposit_hash - fee_h, cfg.deposit_broadcast - fee_b)

    # the originally issued refund spends the un-mauled funding txid,
    # which never confirmed
    original = fx.node_broadcast.refund_tx
    fx.ledger.advance_height(cfg.refund_lock_height)
    verdict = fx.ledger.submit(original)
    assert str(verdict) == "Rejected(MissingInput)"


@criterion(6, "refund honors the lock height; settlement and refund exclusive")
def test_criterion_6_timeout_semantics():
    cfg = ChannelConfig(seed=33)

    fx = make_fixture(cfg)
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    fx.ledger.advance_height(cfg.refund_lock_height - 1)
    assert fx.node_hash.refund_after_timeout().reason is RejectReason.PREMATURE
    fx.ledger.advance_height(1)
    assert fx.node_hash.refund_after_timeout().accepted

    # race order 1: settlement first, refund loses
    fx = make_fixture(cfg)
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    fx.ledger.advance_height(cfg.refund_lock_height)
    _, settle_verdict = fx.node_broadcast.terminate()
    assert settle_verdict.accepted
    assert fx.node_hash.refund_after_timeout().reason is RejectReason.DOUBLE_SPEND
    assert fx.ledger.channel_tx_count() == 2

    # race order 2: refund first, settlement loses
    fx = make_fixture(cfg)
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    fx.ledger.advance_height(cfg.refund_lock_height)
    assert fx.node_hash.refund_after_timeout().accepted
    _, settle_verdict = fx.node_broadcast.terminate()
    assert settle_verdict.reason is RejectReason.DOUBLE_SPEND
    assert fx.ledger.channel_tx_count() == 2


@criterion(7, "lock-step benchmark: 100k payments each way under 60s")
def test_criterion_7_performance():
    n = 100_000
    report, samples = run_lockstep(n, "inprocess", seed=1)
    assert report.wall_time < 60.0, f"took {report.wall_time:.2f}s"
    assert report.messages == 2 * n  # exactly one message per payment
    assert len(samples) == 2 * n
    assert report.balances_restored
    # serial in-process: throughput * mean latency ~= 1, within 25%
    product = report.throughput * report.latency_mean
    assert 0.75 <= product <= 1.25, f"throughput*latency = {product:.3f}"
    # published hardware figures (2480 payments/s at 0.40 ms on TEE hardware)
    # are context only and deliberately not asserted against emulation
    print(f"bench context: emulated {report.throughput:.0f}/s at "
          f"{report.latency_mean * 1e3:.3f} ms mean; hardware baseline "
          f"2480/s at 0.400 ms")


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@criterion(8, "two-process run matches the in-process ledger bit for bit")
def test_criterion_8_cross_process_parity():
    seed, payments = 34, 50
    ledger_port, peer_port = _free_port(), _free_port()
    base = [sys.executable, "-m", "teepay.cli", "node", "--seed", str(seed),
            "--payments", str(payments)]
    server = subprocess.Popen(
        base + ["--ledger-serve", f"127.0.0.1:{ledger_port}"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
    try:
        time.sleep(0.5)
        common = base + ["--ledger", f"127.0.0.1:{ledger_port}"]
        node_b = subprocess.Popen(
            common + ["--role", "broadcast", "--listen", f"127.0.0.1:{peer_port}"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        time.sleep(0.3)
        node_a = subprocess.Popen(
            common + ["--role", "hash", "--connect", f"127.0.0.1:{peer_port}"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        out_a, _ = node_a.communicate(timeout=90)
        out_b, _ = node_b.communicate(timeout=90)
        assert node_a.returncode == 0, out_a.decode()
        assert node_b.returncode == 0, out_b.decode()

        from teepay.node import LedgerClient

        client = LedgerClient("127.0.0.1", ledger_port)
        remote_dump = client.dump_text()
        client.shutdown()
        client.close()
    finally:
        server.terminate()
        server.wait(timeout=10)

    inproc = run_demo(ChannelConfig(seed=seed), payments,
                      target_broadcast_final=btc(9))
    assert inproc.ok
    assert remote_dump == inproc.fixture.ledger.dump_str()
