"""Deterministic channel fixtures and the honest end-to-end demo run.

Everything here derives from an integer seed so that the in-process demo, the
scenario runner, and the two-process mode all construct bit-identical keys,
funding outputs, and payment schedules.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import crypto, ledger as ledger_mod
from .enclave import ChannelParams, Enclave, Role, SetupData
from .host import DirectLink, PartyNode, establish, pump_until_idle
from .ledger import Ledger, LockCondition, OutPoint, Output, Transaction

SATOSHI_PER_BTC = 10**8
MAX_RANDOM_PAYMENT = 10_000_000  # 0.1 BTC keeps schedules feasible at any deposit split

_ROLE_LABEL = {Role.HASH_SIDE: "A", Role.BROADCAST_SIDE: "B"}


def btc(amount: float) -> int:
    return round(amount * SATOSHI_PER_BTC)


@dataclass
class ChannelConfig:
    seed: int = 1
    deposit_hash: int = btc(50)
    deposit_broadcast: int = btc(50)
    fee_setup: int = btc(0.002)
    fee_close: int = btc(0.002)
    refund_lock_height: int = 144


def authority_for(seed: int) -> crypto.SigningKeyPair:
    return crypto.generate_signing_keypair(seed, "authority")


def party_keys(seed: int, role: Role) -> tuple[crypto.SigningKeyPair, bytes]:
    label = _ROLE_LABEL[role]
    btc_keys = crypto.generate_signing_keypair(seed, f"{label}/btc")
    change = crypto.generate_signing_keypair(seed, f"{label}/change").public
    return btc_keys, change


def funding_amount(cfg: ChannelConfig, role: Role) -> int:
    deposit = cfg.deposit_hash if role is Role.HASH_SIDE else cfg.deposit_broadcast
    if deposit == 0:
        return 0
    return deposit + cfg.fee_setup


def genesis_outputs(cfg: ChannelConfig, role: Role) -> list[tuple[OutPoint, Output]]:
    """The funding UTXOs a party will own, derivable without a ledger in hand
    (the faucet transaction is a pure function of its outputs)."""
    keys, _ = party_keys(cfg.seed, role)
    amount = funding_amount(cfg, role)
    if amount == 0:
        return []
    outputs = [Output(amount, LockCondition.single_sig(keys.public))]
    tx = ledger_mod.Transaction(inputs=[], outputs=outputs, lock_time=0)
    return [(OutPoint(ledger_mod.txid(tx), 0), outputs[0])]


def build_genesis(ledger: Ledger, cfg: ChannelConfig) -> dict[Role, list[tuple[OutPoint, Output]]]:
    """Mint each party's funding UTXOs; identical for a given config."""
    utxos: dict[Role, list[tuple[OutPoint, Output]]] = {}
    for role in (Role.HASH_SIDE, Role.BROADCAST_SIDE):
        entries = genesis_outputs(cfg, role)
        if entries:
            ledger.faucet([o for _, o in entries])
        utxos[role] = entries
    return utxos


def setup_data_for(cfg: ChannelConfig, role: Role,
                   utxos: list[tuple[OutPoint, Output]]) -> SetupData:
    keys, change = party_keys(cfg.seed, role)
    deposit = cfg.deposit_hash if role is Role.HASH_SIDE else cfg.deposit_broadcast
    return SetupData(keys.secret, keys.public, utxos, deposit, change)


def params_for(cfg: ChannelConfig, role: Role) -> ChannelParams:
    return ChannelParams(cfg.fee_setup, cfg.fee_close, cfg.refund_lock_height, role)


@dataclass
class ChannelFixture:
    cfg: ChannelConfig
    ledger: Ledger
    node_hash: PartyNode
    node_broadcast: PartyNode
    link: DirectLink

    def node(self, role: Role) -> PartyNode:
        return self.node_hash if role is Role.HASH_SIDE else self.node_broadcast


def make_fixture(cfg: ChannelConfig, ledger: Ledger | None = None) -> ChannelFixture:
    ledger = ledger if ledger is not None else Ledger()
    genesis = build_genesis(ledger, cfg)
    authority = authority_for(cfg.seed)
    link = DirectLink()
    nodes = {}
    for role, outbox in ((Role.HASH_SIDE, link.a_to_b), (Role.BROADCAST_SIDE, link.b_to_a)):
        enclave = Enclave(authority, seed=cfg.seed, seed_label=_ROLE_LABEL[role])
        enclave.provision(setup_data_for(cfg, role, genesis[role]), params_for(cfg, role))
        nodes[role] = PartyNode(enclave, role, ledger, outbox.append,
                               maul_rng=random.Random(cfg.seed))
    return ChannelFixture(cfg, ledger, nodes[Role.HASH_SIDE], nodes[Role.BROADCAST_SIDE], link)


def payment_schedule(cfg: ChannelConfig, n_payments: int,
                     target_broadcast_final: int | None = None) -> list[tuple[Role, int]]:
    """Seeded bidirectional payment list; the last payment optionally adjusts
    the net so BroadcastSide closes at exactly `target_broadcast_final`."""
    from .enclave import close_fee_shares

    fee_h, fee_b = close_fee_shares(cfg.fee_close)
    bal = {Role.HASH_SIDE: cfg.deposit_hash - fee_h,
           Role.BROADCAST_SIDE: cfg.deposit_broadcast - fee_b}
    rng = random.Random(crypto.derive_seed_bytes(cfg.seed, "schedule")[0:8].hex())
    schedule: list[tuple[Role, int]] = []
    n_random = n_payments - 1 if target_broadcast_final is not None else n_payments
    for _ in range(max(n_random, 0)):
        payer = rng.choice((Role.HASH_SIDE, Role.BROADCAST_SIDE))
        if bal[payer] <= 0:
            payer = payer.other()
        if bal[payer] <= 0:
            continue
        amount = rng.randint(1, min(MAX_RANDOM_PAYMENT, bal[payer]))
        schedule.append((payer, amount))
        bal[payer] -= amount
        bal[payer.other()] += amount
    if target_broadcast_final is not None and n_payments >= 1:
        delta = bal[Role.BROADCAST_SIDE] - target_broadcast_final
        if delta > 0:
            schedule.append((Role.BROADCAST_SIDE, delta))
        elif delta < 0:
            if -delta > bal[Role.HASH_SIDE]:
                raise ValueError("target balance unreachable from this schedule")
            schedule.append((Role.HASH_SIDE, -delta))
    return schedule


@dataclass
class DemoResult:
    trace: list[str] = field(default_factory=list)
    payout_hash: int = 0
    payout_broadcast: int = 0
    channel_txs: int = 0
    settlement: Transaction | None = None
    fixture: ChannelFixture | None = None
    ok: bool = False


def run_demo(cfg: ChannelConfig, n_payments: int,
             target_broadcast_final: int | None = None,
             terminator: Role = Role.BROADCAST_SIDE) -> DemoResult:
    """Honest establish -> pay -> settle run over the in-process link."""
    result = DemoResult()
    fx = make_fixture(cfg)
    result.fixture = fx
    result.trace.append(
        f"open deposits={cfg.deposit_hash}/{cfg.deposit_broadcast} "
        f"fee_setup={cfg.fee_setup} fee_close={cfg.fee_close} "
        f"lock_height={cfg.refund_lock_height} seed={cfg.seed}")
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    result.trace.append(f"established funding_txid={fx.node_hash.setup_hash.hex()}")

    schedule = payment_schedule(cfg, n_payments, target_broadcast_final)
    for payer, amount in schedule:
        fx.node(payer).send_payment(amount)
        pump_until_idle(fx.node_hash, fx.node_broadcast, fx.link)
        result.trace.append(f"pay {payer.value} {amount}")

    node = fx.node(terminator)
    settlement, verdict = node.terminate()
    result.settlement = settlement
    result.trace.append(f"terminate {terminator.value} {verdict}")
    result.payout_hash, result.payout_broadcast = settlement_payouts(cfg, settlement)
    result.channel_txs = fx.ledger.channel_tx_count()
    result.trace.append(
        f"settled payout_hash={result.payout_hash} payout_broadcast={result.payout_broadcast}")
    result.trace.append(f"ledger_channel_txs {result.channel_txs}")
    result.ok = verdict.accepted and result.channel_txs == 2
    return result


def settlement_payouts(cfg: ChannelConfig, settlement: Transaction) -> tuple[int, int]:
    """(hash side, broadcast side) amounts paid by a settlement or refund."""
    _, change_hash = party_keys(cfg.seed, Role.HASH_SIDE)
    _, change_broadcast = party_keys(cfg.seed, Role.BROADCAST_SIDE)
    payout = {change_hash: 0, change_broadcast: 0}
    for out in settlement.outputs:
        key = out.condition.keys[0]
        if key in payout:
            payout[key] += out.value
    return payout[change_hash], payout[change_broadcast]
