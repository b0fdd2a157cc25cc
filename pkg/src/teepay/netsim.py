"""Deterministic adversarial network and scenario runner.

Schedules message deliveries with drops, delays, reorders, replays, and
corruptions under a seed, and asserts the full invariant suite after every
step.  Logical time only: nothing here reads a wall clock, so a scenario
replays to an identical event trace.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from . import ledger as ledger_mod
from .demo import ChannelConfig, ChannelFixture, make_fixture, settlement_payouts
from .enclave import InsufficientBalance, Phase, Role, close_fee_shares
from .host import ChannelClosed

MAX_STEPS_BASE = 400

_ROLE_BY_TAG = {"A": Role.HASH_SIDE, "B": Role.BROADCAST_SIDE}
_TAG_BY_ROLE = {v: k for k, v in _ROLE_BY_TAG.items()}


class InvariantViolation(Exception):
    """The test oracle fired: carries the minimal reproducing action prefix."""

    def __init__(self, scenario: str, step: int, detail: str, trace: list[str]):
        super().__init__(f"[{scenario}] step {step}: {detail}")
        self.scenario = scenario
        self.step = step
        self.detail = detail
        self.trace = trace


class ScenarioParseError(Exception):
    pass


@dataclass(frozen=True)
class AdversaryAction:
    kind: str  # pay|deliver|drop|replay|corrupt|advance|crash|terminate|refund|maul|tick
    args: tuple = ()

    def line(self) -> str:
        return " ".join([self.kind, *map(str, self.args)])


@dataclass
class RandomSpec:
    n_payments: int = 20
    p_drop: float = 0.0
    p_replay: float = 0.0
    p_reorder: float = 0.0
    p_corrupt: float = 0.0


@dataclass
class Scenario:
    name: str
    seed: int = 1
    config: ChannelConfig | None = None
    script: list[AdversaryAction] | None = None
    random: RandomSpec | None = None
    maul: bool = False
    crash: tuple[Role, int] | None = None  # (party, step index)
    race: bool = False
    terminator: Role = Role.BROADCAST_SIDE

    def effective_config(self) -> ChannelConfig:
        cfg = self.config or ChannelConfig()
        return replace(cfg, seed=self.seed)


def random_schedule(seed: int, n_payments: int = 20, p_drop: float = 0.0,
                    p_replay: float = 0.0, p_reorder: float = 0.0,
                    p_corrupt: float = 0.0, name: str | None = None,
                    **kwargs) -> Scenario:
    for p in (p_drop, p_replay, p_reorder, p_corrupt):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    spec = RandomSpec(n_payments, p_drop, p_replay, p_reorder, p_corrupt)
    return Scenario(name=name or f"random-{seed}", seed=seed, random=spec, **kwargs)


# ---------------------------------------------------------------------------
# Scenario files: one action per line, '#' comments
# ---------------------------------------------------------------------------

_ACTION_ARGS = {
    "pay": 2, "deliver": 1, "drop": 1, "replay": 1, "corrupt": 2,
    "advance": 1, "crash": 1, "terminate": 1, "refund": 1, "maul": 0, "tick": 1,
}


def parse_scenario_file(path: str) -> Scenario:
    script: list[AdversaryAction] = []
    seed = 1
    maul = False
    with open(path) as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, args = parts[0], parts[1:]
            if kind == "seed":
                seed = int(args[0])
                continue
            if kind not in _ACTION_ARGS:
                raise ScenarioParseError(f"{path}:{lineno}: unknown action '{kind}'")
            if len(args) != _ACTION_ARGS[kind]:
                raise ScenarioParseError(
                    f"{path}:{lineno}: '{kind}' takes {_ACTION_ARGS[kind]} argument(s)")
            if kind in ("pay", "crash", "terminate", "refund") and args[0] not in _ROLE_BY_TAG:
                raise ScenarioParseError(f"{path}:{lineno}: party must be A or B")
            if kind == "maul":
                maul = True
            parsed = tuple(args[:1] + [int(a) for a in args[1:]]) \
                if kind in ("pay", "crash", "terminate", "refund") \
                else tuple(int(a) for a in args)
            script.append(AdversaryAction(kind, parsed))
    name = path.rsplit("/", 1)[-1]
    return Scenario(name=name, seed=seed, script=script, maul=maul)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    scenario: str
    events: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    payout_hash: int | None = None
    payout_broadcast: int | None = None
    channel_txs: int = 0
    settlements: list = field(default_factory=list)

    def lines(self) -> list[str]:
        return [f"scenario {self.scenario}"] + self.events

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


class _Bookkeeping:
    """Ground-truth payment log kept outside the enclaves, used as the oracle."""

    def __init__(self, fx: ChannelFixture):
        fee_h, fee_b = close_fee_shares(fx.cfg.fee_close)
        self.initial = {Role.HASH_SIDE: fx.cfg.deposit_hash - fee_h,
                        Role.BROADCAST_SIDE: fx.cfg.deposit_broadcast - fee_b}
        self.sent: dict[Role, list[int]] = {Role.HASH_SIDE: [], Role.BROADCAST_SIDE: []}


class Runner:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.cfg = scenario.effective_config()
        self.fx = make_fixture(self.cfg)
        self.rng = random.Random(("netsim", scenario.seed, scenario.name).__repr__())
        self.books = _Bookkeeping(self.fx)
        self.trace = Trace(scenario.name)
        self.step = 0
        self.emitted: list[tuple[Role, bytes]] = []  # (sender, wire bytes)
        self.pending: dict[int, tuple[Role, bytes]] = {}
        self.crashed: dict[Role, bool] = {Role.HASH_SIDE: False, Role.BROADCAST_SIDE: False}
        self.minted = self.fx.ledger.minted
        self._recording = False
        self._estab_queue: list[tuple[Role, bytes]] = []
        self._drained = {Role.HASH_SIDE: 0, Role.BROADCAST_SIDE: 0}
        # interpose on the link so every emitted frame gets a global index
        self.fx.node_hash._send_wire = lambda b: self._on_emit(Role.HASH_SIDE, b)
        self.fx.node_broadcast._send_wire = lambda b: self._on_emit(Role.BROADCAST_SIDE, b)

    # -- link ----------------------------------------------------------------

    def _on_emit(self, sender: Role, wire: bytes) -> None:
        if not self._recording:
            # establishment phase: honest queued delivery
            self._estab_queue.append((sender, wire))
            return
        idx = len(self.emitted)
        self.emitted.append((sender, wire))
        self.pending[idx] = (sender, wire)

    def _deliver_to(self, dest: Role, wire: bytes) -> None:
        if self.crashed[dest]:
            return
        self.fx.node(dest).on_wire(wire)

    def _deliver_index(self, idx: int, mutate_offset: int | None = None,
                       copy: bool = False) -> None:
        if idx >= len(self.emitted):
            self._event(f"noop: message {idx} not yet emitted")
            return
        if not copy:
            if idx not in self.pending:
                self._event(f"noop: message {idx} already consumed")
                return
            del self.pending[idx]
        sender, wire = self.emitted[idx]
        if mutate_offset is not None:
            off = mutate_offset % len(wire)
            wire = wire[:off] + bytes([wire[off] ^ 0x01]) + wire[off + 1 :]
        self._deliver_to(sender.other(), wire)

    # -- events / invariants --------------------------------------------------

    def _event(self, msg: str) -> None:
        self.trace.events.append(f"{self.step}|{msg}")

    def _drain_node_events(self) -> None:
        for role in Role:
            events = self.fx.node(role).events
            for ev in events[self._drained[role]:]:
                self.trace.events.append(f"{self.step}|{ev}")
            self._drained[role] = len(events)

    def _fail(self, detail: str) -> None:
        self.trace.violations.append(detail)
        raise InvariantViolation(self.scenario.name, self.step, detail, self.trace.events)

    def check_invariants(self) -> None:
        self._drain_node_events()
        lg = self.fx.ledger
        if lg.minted != self.minted:
            self._fail("value minted outside the faucet fixture")
        on_chain = sum(o.value for o in lg.utxos.values())
        if on_chain + lg.fees_collected != self.minted:
            self._fail(
                f"conservation: utxos {on_chain} + fees {lg.fees_collected} != minted {self.minted}")
        if lg.channel_tx_count() > 2:
            self._fail(f"more than 2 channel transactions on chain: {lg.channel_tx_count()}")

        stats = {r: self.fx.node(r).enclave.status() for r in Role}
        total_initial = sum(self.books.initial.values())
        for role, st in stats.items():
            if st.balance_mine < 0 or st.balance_theirs < 0:
                self._fail(f"credit bound: negative balance at {role.value}")
            if st.phase is Phase.ACTIVE:
                if st.balance_mine + st.balance_theirs != total_initial:
                    self._fail(f"conservation in channel at {role.value}")
                peer = role.other()
                sent_peer = self.books.sent[peer]
                if st.recv_counter > len(sent_peer):
                    self._fail(f"{role.value} accepted more payments than peer sent")
                expect = (self.books.initial[role]
                          - sum(self.books.sent[role])
                          + sum(sent_peer[: st.recv_counter]))
                if st.balance_mine != expect:
                    self._fail(
                        f"counter-prefix: {role.value} balance {st.balance_mine} != "
                        f"prefix expectation {expect}")
        if stats[Role.HASH_SIDE].phase is Phase.ACTIVE \
                and stats[Role.BROADCAST_SIDE].phase is Phase.ACTIVE:
            for role in Role:
                mine = stats[role]
                peer = stats[role.other()]
                if mine.balance_theirs < peer.balance_mine:
                    self._fail(
                        f"no-harm: {role.value} settlement would pay peer "
                        f"{mine.balance_theirs} < peer balance {peer.balance_mine}")

        for settler, tx in self.trace.settlements:
            payouts = settlement_payouts(self.cfg, tx)
            payout = {Role.HASH_SIDE: payouts[0], Role.BROADCAST_SIDE: payouts[1]}
            peer = settler.other()
            recv_n = stats[settler].recv_counter if stats[settler].phase is Phase.CLOSED \
                else stats[settler].recv_counter
            floor = (self.books.initial[peer]
                     + sum(self.books.sent[settler])
                     - sum(self.books.sent[peer][:recv_n]))
            if payout[peer] < floor:
                self._fail(
                    f"no-revert: {settler.value} settlement pays peer {payout[peer]} < {floor}")
            if payout[peer] < stats[peer].balance_mine:
                self._fail(
                    f"no-harm: settlement pays {payout[peer]} < peer balance "
                    f"{stats[peer].balance_mine}")

    # -- actions ---------------------------------------------------------------

    def _do_pay(self, role: Role, amount: int) -> None:
        node = self.fx.node(role)
        if self.crashed[role]:
            self._event(f"pay {role.value} skipped: crashed")
            return
        try:
            node.send_payment(amount)
            self.books.sent[role].append(amount)
            self._event(f"pay {role.value} {amount}")
        except (InsufficientBalance, ChannelClosed) as exc:
            self._event(f"pay {role.value} {amount} refused: {type(exc).__name__}")

    def _do_terminate(self, role: Role) -> None:
        if self.crashed[role]:
            self._event(f"terminate {role.value} skipped: crashed")
            return
        node = self.fx.node(role)
        try:
            tx, verdict = node.terminate()
            self.trace.settlements.append((role, tx))
            self._event(f"terminate {role.value}: {verdict}")
        except ChannelClosed as exc:
            self._event(f"terminate {role.value} refused: {exc}")

    def _do_refund(self, role: Role) -> None:
        node = self.fx.node(role)
        try:
            verdict = node.refund_after_timeout()
            self._event(f"refund {role.value}: {verdict}")
        except ChannelClosed as exc:
            self._event(f"refund {role.value} refused: {exc}")

    def _tick_nodes(self, n: int = 1) -> None:
        for _ in range(n):
            for role in Role:
                if not self.crashed[role]:
                    self.fx.node(role).tick()

    def apply(self, action: AdversaryAction) -> None:
        kind, args = action.kind, action.args
        if kind == "pay":
            self._do_pay(_ROLE_BY_TAG[args[0]], args[1])
        elif kind == "deliver":
            self._deliver_index(args[0])
            self._event(f"deliver {args[0]}")
        elif kind == "drop":
            self.pending.pop(args[0], None)
            self._event(f"drop {args[0]}")
        elif kind == "replay":
            self._deliver_index(args[0], copy=True)
            self._event(f"replay {args[0]}")
        elif kind == "corrupt":
            self._deliver_index(args[0], mutate_offset=args[1])
            self._event(f"corrupt {args[0]} at {args[1]}")
        elif kind == "advance":
            self.fx.ledger.advance_height(args[0])
            self._event(f"advance height -> {self.fx.ledger.height}")
        elif kind == "crash":
            self.crashed[_ROLE_BY_TAG[args[0]]] = True
            self._event(f"crash {args[0]}")
        elif kind == "terminate":
            self._do_terminate(_ROLE_BY_TAG[args[0]])
        elif kind == "refund":
            self._do_refund(_ROLE_BY_TAG[args[0]])
        elif kind == "maul":
            self._event("maul (applied at funding broadcast)")
        elif kind == "tick":
            self._tick_nodes(args[0])
            self._event(f"tick {args[0]}")
        else:
            raise ScenarioParseError(f"unknown action {kind}")

    # -- top-level drivers ------------------------------------------------------

    def _establish(self) -> bool:
        fx = self.fx
        if self.scenario.maul:
            fx.node_broadcast.maul_on_broadcast = True
        fx.node_hash.start_handshake()
        fx.node_broadcast.start_handshake()
        for _ in range(200):
            while self._estab_queue:
                batch, self._estab_queue = self._estab_queue, []
                for sender, wire in batch:
                    self._deliver_to(sender.other(), wire)
            self._tick_nodes()
            if fx.node_hash.error or fx.node_broadcast.error:
                self._event(f"establish failed: {fx.node_hash.error or fx.node_broadcast.error}")
                return False
            if fx.node_hash.maul_recovered:
                self._event("maul recovered: immediate refund on chain")
                return False
            if fx.node_hash.channel_open and fx.node_broadcast.channel_open:
                self._event("established")
                return True
        self._event("establish timeout")
        return False

    def run(self) -> Trace:
        open_ok = self._establish()
        self.check_invariants()
        self._recording = True
        if open_ok:
            if self.scenario.script is not None:
                self._run_script()
            if self.scenario.random is not None:
                self._run_random()
        self._finish()
        return self.trace

    def _run_script(self) -> None:
        for action in self.scenario.script:
            self.step += 1
            if action.kind == "maul":
                continue
            self.apply(action)
            self.check_invariants()

    def _run_random(self) -> None:
        spec = self.scenario.random
        rng = self.rng
        issued = 0
        terminated = False
        max_steps = MAX_STEPS_BASE + 10 * spec.n_payments
        replay_pool: list[int] = []
        while self.step < max_steps:
            self.step += 1
            if self.scenario.crash is not None and self.step == self.scenario.crash[1]:
                role = self.scenario.crash[0]
                self.crashed[role] = True
                self._event(f"crash {_TAG_BY_ROLE[role]}")
            if issued < spec.n_payments and rng.random() < 0.6:
                payer = rng.choice((Role.HASH_SIDE, Role.BROADCAST_SIDE))
                bal = self.fx.node(payer).enclave.status().balance_mine
                if bal > 0:
                    self._do_pay(payer, rng.randint(1, min(bal, 10_000_000)))
                issued += 1
            for idx in sorted(self.pending):
                r = rng.random()
                if r < spec.p_drop:
                    del self.pending[idx]
                    self._event(f"drop {idx}")
                elif r < spec.p_drop + spec.p_reorder:
                    continue  # delayed: stays pending
                elif rng.random() < spec.p_corrupt:
                    self._deliver_index(idx, mutate_offset=rng.randrange(8, 64))
                    self._event(f"corrupt {idx}")
                else:
                    self._deliver_index(idx)
                    if rng.random() < spec.p_replay:
                        replay_pool.append(idx)
            if replay_pool and rng.random() < 0.5:
                idx = replay_pool.pop(rng.randrange(len(replay_pool)))
                self._deliver_index(idx, copy=True)
                self._event(f"replay {idx}")
            self._tick_nodes()
            self.check_invariants()
            if issued >= spec.n_payments and not terminated:
                # quiesce a little, then close
                if rng.random() < 0.3 or self.step >= max_steps - 20:
                    self._do_terminate(self.scenario.terminator)
                    terminated = True
                    if self.scenario.race:
                        self._do_terminate(self.scenario.terminator.other())
                    self.check_invariants()
            if terminated and not self.pending and not replay_pool:
                break
        if not terminated:
            self._do_terminate(self.scenario.terminator)
            self.check_invariants()

    def _finish(self) -> None:
        # close out anything still open so every trace ends with a verdict
        for role in Role:
            st = self.fx.node(role).enclave.status()
            if st.phase is Phase.ACTIVE and not self.crashed[role]:
                self.step += 1
                self._do_terminate(role)
                self.check_invariants()
        self.trace.channel_txs = self.fx.ledger.channel_tx_count()
        for _, tx in self.trace.settlements:
            if self.fx.ledger.find_by_hash(ledger_mod.txid(tx)) is not None:
                p = settlement_payouts(self.cfg, tx)
                self.trace.payout_hash, self.trace.payout_broadcast = p
        self.trace.events.append(
            f"end|channel_txs={self.trace.channel_txs} "
            f"payout_hash={self.trace.payout_hash} payout_broadcast={self.trace.payout_broadcast}")


def run(scenario: Scenario) -> Trace:
    return Runner(scenario).run()


# ---------------------------------------------------------------------------
# Builtin scenarios and the soak suite
# ---------------------------------------------------------------------------

def builtin_scenario(name: str, seed: int = 1) -> Scenario:
    tag = f"{name}-{seed}"
    if name == "honest":
        return random_schedule(seed, n_payments=20, name=tag)
    if name == "drop":
        return random_schedule(seed, n_payments=20, p_drop=0.3, name=tag)
    if name == "replay":
        return random_schedule(seed, n_payments=20, p_replay=0.5, name=tag)
    if name == "reorder":
        return random_schedule(seed, n_payments=20, p_reorder=0.4, name=tag)
    if name == "corrupt":
        return random_schedule(seed, n_payments=20, p_corrupt=0.3, name=tag)
    if name == "blackhole":
        return random_schedule(seed, n_payments=10, p_drop=1.0, name=tag)
    if name == "crash":
        return random_schedule(seed, n_payments=20, crash=(Role.HASH_SIDE, 25),
                               terminator=Role.BROADCAST_SIDE, name=tag)
    if name == "race":
        return random_schedule(seed, n_payments=20, race=True, name=tag)
    if name == "maul":
        return random_schedule(seed, n_payments=5, maul=True, name=tag)
    raise KeyError(name)


BUILTIN_NAMES = ("honest", "drop", "replay", "reorder", "corrupt", "blackhole",
                 "crash", "race", "maul")


def soak_scenarios(n: int = 500, first_seed: int = 1) -> list[Scenario]:
    """n seeded scenarios cycling over every adversarial flavor, plus mixed noise."""
    out = []
    for i in range(n):
        seed = first_seed + i
        kind = BUILTIN_NAMES[i % len(BUILTIN_NAMES)]
        if i % len(BUILTIN_NAMES) == 0 and i % 2 == 1:
            out.append(random_schedule(seed, n_payments=15, p_drop=0.15, p_replay=0.15,
                                       p_reorder=0.2, p_corrupt=0.1))
        else:
            sc = builtin_scenario(kind, seed)
            out.append(sc)
    return out
