"""Untrusted party logic.

Drives the establishment handshake, provides a reliable FIFO transport
(go-back-n with cumulative acks) over an unreliable link, watches the ledger
for the funding transaction, broadcasts transactions, and exposes the
terminate and maul-recovery flows.

All timing is a logical clock: `tick()` advances it, retransmission fires
after a fixed number of ticks without ack progress.  Frames cross the link as
bytes only; payloads are already enclave-encrypted.
"""
from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass
from typing import Callable

from . import crypto, ledger as ledger_mod
from .crypto import pack_bytes, unpack_bytes
from .enclave import Enclave, EnclaveError, Phase, ReplayOrGap, Role, WrongPhase
from .enclave import DecryptFailed, ForeignTransaction, NotMauled, OverCredit, WrongSecret
from .ledger import Transaction, Verdict

WINDOW_SIZE = 32
RETRANSMIT_TICKS = 3

# wire format: 1-byte kind, 8-byte little-endian seq, 4-byte payload length
_HEADER = struct.Struct("<BQI")


class FrameKind(enum.IntEnum):
    HANDSHAKE = 1
    PAYMENT = 2
    ACK = 3


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    seq: int
    payload: bytes

    def encode(self) -> bytes:
        return _HEADER.pack(int(self.kind), self.seq, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame | None":
        if len(data) < _HEADER.size:
            return None
        try:
            kind, seq, length = _HEADER.unpack_from(data, 0)
            if len(data) != _HEADER.size + length:
                return None
            return cls(FrameKind(kind), seq, data[_HEADER.size :])
        except (struct.error, ValueError):
            return None


# handshake payload tags
_HS_ATTEST = 1
_HS_BLOB = 2


class EstablishError(Exception):
    pass


class ChannelClosed(Exception):
    pass


class PartyNode:
    """Sequential actor owning one enclave, one transport endpoint, one ledger handle."""

    def __init__(self, enclave: Enclave, role: Role, ledger, send_wire: Callable[[bytes], None],
                 window: int = WINDOW_SIZE, retransmit_ticks: int = RETRANSMIT_TICKS,
                 maul_rng: random.Random | None = None):
        self.enclave = enclave
        self.role = role
        self.ledger = ledger
        self._send_wire = send_wire
        self.window = window
        self.retransmit_ticks = retransmit_ticks
        self.maul_on_broadcast = False
        self._maul_rng = maul_rng or random.Random(0)

        self._next_seq = 0
        self._base = 0
        self._unacked: dict[int, bytes] = {}
        self._inflight_hi = -1  # highest seq actually transmitted
        self._expected = 0
        self._ticks_since_progress = 0

        self.channel_open = False
        self.closed = False
        self.maul_recovered = False
        self.error: str | None = None
        self.setup_hash: bytes | None = None
        self.refund_tx: Transaction | None = None
        self.setup_tx: Transaction | None = None
        self._watch_from = 0
        self._polling = False
        self.events: list[str] = []

    def _log(self, msg: str) -> None:
        self.events.append(f"{self.role.value}: {msg}")

    # -- outbound -----------------------------------------------------------

    def start_handshake(self) -> None:
        quote, enc_pk, sign_pk = self.enclave.get_attestation()
        payload = bytes([_HS_ATTEST]) + pack_bytes(quote.to_bytes()) \
            + pack_bytes(enc_pk) + pack_bytes(sign_pk)
        self._watch_from = getattr(self.ledger, "confirmed_count", lambda: 0)()
        self._enqueue(FrameKind.HANDSHAKE, payload)
        self._log("sent attestation")

    def send_payment(self, amount: int) -> str:
        if self.closed:
            raise ChannelClosed("channel is closed")
        if not self.channel_open:
            raise ChannelClosed("channel is not open yet")
        ct = self.enclave.pay(amount)  # raises InsufficientBalance before transmit
        seq = self._enqueue(FrameKind.PAYMENT, ct)
        status = "Delivered" if seq <= self._inflight_hi else "Queued"
        self._log(f"payment {amount} enqueued seq={seq}")
        return status

    def terminate(self) -> tuple[Transaction, Verdict]:
        if self.enclave.phase is not Phase.ACTIVE:
            raise ChannelClosed("no active channel to terminate")
        tx = self.enclave.settle()
        verdict = self.ledger.submit(tx)
        self.closed = True
        self._log(f"settlement submitted: {verdict}")
        return tx, verdict

    def refund_after_timeout(self) -> Verdict:
        if self.refund_tx is None:
            raise ChannelClosed("no refund transaction held")
        verdict = self.ledger.submit(self.refund_tx)
        if verdict.accepted:
            self.closed = True
        self._log(f"refund submitted: {verdict}")
        return verdict

    # -- go-back-n sender ---------------------------------------------------

    def _enqueue(self, kind: FrameKind, payload: bytes) -> int:
        seq = self._next_seq
        self._next_seq += 1
        self._unacked[seq] = Frame(kind, seq, payload).encode()
        self._flush_window()
        return seq

    def _flush_window(self) -> None:
        hi = self._base + self.window
        for seq in sorted(self._unacked):
            if seq >= hi:
                break
            if seq > self._inflight_hi:
                self._inflight_hi = seq
                self._send_wire(self._unacked[seq])

    def _retransmit(self) -> None:
        hi = self._base + self.window
        for seq in sorted(self._unacked):
            if seq >= hi:
                break
            self._send_wire(self._unacked[seq])

    def _send_ack(self) -> None:
        self._send_wire(Frame(FrameKind.ACK, self._expected, b"").encode())

    # -- inbound ------------------------------------------------------------

    def on_wire(self, data: bytes) -> None:
        frame = Frame.decode(data)
        if frame is None:
            self._log("undecodable frame dropped")
            return
        if frame.kind is FrameKind.ACK:
            self._on_ack(frame.seq)
            return
        if frame.seq == self._expected:
            if self._deliver(frame):
                self._expected += 1
                self._ticks_since_progress = 0
        elif frame.seq < self._expected and frame.kind is FrameKind.PAYMENT:
            # duplicate/replayed frame: the enclave is the replay oracle; the
            # host acks regardless (idempotent ack)
            self._feed_payment(frame.payload, replayed=True)
        self._send_ack()

    def _on_ack(self, ack: int) -> None:
        if ack > self._next_seq:
            # corrupted ack: acknowledges frames never sent
            self._log("implausible ack dropped")
            return
        if ack > self._base:
            for seq in range(self._base, ack):
                self._unacked.pop(seq, None)
            self._base = ack
            self._ticks_since_progress = 0
            self._flush_window()

    def _deliver(self, frame: Frame) -> bool:
        if frame.kind is FrameKind.HANDSHAKE:
            return self._on_handshake(frame.payload)
        return self._feed_payment(frame.payload, replayed=False)

    def _feed_payment(self, ct: bytes, replayed: bool) -> bool:
        if self.closed or self.enclave.phase is not Phase.ACTIVE:
            self._log("payment frame ignored: channel closed")
            return True
        try:
            balance = self.enclave.receive_payment(ct)
            self._log(f"payment accepted, balance {balance}")
            return True
        except DecryptFailed:
            if replayed:
                self._log("replayed frame undecryptable, ignored")
                return True
            # corrupted in flight: leave the window where it is so the sender
            # retransmits the original
            self._log("payment undecryptable, awaiting retransmission")
            return False
        except (ReplayOrGap, WrongSecret, OverCredit) as exc:
            self._log(f"payment rejected: {type(exc).__name__}: {exc}")
            return True

    def _on_handshake(self, payload: bytes) -> bool:
        try:
            tag = payload[0]
            if tag == _HS_ATTEST:
                quote_raw, off = unpack_bytes(payload, 1)
                enc_pk, off = unpack_bytes(payload, off)
                sign_pk, off = unpack_bytes(payload, off)
                from .enclave import MEASUREMENT

                self.enclave.accept_peer(
                    crypto.Quote.from_bytes(quote_raw), enc_pk, sign_pk, MEASUREMENT)
                self._log("peer attested")
                if self.role is Role.BROADCAST_SIDE:
                    self._enqueue(FrameKind.HANDSHAKE,
                                  bytes([_HS_BLOB]) + self.enclave.export_secrets())
                    self._log("sent secrets blob")
            elif tag == _HS_BLOB:
                result = self.enclave.import_secrets(payload[1:])
                if self.role is Role.HASH_SIDE:
                    self.setup_hash, self.refund_tx = result
                    self._enqueue(FrameKind.HANDSHAKE,
                                  bytes([_HS_BLOB]) + self.enclave.export_secrets())
                    self._polling = True
                    self._log("imported secrets, watching chain for funding tx")
                else:
                    self.setup_tx, self.refund_tx = result
                    broadcast = self.setup_tx
                    if self.maul_on_broadcast:
                        broadcast = ledger_mod.maul(broadcast, self._maul_rng)
                        self._log("mauled funding tx before broadcast")
                    verdict = self.ledger.submit(broadcast)
                    self._log(f"broadcast funding tx: {verdict}")
                    if verdict.accepted:
                        self.channel_open = True
                    else:
                        self.error = f"funding broadcast rejected: {verdict}"
            else:
                self._log(f"unknown handshake tag {tag}")
        except EnclaveError as exc:
            self.error = f"{type(exc).__name__}: {exc}"
            self._log(f"handshake failed: {self.error}")
        return True

    # -- logical clock ------------------------------------------------------

    def tick(self) -> None:
        if self._unacked:
            self._ticks_since_progress += 1
            if self._ticks_since_progress >= self.retransmit_ticks:
                self._retransmit()
                self._ticks_since_progress = 0
        if self._polling and not self.channel_open and not self.closed:
            self._poll_chain()

    def _poll_chain(self) -> None:
        if self.ledger.find_by_hash(self.setup_hash) is not None:
            self.channel_open = True
            self._log("funding tx confirmed")
            return
        for tx in self.ledger.confirmed_since(self._watch_from):
            try:
                refund = self.enclave.reissue_refund(tx)
            except (NotMauled, ForeignTransaction, WrongPhase):
                continue
            verdict = self.ledger.submit(refund)
            self.maul_recovered = True
            self.closed = True
            self._polling = False
            self._log(f"maul detected, immediate refund: {verdict}")
            return


class DirectLink:
    """In-process honest link between two nodes; frames delivered on pump()."""

    def __init__(self):
        self.a_to_b: list[bytes] = []
        self.b_to_a: list[bytes] = []

    def pump(self, node_a: PartyNode, node_b: PartyNode) -> bool:
        moved = False
        while self.a_to_b or self.b_to_a:
            moved = True
            batch, self.a_to_b[:] = self.a_to_b[:], []
            for data in batch:
                node_b.on_wire(data)
            batch, self.b_to_a[:] = self.b_to_a[:], []
            for data in batch:
                node_a.on_wire(data)
        return moved


def establish(node_a: PartyNode, node_b: PartyNode, link: DirectLink,
              max_ticks: int = 200) -> None:
    """Run the full handshake over an honest link; raises EstablishError."""
    node_a.start_handshake()
    node_b.start_handshake()
    for _ in range(max_ticks):
        link.pump(node_a, node_b)
        node_a.tick()
        node_b.tick()
        if node_a.error or node_b.error:
            raise EstablishError(node_a.error or node_b.error)
        if node_a.maul_recovered or node_b.maul_recovered:
            return
        if node_a.channel_open and node_b.channel_open:
            return
    raise EstablishError("timeout: funding transaction never appeared")


def pump_until_idle(node_a: PartyNode, node_b: PartyNode, link: DirectLink,
                    max_ticks: int = 500) -> None:
    for _ in range(max_ticks):
        moved = link.pump(node_a, node_b)
        node_a.tick()
        node_b.tick()
        if not moved and not node_a._unacked and not node_b._unacked:
            return
    raise EstablishError("link failed to drain")
