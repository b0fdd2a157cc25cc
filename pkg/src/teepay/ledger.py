"""Simplified Bitcoin-style ledger.

UTXO set, transaction validation (single-sig and 2-of-2 multisig, lock times,
double-spend rejection), logical block-height progression, and witness
malleability modeling.  Submission is atomic confirmation: no mempool, forks,
or reorganizations.

Transaction serialization is canonical (documented field order, little-endian
integers, length-prefixed lists); txid covers the full serialization including
witnesses, while the signature hash blanks all witnesses so padding mutation
("mauling") changes the id without invalidating signatures.
"""
from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from . import crypto
from .crypto import pack_bytes, unpack_bytes


class LedgerError(Exception):
    pass


@dataclass(frozen=True)
class OutPoint:
    txid: bytes
    index: int


class LockKind(enum.IntEnum):
    SINGLE_SIG = 1
    MULTISIG_2OF2 = 2


@dataclass(frozen=True)
class LockCondition:
    kind: LockKind
    keys: tuple[bytes, ...]

    @classmethod
    def single_sig(cls, pk: bytes) -> "LockCondition":
        return cls(LockKind.SINGLE_SIG, (pk,))

    @classmethod
    def multisig_2of2(cls, pk_a: bytes, pk_b: bytes) -> "LockCondition":
        return cls(LockKind.MULTISIG_2OF2, (pk_a, pk_b))


@dataclass(frozen=True)
class Output:
    value: int  # satoshi, 1 BTC = 10**8
    condition: LockCondition

    def __post_init__(self):
        if self.value <= 0:
            raise LedgerError("output value must be positive")


@dataclass
class Witness:
    signatures: list[bytes] = field(default_factory=list)
    padding: bytes = b""  # signature-irrelevant bytes; models malleability


@dataclass
class Input:
    outpoint: OutPoint
    witness: Witness = field(default_factory=Witness)


@dataclass
class Transaction:
    inputs: list[Input]
    outputs: list[Output]
    lock_time: int = 0  # block height; 0 = immediately valid


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------

def _serialize_condition(cond: LockCondition) -> bytes:
    out = struct.pack("<B", int(cond.kind))
    out += struct.pack("<I", len(cond.keys))
    for key in cond.keys:
        out += pack_bytes(key)
    return out


def _parse_condition(buf: bytes, off: int) -> tuple[LockCondition, int]:
    kind = LockKind(buf[off])
    off += 1
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    keys = []
    for _ in range(n):
        key, off = unpack_bytes(buf, off)
        keys.append(key)
    return LockCondition(kind, tuple(keys)), off


def serialize_tx(tx: Transaction, include_witness: bool = True) -> bytes:
    out = struct.pack("<I", len(tx.inputs))
    for inp in tx.inputs:
        out += inp.outpoint.txid + struct.pack("<I", inp.outpoint.index)
        if include_witness:
            out += struct.pack("<I", len(inp.witness.signatures))
            for sig in inp.witness.signatures:
                out += pack_bytes(sig)
            out += pack_bytes(inp.witness.padding)
        else:
            out += struct.pack("<I", 0) + pack_bytes(b"")
    out += struct.pack("<I", len(tx.outputs))
    for o in tx.outputs:
        out += struct.pack("<Q", o.value) + _serialize_condition(o.condition)
    out += struct.pack("<I", tx.lock_time)
    return out


def deserialize_tx(buf: bytes) -> Transaction:
    off = 0
    (n_in,) = struct.unpack_from("<I", buf, off)
    off += 4
    inputs = []
    for _ in range(n_in):
        txid = buf[off : off + 32]
        off += 32
        (index,) = struct.unpack_from("<I", buf, off)
        off += 4
        (n_sig,) = struct.unpack_from("<I", buf, off)
        off += 4
        sigs = []
        for _ in range(n_sig):
            sig, off = unpack_bytes(buf, off)
            sigs.append(sig)
        padding, off = unpack_bytes(buf, off)
        inputs.append(Input(OutPoint(txid, index), Witness(sigs, padding)))
    (n_out,) = struct.unpack_from("<I", buf, off)
    off += 4
    outputs = []
    for _ in range(n_out):
        (value,) = struct.unpack_from("<Q", buf, off)
        off += 8
        cond, off = _parse_condition(buf, off)
        outputs.append(Output(value, cond))
    (lock_time,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off != len(buf):
        raise LedgerError("trailing bytes in transaction")
    return Transaction(inputs, outputs, lock_time)


def txid(tx: Transaction) -> bytes:
    """Id over the full serialization, witnesses included: mauling changes it."""
    return crypto.sha256(serialize_tx(tx, include_witness=True))


def sighash(tx: Transaction) -> bytes:
    """Digest over the witness-blanked serialization; stable under mauling."""
    return crypto.sha256(serialize_tx(tx, include_witness=False))


def copy_tx(tx: Transaction) -> Transaction:
    return deserialize_tx(serialize_tx(tx))


def maul(tx: Transaction, rng: random.Random | None = None) -> Transaction:
    """Mutate witness padding: signatures stay valid, the txid changes."""
    if not tx.inputs:
        raise LedgerError("cannot maul a transaction without inputs")
    rng = rng or random.Random()
    mauled = copy_tx(tx)
    extra = bytes(rng.randrange(256) for _ in range(1 + rng.randrange(8)))
    mauled.inputs[0].witness.padding += extra
    return mauled


# ---------------------------------------------------------------------------
# Submission verdicts
# ---------------------------------------------------------------------------

class RejectReason(enum.Enum):
    MISSING_INPUT = "MissingInput"
    BAD_SIGNATURE = "BadSignature"
    OVERSPEND = "Overspend"
    PREMATURE = "Premature"
    DOUBLE_SPEND = "DoubleSpend"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None

    def __str__(self):
        return "Accepted" if self.accepted else f"Rejected({self.reason.value})"


ACCEPTED = Verdict(True)


def _witness_satisfies(cond: LockCondition, witness: Witness, digest: bytes) -> bool:
    sigs = witness.signatures
    if cond.kind == LockKind.SINGLE_SIG:
        return len(sigs) == 1 and crypto.verify(cond.keys[0], digest, sigs[0])
    if cond.kind == LockKind.MULTISIG_2OF2:
        return (
            len(sigs) == 2
            and crypto.verify(cond.keys[0], digest, sigs[0])
            and crypto.verify(cond.keys[1], digest, sigs[1])
        )
    return False


class Ledger:
    """Height-stamped UTXO state machine; mutation must be externally serialized."""

    def __init__(self):
        self.height: int = 0
        self.utxos: dict[OutPoint, Output] = {}
        self.confirmed: list[Transaction] = []
        self.spent: set[OutPoint] = set()
        self.minted: int = 0
        self.fees_collected: int = 0
        self.faucet_txids: set[bytes] = set()

    # -- genesis funding (test fixture; bypasses validation) ----------------

    def faucet(self, outputs: Iterable[Output]) -> Transaction:
        tx = Transaction(inputs=[], outputs=list(outputs), lock_time=0)
        tid = txid(tx)
        for i, o in enumerate(tx.outputs):
            self.utxos[OutPoint(tid, i)] = o
            self.minted += o.value
        self.confirmed.append(tx)
        self.faucet_txids.add(tid)
        return tx

    # -- core state machine -------------------------------------------------

    def submit(self, tx: Transaction) -> Verdict:
        if not tx.inputs or not tx.outputs:
            return Verdict(False, RejectReason.MISSING_INPUT)
        seen: set[OutPoint] = set()
        for inp in tx.inputs:
            op = inp.outpoint
            if op in seen or op in self.spent:
                return Verdict(False, RejectReason.DOUBLE_SPEND)
            if op not in self.utxos:
                return Verdict(False, RejectReason.MISSING_INPUT)
            seen.add(op)
        if tx.lock_time > self.height:
            return Verdict(False, RejectReason.PREMATURE)
        digest = sighash(tx)
        total_in = 0
        for inp in tx.inputs:
            prev = self.utxos[inp.outpoint]
            if not _witness_satisfies(prev.condition, inp.witness, digest):
                return Verdict(False, RejectReason.BAD_SIGNATURE)
            total_in += prev.value
        total_out = sum(o.value for o in tx.outputs)
        if total_out > total_in:
            return Verdict(False, RejectReason.OVERSPEND)
        tid = txid(tx)
        for inp in tx.inputs:
            del self.utxos[inp.outpoint]
            self.spent.add(inp.outpoint)
        for i, o in enumerate(tx.outputs):
            self.utxos[OutPoint(tid, i)] = o
        self.confirmed.append(tx)
        self.fees_collected += total_in - total_out
        return ACCEPTED

    def advance_height(self, blocks: int) -> int:
        if blocks < 0:
            raise LedgerError("blocks must be non-negative")
        self.height += blocks
        return self.height

    def find_by_hash(self, h: bytes) -> Transaction | None:
        for tx in self.confirmed:
            if txid(tx) == h:
                return tx
        return None

    def confirmed_count(self) -> int:
        return len(self.confirmed)

    def confirmed_since(self, index: int) -> list[Transaction]:
        return self.confirmed[index:]

    def channel_tx_count(self) -> int:
        return len(self.confirmed) - len(self.faucet_txids)

    # -- state dump / load (line-delimited text) ----------------------------

    def dump(self, fp: TextIO) -> None:
        fp.write(f"height {self.height}\n")
        for tx in self.confirmed:
            tag = "faucet" if txid(tx) in self.faucet_txids else "tx"
            fp.write(f"{tag} {serialize_tx(tx).hex()}\n")

    def dump_str(self) -> str:
        import io

        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, fp: TextIO) -> "Ledger":
        ledger = cls()
        for line in fp:
            line = line.strip()
            if not line:
                continue
            tag, rest = line.split(" ", 1)
            if tag == "height":
                ledger.height = int(rest)
            elif tag == "faucet":
                ledger.faucet(deserialize_tx(bytes.fromhex(rest)).outputs)
            elif tag == "tx":
                verdict = ledger.submit(deserialize_tx(bytes.fromhex(rest)))
                if not verdict.accepted:
                    raise LedgerError(f"dump replays invalid tx: {verdict}")
            else:
                raise LedgerError(f"unknown dump line tag: {tag}")
        return ledger
