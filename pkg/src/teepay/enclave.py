"""Trusted channel state machine emulating the TEE.

One instance serves one channel and exposes only the narrow call interface
below; its state is never touched any other way.  Covers provisioning, the
attestation handshake, asymmetric secret exchange, payment authorization and
acceptance with per-direction monotonic counters, settlement, and recovery
from a mauled funding transaction.

Callers must serialize all operations; an instance is strictly
single-threaded.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import crypto, ledger
from .crypto import pack_bytes, unpack_bytes
from .ledger import Input, LockCondition, OutPoint, Output, Transaction

SATOSHI_PER_BTC = 10**8

MEASUREMENT = crypto.sha256(b"teepay-enclave-build-1")
PROTOCOL_VERSION = b"teepay/1"


class EnclaveError(Exception):
    pass


class WrongPhase(EnclaveError):
    pass


class InsufficientFunds(EnclaveError):
    pass


class InsufficientBalance(EnclaveError):
    pass


class ZeroAmount(EnclaveError):
    pass


class ReplayOrGap(EnclaveError):
    pass


class WrongSecret(EnclaveError):
    pass


class OverCredit(EnclaveError):
    pass


class AttestationFailed(EnclaveError):
    pass


class OrderViolation(EnclaveError):
    pass


class BadSignature(EnclaveError):
    pass


class DecryptFailed(EnclaveError):
    pass


class ParamsMismatch(EnclaveError):
    pass


class NotMauled(EnclaveError):
    pass


class ForeignTransaction(EnclaveError):
    pass


class Phase(enum.Enum):
    CREATED = "Created"
    PROVISIONED = "Provisioned"
    ATTESTED = "Attested"
    ACTIVE = "Active"
    CLOSED = "Closed"


class Role(enum.Enum):
    # HASH_SIDE learns only the funding txid during establishment and goes
    # second in the secret exchange; BROADCAST_SIDE learns the full funding
    # transaction and broadcasts it.
    HASH_SIDE = "HashSide"
    BROADCAST_SIDE = "BroadcastSide"

    def other(self) -> "Role":
        return Role.BROADCAST_SIDE if self is Role.HASH_SIDE else Role.HASH_SIDE


@dataclass
class SetupData:
    btc_secret: Ed25519PrivateKey
    btc_public: bytes
    utxos: list[tuple[OutPoint, Output]]
    deposit: int
    change_address: bytes

    def to_bytes(self) -> bytes:
        sk = self.btc_secret.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        out = pack_bytes(sk) + pack_bytes(self.btc_public)
        out += struct.pack("<I", len(self.utxos))
        for op, o in self.utxos:
            out += op.txid + struct.pack("<I", op.index)
            out += struct.pack("<Q", o.value)
            out += pack_bytes(o.condition.keys[0])
        out += struct.pack("<Q", self.deposit) + pack_bytes(self.change_address)
        return out

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["SetupData", int]:
        sk_raw, off = unpack_bytes(buf, offset)
        pub, off = unpack_bytes(buf, off)
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        utxos = []
        for _ in range(n):
            txid = buf[off : off + 32]
            off += 32
            index, value = struct.unpack_from("<IQ", buf, off)
            off += 12
            key, off = unpack_bytes(buf, off)
            utxos.append((OutPoint(txid, index), Output(value, LockCondition.single_sig(key))))
        (deposit,) = struct.unpack_from("<Q", buf, off)
        off += 8
        change, off = unpack_bytes(buf, off)
        return (
            cls(Ed25519PrivateKey.from_private_bytes(sk_raw), pub, utxos, deposit, change),
            off,
        )

    def utxo_total(self) -> int:
        return sum(o.value for _, o in self.utxos)


@dataclass
class ChannelParams:
    fee_setup: int
    fee_close: int
    refund_lock_height: int
    my_role: Role

    def wire_bytes(self) -> bytes:
        # role intentionally excluded: the two sides hold opposite roles
        return struct.pack("<QQI", self.fee_setup, self.fee_close, self.refund_lock_height)


def close_fee_shares(fee_close: int) -> tuple[int, int]:
    """(hash side, broadcast side) split; the odd satoshi lands on HashSide."""
    hash_share = (fee_close + 1) // 2
    return hash_share, fee_close - hash_share


def setup_fee_shares(fee_setup: int, dep_hash: int, dep_bcast: int) -> tuple[int, int]:
    """Funding fee split proportionally to deposits; remainder to BroadcastSide."""
    total = dep_hash + dep_bcast
    if total <= 0:
        raise InsufficientFunds("total deposit must be positive")
    hash_share = fee_setup * dep_hash // total
    return hash_share, fee_setup - hash_share


# ---------------------------------------------------------------------------
# Encrypted payloads
# ---------------------------------------------------------------------------

PAYMENT_MSG_LEN = 32 + 8 + 8


def pack_payment(secret_id: bytes, counter: int, amount: int) -> bytes:
    return secret_id + struct.pack("<QQ", counter, amount)


def unpack_payment(buf: bytes) -> tuple[bytes, int, int]:
    if len(buf) != PAYMENT_MSG_LEN:
        raise ValueError("bad payment message length")
    counter, amount = struct.unpack_from("<QQ", buf, 32)
    return buf[:32], counter, amount


_BLOB_DOMAIN = b"teepay-secrets|"


def _pack_blob(secret_id: bytes, setup: SetupData, params: ChannelParams,
               sign_secret: Ed25519PrivateKey) -> bytes:
    body = pack_bytes(secret_id) + pack_bytes(setup.to_bytes()) + pack_bytes(params.wire_bytes())
    sig = crypto.sign(sign_secret, _BLOB_DOMAIN + body)
    return body + pack_bytes(sig)


def _unpack_blob(buf: bytes, peer_sign_pk: bytes) -> tuple[bytes, SetupData, bytes]:
    secret_id, off = unpack_bytes(buf, 0)
    setup_raw, off = unpack_bytes(buf, off)
    params_raw, off = unpack_bytes(buf, off)
    sig, end = unpack_bytes(buf, off)
    if end != len(buf):
        raise BadSignature("trailing bytes in secrets blob")
    body = buf[:off]
    if not crypto.verify(peer_sign_pk, _BLOB_DOMAIN + body, sig):
        raise BadSignature("owner signature on secrets blob does not verify")
    setup, _ = SetupData.from_bytes(setup_raw)
    return secret_id, setup, params_raw


class ChannelStatus(NamedTuple):
    phase: Phase
    balance_mine: int
    balance_theirs: int
    send_counter: int
    recv_counter: int


class Enclave:
    """Emulated TEE holding the trusted channel state for one channel."""

    def __init__(self, authority: crypto.SigningKeyPair, seed: int | None = None,
                 seed_label: str = ""):
        self._authority = authority
        self._seed = seed
        self._seed_label = seed_label
        self.phase = Phase.CREATED
        self._params: ChannelParams | None = None
        self._my_setup: SetupData | None = None
        self._their_setup: SetupData | None = None
        self._my_enc: crypto.EncryptionKeyPair | None = None
        self._my_sign: crypto.SigningKeyPair | None = None
        self._their_enc_pk: bytes | None = None
        self._their_sign_pk: bytes | None = None
        self._session: crypto.SessionBox | None = None
        self._my_secret_id: bytes | None = None
        self._their_secret_id: bytes | None = None
        self._send_counter = 0
        self._recv_counter = 0
        self._balance_mine = 0
        self._balance_theirs = 0
        self._initial_mine = 0
        self._initial_theirs = 0
        self.setup_tx: Transaction | None = None
        self.refund_tx: Transaction | None = None
        self._exported = False
        self._export_cache: bytes | None = None

    # -- phase A: establishment ---------------------------------------------

    def provision(self, setup: SetupData, params: ChannelParams) -> None:
        if self.phase is not Phase.CREATED:
            raise WrongPhase(f"provision in phase {self.phase.value}")
        if len({op for op, _ in setup.utxos}) != len(setup.utxos):
            raise InsufficientFunds("duplicate outpoints in setup data")
        if setup.utxo_total() < setup.deposit:
            raise InsufficientFunds(
                f"utxos total {setup.utxo_total()} < deposit {setup.deposit}"
            )
        if params.refund_lock_height <= 0:
            raise InsufficientFunds("refund lock height must be positive")
        self._my_setup = setup
        self._params = params
        self.phase = Phase.PROVISIONED

    def get_attestation(self) -> tuple[crypto.Quote, bytes, bytes]:
        if self.phase is not Phase.PROVISIONED:
            raise WrongPhase(f"get_attestation in phase {self.phase.value}")
        if self._my_enc is None:
            # generated exactly once; repeat calls return the same keys
            self._my_enc = crypto.generate_encryption_keypair(
                self._seed, self._seed_label + "/enc")
            self._my_sign = crypto.generate_signing_keypair(
                self._seed, self._seed_label + "/enclave-sign")
            if self._seed is None:
                self._my_secret_id = os.urandom(32)
            else:
                self._my_secret_id = crypto.derive_seed_bytes(
                    self._seed, self._seed_label + "/secret-id")
        quote = crypto.quote_create(
            self._authority.secret, MEASUREMENT,
            _bind_report_data(self._my_enc.public, self._my_sign.public))
        return quote, self._my_enc.public, self._my_sign.public

    def accept_peer(self, quote: crypto.Quote, peer_enc_pk: bytes, peer_sign_pk: bytes,
                    expected_measurement: bytes) -> None:
        if self.phase is not Phase.PROVISIONED or self._my_enc is None:
            raise WrongPhase(f"accept_peer in phase {self.phase.value}")
        if not crypto.quote_verify(self._authority.public, quote, expected_measurement):
            raise AttestationFailed("quote does not verify against expected measurement")
        if quote.report_data != _bind_report_data(peer_enc_pk, peer_sign_pk):
            raise AttestationFailed("quote does not bind the presented keys")
        self._their_enc_pk = peer_enc_pk
        self._their_sign_pk = peer_sign_pk
        # payment traffic uses a session box keyed by the two attested
        # asymmetric pairs; the secrets blob stays on ephemeral ECIES
        self._session = crypto.SessionBox(self._my_enc.secret, peer_enc_pk)
        self.phase = Phase.ATTESTED

    def export_secrets(self) -> bytes:
        if self.phase not in (Phase.ATTESTED, Phase.ACTIVE):
            raise WrongPhase(f"export_secrets in phase {self.phase.value}")
        if self._params.my_role is Role.HASH_SIDE and self._their_setup is None:
            raise OrderViolation("HashSide exports only after a successful import")
        if self._export_cache is None:
            blob = _pack_blob(self._my_secret_id, self._my_setup, self._params,
                              self._my_sign.secret)
            self._export_cache = crypto.encrypt(self._their_enc_pk, blob)
            self._exported = True
        return self._export_cache

    def import_secrets(self, blob_ct: bytes):
        if self.phase is not Phase.ATTESTED:
            raise WrongPhase(f"import_secrets in phase {self.phase.value}")
        if self._params.my_role is Role.BROADCAST_SIDE and not self._exported:
            raise OrderViolation("BroadcastSide must export before importing")
        try:
            blob = crypto.decrypt(self._my_enc.secret, blob_ct)
        except crypto.DecryptionError as exc:
            raise DecryptFailed(str(exc)) from exc
        secret_id, their_setup, params_raw = _unpack_blob(blob, self._their_sign_pk)
        if params_raw != self._params.wire_bytes():
            raise ParamsMismatch("peer provisioned different channel parameters")
        self._their_secret_id = secret_id
        self._their_setup = their_setup
        self._activate()
        if self._params.my_role is Role.HASH_SIDE:
            return ledger.txid(self.setup_tx), self.refund_tx
        return self.setup_tx, self.refund_tx

    def _activate(self) -> None:
        if self._params.my_role is Role.HASH_SIDE:
            hash_sd, bcast_sd = self._my_setup, self._their_setup
        else:
            hash_sd, bcast_sd = self._their_setup, self._my_setup
        self.setup_tx, self.refund_tx = build_channel_transactions(
            hash_sd, bcast_sd, self._params)
        fee_h, fee_b = close_fee_shares(self._params.fee_close)
        init_hash = hash_sd.deposit - fee_h
        init_bcast = bcast_sd.deposit - fee_b
        if init_hash < 0 or init_bcast < 0:
            raise InsufficientFunds("deposit does not cover settlement fee share")
        if self._params.my_role is Role.HASH_SIDE:
            self._balance_mine, self._balance_theirs = init_hash, init_bcast
        else:
            self._balance_mine, self._balance_theirs = init_bcast, init_hash
        self._initial_mine = self._balance_mine
        self._initial_theirs = self._balance_theirs
        self.phase = Phase.ACTIVE

    # -- phase B: operation --------------------------------------------------

    def pay(self, amount: int) -> bytes:
        if self.phase is not Phase.ACTIVE:
            raise WrongPhase(f"pay in phase {self.phase.value}")
        if amount <= 0:
            raise ZeroAmount("payment amount must be positive")
        if amount > self._balance_mine:
            raise InsufficientBalance(
                f"amount {amount} exceeds balance {self._balance_mine}")
        # state is committed before the ciphertext leaves: a lost message is
        # still a registered payment
        self._balance_mine -= amount
        self._balance_theirs += amount
        self._send_counter += 1
        msg = pack_payment(self._my_secret_id, self._send_counter, amount)
        return self._session.seal(msg)

    def receive_payment(self, ct: bytes) -> int:
        if self.phase is not Phase.ACTIVE:
            raise WrongPhase(f"receive_payment in phase {self.phase.value}")
        try:
            msg = self._session.open(ct)
            secret_id, counter, amount = unpack_payment(msg)
        except (crypto.DecryptionError, ValueError) as exc:
            raise DecryptFailed(str(exc)) from exc
        if secret_id != self._their_secret_id:
            raise WrongSecret("payment does not carry the peer enclave secret")
        if counter != self._recv_counter + 1:
            raise ReplayOrGap(
                f"counter {counter}, expected {self._recv_counter + 1}")
        if amount <= 0:
            raise DecryptFailed("non-positive amount in payment message")
        if amount > self._balance_theirs:
            raise OverCredit(f"amount {amount} exceeds sender balance")
        self._recv_counter += 1
        self._balance_mine += amount
        self._balance_theirs -= amount
        return self._balance_mine

    # -- phase C: settlement --------------------------------------------------

    def settle(self) -> Transaction:
        if self.phase is not Phase.ACTIVE:
            raise WrongPhase(f"settle in phase {self.phase.value}")
        tx = self._spend_setup_output(
            ledger.txid(self.setup_tx),
            self._payouts(self._balance_mine, self._balance_theirs),
            lock_time=0)
        self._destroy()
        return tx

    def reissue_refund(self, observed_setup: Transaction) -> Transaction:
        if self.phase is not Phase.ACTIVE:
            raise WrongPhase(f"reissue_refund in phase {self.phase.value}")
        if ledger.sighash(observed_setup) != ledger.sighash(self.setup_tx):
            raise ForeignTransaction("presented transaction is not this channel's funding")
        observed_id = ledger.txid(observed_setup)
        if observed_id == ledger.txid(self.setup_tx):
            raise NotMauled("funding transaction is unmodified; use settle")
        # mauling can only happen before establishment completed for the peer,
        # so the immediate refund closes at the initial balances
        tx = self._spend_setup_output(
            observed_id,
            self._payouts(self._initial_mine, self._initial_theirs),
            lock_time=0)
        self._destroy()
        return tx

    def status(self) -> ChannelStatus:
        return ChannelStatus(self.phase, self._balance_mine, self._balance_theirs,
                             self._send_counter, self._recv_counter)

    # -- internals -------------------------------------------------------------

    def _payouts(self, mine: int, theirs: int) -> list[Output]:
        if self._params.my_role is Role.HASH_SIDE:
            pairs = [(mine, self._my_setup.change_address),
                     (theirs, self._their_setup.change_address)]
        else:
            pairs = [(theirs, self._their_setup.change_address),
                     (mine, self._my_setup.change_address)]
        return [Output(v, LockCondition.single_sig(addr)) for v, addr in pairs if v > 0]

    def _spend_setup_output(self, setup_id: bytes, outputs: list[Output],
                            lock_time: int) -> Transaction:
        if self._params.my_role is Role.HASH_SIDE:
            hash_sd, bcast_sd = self._my_setup, self._their_setup
        else:
            hash_sd, bcast_sd = self._their_setup, self._my_setup
        tx = Transaction(
            inputs=[Input(OutPoint(setup_id, 0))], outputs=outputs, lock_time=lock_time)
        digest = ledger.sighash(tx)
        tx.inputs[0].witness.signatures = [
            crypto.sign(hash_sd.btc_secret, digest),
            crypto.sign(bcast_sd.btc_secret, digest),
        ]
        return tx

    def _destroy(self) -> None:
        """Erase channel secrets; only status() keeps reporting frozen values."""
        self._my_setup = None
        self._their_setup = None
        self._my_enc = None
        self._my_sign = None
        self._their_enc_pk = None
        self._session = None
        self._my_secret_id = None
        self._their_secret_id = None
        self.setup_tx = None
        self.refund_tx = None
        self._export_cache = None
        self.phase = Phase.CLOSED


def _bind_report_data(enc_pk: bytes, sign_pk: bytes) -> bytes:
    return crypto.sha256(enc_pk + sign_pk + PROTOCOL_VERSION)


def build_channel_transactions(hash_sd: SetupData, bcast_sd: SetupData,
                               params: ChannelParams) -> tuple[Transaction, Transaction]:
    """Deterministically construct the signed funding and refund transactions.

    Both enclaves run this on identical inputs and must produce bit-identical
    transactions (Ed25519 signing is deterministic), so ordering is canonical:
    HashSide inputs and outputs come first.
    """
    fee_h, fee_b = setup_fee_shares(params.fee_setup, hash_sd.deposit, bcast_sd.deposit)
    change_h = hash_sd.utxo_total() - hash_sd.deposit - fee_h
    change_b = bcast_sd.utxo_total() - bcast_sd.deposit - fee_b
    if change_h < 0 or change_b < 0:
        raise InsufficientFunds("utxos do not cover deposit plus funding fee share")
    multisig = LockCondition.multisig_2of2(hash_sd.btc_public, bcast_sd.btc_public)
    outputs = [Output(hash_sd.deposit + bcast_sd.deposit, multisig)]
    if change_h > 0:
        outputs.append(Output(change_h, LockCondition.single_sig(hash_sd.change_address)))
    if change_b > 0:
        outputs.append(Output(change_b, LockCondition.single_sig(bcast_sd.change_address)))
    inputs = [Input(op) for op, _ in hash_sd.utxos] + [Input(op) for op, _ in bcast_sd.utxos]
    setup_tx = Transaction(inputs=inputs, outputs=outputs, lock_time=0)
    digest = ledger.sighash(setup_tx)
    n_hash = len(hash_sd.utxos)
    for i, inp in enumerate(setup_tx.inputs):
        owner = hash_sd if i < n_hash else bcast_sd
        inp.witness.signatures = [crypto.sign(owner.btc_secret, digest)]

    cf_h, cf_b = close_fee_shares(params.fee_close)
    refund_outputs = []
    if hash_sd.deposit - cf_h > 0:
        refund_outputs.append(Output(hash_sd.deposit - cf_h,
                                     LockCondition.single_sig(hash_sd.change_address)))
    if bcast_sd.deposit - cf_b > 0:
        refund_outputs.append(Output(bcast_sd.deposit - cf_b,
                                     LockCondition.single_sig(bcast_sd.change_address)))
    refund_tx = Transaction(
        inputs=[Input(OutPoint(ledger.txid(setup_tx), 0))],
        outputs=refund_outputs,
        lock_time=params.refund_lock_height)
    rdigest = ledger.sighash(refund_tx)
    refund_tx.inputs[0].witness.signatures = [
        crypto.sign(hash_sd.btc_secret, rdigest),
        crypto.sign(bcast_sd.btc_secret, rdigest),
    ]
    return setup_tx, refund_tx
