import random

import pytest

from teepay.demo import ChannelConfig, make_fixture
from teepay.enclave import Phase, Role
from teepay.host import (ChannelClosed, DirectLink, EstablishError, Frame,
                         FrameKind, establish, pump_until_idle)
from teepay.ledger import RejectReason


class TestFrameCodec:
    def test_golden_encoding(self):
        frame = Frame(FrameKind.PAYMENT, 5, b"abc")
        assert frame.encode() == (
            b"\x02" + (5).to_bytes(8, "little") + (3).to_bytes(4, "little") + b"abc")

    def test_roundtrip(self):
        for kind in FrameKind:
            frame = Frame(kind, 123_456_789, b"\x00payload")
            assert Frame.decode(frame.encode()) == frame

    def test_truncated_returns_none(self):
        data = Frame(FrameKind.ACK, 1, b"xy").encode()
        assert Frame.decode(data[:-1]) is None
        assert Frame.decode(data[:5]) is None
        assert Frame.decode(b"") is None

    def test_trailing_bytes_return_none(self):
        assert Frame.decode(Frame(FrameKind.ACK, 1, b"").encode() + b"\x00") is None

    def test_unknown_kind_returns_none(self):
        data = bytearray(Frame(FrameKind.ACK, 1, b"").encode())
        data[0] = 99
        assert Frame.decode(bytes(data)) is None


class TestEstablishment:
    def test_honest_establish(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        assert fx.node_hash.channel_open and fx.node_broadcast.channel_open
        assert fx.ledger.channel_tx_count() == 1
        # the hash side learns only the funding txid, the broadcast side the tx
        assert fx.node_hash.setup_tx is None
        assert fx.node_broadcast.setup_tx is not None
        from teepay.ledger import txid

        assert txid(fx.node_broadcast.setup_tx) == fx.node_hash.setup_hash
        assert fx.ledger.find_by_hash(fx.node_hash.setup_hash) is not None

    def test_payment_before_open_rejected(self):
        fx = make_fixture(ChannelConfig(seed=3))
        with pytest.raises(ChannelClosed):
            fx.node_hash.send_payment(100)

    def test_establish_timeout_without_peer(self):
        fx = make_fixture(ChannelConfig(seed=3))
        dead = DirectLink()  # frames routed into the fixture link, never this one
        with pytest.raises(EstablishError):
            # pump an empty link: handshake frames never cross
            establish(fx.node_hash, fx.node_broadcast, dead, max_ticks=10)

    def test_mauled_funding_detected_and_refunded(self):
        fx = make_fixture(ChannelConfig(seed=3))
        fx.node_broadcast.maul_on_broadcast = True
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        assert fx.node_hash.maul_recovered
        assert fx.node_hash.closed
        assert fx.node_hash.enclave.phase is Phase.CLOSED
        assert fx.ledger.channel_tx_count() == 2  # mauled funding + refund


class LossyLink:
    """Drops and duplicates frames deterministically; reliability must recover."""

    def __init__(self, fx, p_drop=0.3, p_dup=0.1, seed=7):
        self.fx = fx
        self.rng = random.Random(seed)
        self.p_drop = p_drop
        self.p_dup = p_dup
        self.queues = {Role.HASH_SIDE: [], Role.BROADCAST_SIDE: []}
        fx.node_hash._send_wire = self.queues[Role.HASH_SIDE].append
        fx.node_broadcast._send_wire = self.queues[Role.BROADCAST_SIDE].append

    def pump(self, rounds=1):
        for _ in range(rounds):
            for sender in Role:
                batch, self.queues[sender][:] = self.queues[sender][:], []
                dest = self.fx.node(sender.other())
                for wire in batch:
                    if self.rng.random() < self.p_drop:
                        continue
                    dest.on_wire(wire)
                    if self.rng.random() < self.p_dup:
                        dest.on_wire(wire)
            self.fx.node_hash.tick()
            self.fx.node_broadcast.tick()

    def drain(self, max_rounds=2000):
        for _ in range(max_rounds):
            self.pump()
            if (not any(self.queues.values())
                    and not self.fx.node_hash._unacked
                    and not self.fx.node_broadcast._unacked):
                return
        raise AssertionError("lossy link failed to drain")


class TestReliableTransport:
    def test_hundred_payments_over_lossy_link(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        link = LossyLink(fx)
        rng = random.Random(11)
        sent = []
        for _ in range(100):
            amount = rng.randint(1, 50_000)
            fx.node_hash.send_payment(amount)
            sent.append(amount)
            link.pump()
        link.drain()
        st_a = fx.node_hash.enclave.status()
        st_b = fx.node_broadcast.enclave.status()
        from teepay.enclave import close_fee_shares

        fee_h, fee_b = close_fee_shares(fx.cfg.fee_close)
        # every payment arrived exactly once, in order
        assert st_b.recv_counter == 100
        assert st_a.balance_mine == fx.cfg.deposit_hash - fee_h - sum(sent)
        assert st_b.balance_mine == fx.cfg.deposit_broadcast - fee_b + sum(sent)
        assert st_a.balance_theirs == st_b.balance_mine

    def test_bidirectional_over_lossy_link(self):
        fx = make_fixture(ChannelConfig(seed=4))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        link = LossyLink(fx, p_drop=0.4, p_dup=0.2, seed=9)
        for i in range(40):
            fx.node_hash.send_payment(1_000 + i)
            fx.node_broadcast.send_payment(2_000 + i)
            link.pump()
        link.drain()
        st_a = fx.node_hash.enclave.status()
        st_b = fx.node_broadcast.enclave.status()
        assert st_a.recv_counter == 40 and st_b.recv_counter == 40
        assert st_a.balance_mine == st_b.balance_theirs
        assert st_b.balance_mine == st_a.balance_theirs

    def test_duplicate_delivery_credits_once(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        captured = []
        fx.node_hash._send_wire = captured.append
        fx.node_hash.send_payment(5_000)
        wire = captured[0]
        before = fx.node_broadcast.enclave.status().balance_mine
        fx.node_broadcast.on_wire(wire)
        fx.node_broadcast.on_wire(wire)
        fx.node_broadcast.on_wire(wire)
        assert fx.node_broadcast.enclave.status().balance_mine == before + 5_000
        assert fx.node_broadcast.enclave.status().recv_counter == 1

    def test_undecodable_frame_ignored(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        st = fx.node_broadcast.enclave.status()
        fx.node_broadcast.on_wire(b"\xff" * 7)
        assert fx.node_broadcast.enclave.status() == st


class TestTermination:
    def test_terminate_settles_on_chain(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        fx.node_hash.send_payment(123)
        pump_until_idle(fx.node_hash, fx.node_broadcast, fx.link)
        tx, verdict = fx.node_broadcast.terminate()
        assert verdict.accepted
        assert fx.ledger.channel_tx_count() == 2
        with pytest.raises(ChannelClosed):
            fx.node_broadcast.send_payment(1)

    def test_settlement_race_exactly_one_confirms(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        _, v1 = fx.node_broadcast.terminate()
        _, v2 = fx.node_hash.terminate()
        assert v1.accepted
        assert v2.reason is RejectReason.DOUBLE_SPEND
        assert fx.ledger.channel_tx_count() == 2

    def test_refund_timeout_boundary(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        fx.ledger.advance_height(fx.cfg.refund_lock_height - 1)
        verdict = fx.node_hash.refund_after_timeout()
        assert verdict.reason is RejectReason.PREMATURE
        assert not fx.node_hash.closed
        fx.ledger.advance_height(1)
        assert fx.node_hash.refund_after_timeout().accepted
        assert fx.node_hash.closed

    def test_refund_after_settlement_rejected(self):
        fx = make_fixture(ChannelConfig(seed=3))
        establish(fx.node_hash, fx.node_broadcast, fx.link)
        fx.node_broadcast.terminate()
        fx.ledger.advance_height(fx.cfg.refund_lock_height)
        verdict = fx.node_hash.refund_after_timeout()
        assert verdict.reason is RejectReason.DOUBLE_SPEND
