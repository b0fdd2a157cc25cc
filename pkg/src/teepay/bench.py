"""Lock-step bidirectional payment benchmark.

Two established parties exchange payments sequentially in lock-step; the
harness reports wall time, throughput, and per-payment send-to-accept latency.
Absolute numbers from the software-emulated enclave are not comparable to TEE
hardware; the published hardware figures are carried in the report header for
context only.
"""
from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass

from .demo import ChannelConfig, make_fixture
from .enclave import Enclave
from .host import Frame, FrameKind, establish

HARDWARE_BASELINE = "2480 payments/s at 0.40 ms mean latency (reported for TEE hardware)"

PAYMENT_AMOUNT = 1_000  # satoshi; symmetric both ways, so balances return to start


@dataclass
class BenchReport:
    mode: str
    n_payments: int  # per direction
    wall_time: float
    throughput: float  # payments per second, both directions combined
    latency_mean: float
    latency_p50: float
    latency_p99: float
    messages: int
    balances_restored: bool

    def to_kv(self) -> str:
        lines = [
            f"# hardware baseline (context only): {HARDWARE_BASELINE}",
            f"mode={self.mode}",
            f"n_payments_each_way={self.n_payments}",
            f"messages={self.messages}",
            f"wall_time_s={self.wall_time:.6f}",
            f"throughput_per_s={self.throughput:.2f}",
            f"latency_mean_ms={self.latency_mean * 1e3:.4f}",
            f"latency_p50_ms={self.latency_p50 * 1e3:.4f}",
            f"latency_p99_ms={self.latency_p99 * 1e3:.4f}",
            f"balances_restored={str(self.balances_restored).lower()}",
        ]
        return "\n".join(lines) + "\n"


def _percentile(sorted_samples: list[float], q: float) -> float:
    idx = min(len(sorted_samples) - 1, max(0, round(q * (len(sorted_samples) - 1))))
    return sorted_samples[idx]


def _make_report(mode: str, n: int, wall: float, samples: list[float],
                 messages: int, restored: bool) -> BenchReport:
    ordered = sorted(samples)
    return BenchReport(
        mode=mode,
        n_payments=n,
        wall_time=wall,
        throughput=(2 * n) / wall if wall > 0 else float("inf"),
        latency_mean=sum(samples) / len(samples),
        latency_p50=_percentile(ordered, 0.50),
        latency_p99=_percentile(ordered, 0.99),
        messages=messages,
        balances_restored=restored,
    )


def _established_enclaves(seed: int) -> tuple[Enclave, Enclave, "object"]:
    cfg = ChannelConfig(seed=seed)
    fx = make_fixture(cfg)
    establish(fx.node_hash, fx.node_broadcast, fx.link)
    return fx.node_hash.enclave, fx.node_broadcast.enclave, fx


def run_lockstep(n: int, mode: str = "inprocess", seed: int = 1) -> tuple[BenchReport, list[float]]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode == "inprocess":
        return _run_inprocess(n, seed)
    if mode == "loopback":
        return _run_loopback(n, seed)
    raise ValueError(f"unknown mode: {mode}")


def _run_inprocess(n: int, seed: int) -> tuple[BenchReport, list[float]]:
    """Single-threaded alternation directly against the two enclaves."""
    enc_a, enc_b, fx = _established_enclaves(seed)
    start_a = enc_a.status().balance_mine
    start_b = enc_b.status().balance_mine
    samples: list[float] = []
    messages = 0
    perf = time.perf_counter
    t_start = perf()
    for _ in range(n):
        t0 = perf()
        enc_b.receive_payment(enc_a.pay(PAYMENT_AMOUNT))
        t1 = perf()
        enc_a.receive_payment(enc_b.pay(PAYMENT_AMOUNT))
        t2 = perf()
        samples.append(t1 - t0)
        samples.append(t2 - t1)
        messages += 2
    wall = perf() - t_start
    restored = (enc_a.status().balance_mine == start_a
                and enc_b.status().balance_mine == start_b)
    settlement = enc_b.settle()
    fx.ledger.submit(settlement)
    return _make_report("inprocess", n, wall, samples, messages, restored), samples


def _run_loopback(n: int, seed: int) -> tuple[BenchReport, list[float]]:
    """Two party threads exchanging payment frames over a local socket pair."""
    enc_a, enc_b, fx = _established_enclaves(seed)
    start_a = enc_a.status().balance_mine
    start_b = enc_b.status().balance_mine
    sock_a, sock_b = socket.socketpair()
    samples: list[float] = []
    counters = {"messages": 0}
    errors: list[BaseException] = []

    def recv_frame(sock: socket.socket) -> Frame:
        header = b""
        while len(header) < 13:
            chunk = sock.recv(13 - len(header))
            if not chunk:
                raise ConnectionError("peer closed")
            header += chunk
        length = int.from_bytes(header[9:13], "little")
        payload = b""
        while len(payload) < length:
            payload += sock.recv(length - len(payload))
        frame = Frame.decode(header + payload)
        if frame is None:
            raise ConnectionError("bad frame")
        return frame

    def party(enclave: Enclave, sock: socket.socket, leads: bool) -> None:
        try:
            perf = time.perf_counter
            for i in range(n):
                if leads:
                    t0 = perf()
                    sock.sendall(Frame(FrameKind.PAYMENT, i, enclave.pay(PAYMENT_AMOUNT)).encode())
                    counters["messages"] += 1
                    enclave.receive_payment(recv_frame(sock).payload)
                    samples.append(perf() - t0)
                else:
                    enclave.receive_payment(recv_frame(sock).payload)
                    sock.sendall(Frame(FrameKind.PAYMENT, i, enclave.pay(PAYMENT_AMOUNT)).encode())
                    counters["messages"] += 1
        except BaseException as exc:  # surfaces in the main thread
            errors.append(exc)

    t_start = time.perf_counter()
    thread_b = threading.Thread(target=party, args=(enc_b, sock_b, False))
    thread_b.start()
    party(enc_a, sock_a, True)
    thread_b.join()
    wall = time.perf_counter() - t_start
    sock_a.close()
    sock_b.close()
    if errors:
        raise errors[0]
    restored = (enc_a.status().balance_mine == start_a
                and enc_b.status().balance_mine == start_b)
    settlement = enc_b.settle()
    fx.ledger.submit(settlement)
    return _make_report("loopback", n, wall, samples, counters["messages"], restored), samples
