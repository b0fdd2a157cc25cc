"""Two-process mode: a TCP ledger service and long-running party nodes.

The ledger service hosts the shared simulated chain and speaks a JSON-lines
protocol.  Party nodes talk to each other with the bit-exact frame wire
format from the host module and to the ledger through a client proxy that
satisfies the same interface as the in-process ledger.
"""
from __future__ import annotations

import json
import random
import socket
import socketserver
import threading
import time

from .demo import (ChannelConfig, build_genesis, genesis_outputs, params_for,
                   payment_schedule, authority_for, setup_data_for)
from .enclave import Enclave, InsufficientBalance, Role
from .host import PartyNode
from .ledger import Ledger, RejectReason, Transaction, Verdict, deserialize_tx, serialize_tx

_ROLE_LABEL = {Role.HASH_SIDE: "A", Role.BROADCAST_SIDE: "B"}


class NodeError(Exception):
    pass


# ---------------------------------------------------------------------------
# Ledger service
# ---------------------------------------------------------------------------

class _LedgerHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server: LedgerServer = self.server  # type: ignore[assignment]
        for raw in self.rfile:
            try:
                req = json.loads(raw)
                resp = server.dispatch(req)
            except Exception as exc:  # malformed request: report, keep serving
                resp = {"error": str(exc)}
            self.wfile.write((json.dumps(resp) + "\n").encode())
            self.wfile.flush()
            if req.get("op") == "shutdown":
                threading.Thread(target=server.shutdown, daemon=True).start()
                return


class LedgerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], cfg: ChannelConfig):
        super().__init__(addr, _LedgerHandler)
        self.ledger = Ledger()
        build_genesis(self.ledger, cfg)
        self.lock = threading.Lock()

    def dispatch(self, req: dict) -> dict:
        op = req.get("op")
        with self.lock:
            lg = self.ledger
            if op == "submit":
                verdict = lg.submit(deserialize_tx(bytes.fromhex(req["tx"])))
                return {"accepted": verdict.accepted,
                        "reason": verdict.reason.value if verdict.reason else None}
            if op == "find":
                tx = lg.find_by_hash(bytes.fromhex(req["hash"]))
                return {"tx": serialize_tx(tx).hex() if tx else None}
            if op == "confirmed_count":
                return {"count": lg.confirmed_count()}
            if op == "confirmed_since":
                return {"txs": [serialize_tx(t).hex() for t in lg.confirmed_since(req["index"])]}
            if op == "channel_tx_count":
                return {"count": lg.channel_tx_count()}
            if op == "height":
                return {"height": lg.height}
            if op == "advance":
                return {"height": lg.advance_height(req["blocks"])}
            if op == "dump":
                return {"text": lg.dump_str()}
            if op == "shutdown":
                return {"ok": True}
            return {"error": f"unknown op {op}"}


def serve_ledger(host: str, port: int, cfg: ChannelConfig) -> None:
    with LedgerServer((host, port), cfg) as server:
        server.serve_forever(poll_interval=0.05)


class LedgerClient:
    """Proxy satisfying the in-process ledger interface used by PartyNode."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._fp = self._sock.makefile("rwb")
        self._lock = threading.Lock()

    def _call(self, **req) -> dict:
        with self._lock:
            self._fp.write((json.dumps(req) + "\n").encode())
            self._fp.flush()
            line = self._fp.readline()
        if not line:
            raise NodeError("ledger service closed the connection")
        resp = json.loads(line)
        if "error" in resp:
            raise NodeError(resp["error"])
        return resp

    def submit(self, tx: Transaction) -> Verdict:
        resp = self._call(op="submit", tx=serialize_tx(tx).hex())
        reason = RejectReason(resp["reason"]) if resp["reason"] else None
        return Verdict(resp["accepted"], reason)

    def find_by_hash(self, h: bytes) -> Transaction | None:
        resp = self._call(op="find", hash=h.hex())
        return deserialize_tx(bytes.fromhex(resp["tx"])) if resp["tx"] else None

    def confirmed_count(self) -> int:
        return self._call(op="confirmed_count")["count"]

    def confirmed_since(self, index: int) -> list[Transaction]:
        return [deserialize_tx(bytes.fromhex(h))
                for h in self._call(op="confirmed_since", index=index)["txs"]]

    def channel_tx_count(self) -> int:
        return self._call(op="channel_tx_count")["count"]

    def advance_height(self, blocks: int) -> int:
        return self._call(op="advance", blocks=blocks)["height"]

    @property
    def height(self) -> int:
        return self._call(op="height")["height"]

    def dump_text(self) -> str:
        return self._call(op="dump")["text"]

    def shutdown(self) -> None:
        try:
            self._call(op="shutdown")
        except (NodeError, OSError):
            pass

    def close(self) -> None:
        self._fp.close()
        self._sock.close()


# ---------------------------------------------------------------------------
# Party node process
# ---------------------------------------------------------------------------

def _frame_reader(sock: socket.socket, inbox: list, stop: threading.Event) -> None:
    """Reassemble frames from the TCP stream into the inbox."""
    buf = b""
    sock.settimeout(0.1)
    while not stop.is_set():
        try:
            chunk = sock.recv(4096)
            if not chunk:
                return
            buf += chunk
        except socket.timeout:
            continue
        except OSError:
            return
        while len(buf) >= 13:
            length = int.from_bytes(buf[9:13], "little")
            if len(buf) < 13 + length:
                break
            inbox.append(buf[: 13 + length])
            buf = buf[13 + length :]


def run_party(cfg: ChannelConfig, role: Role, listen: str | None, connect: str | None,
              ledger_addr: str, n_payments: int, target_broadcast_final: int | None,
              deadline_s: float = 60.0, retry_budget: int = 50) -> dict:
    """Run one side of the channel across real sockets; returns a summary."""
    lhost, lport = ledger_addr.rsplit(":", 1)[0], int(ledger_addr.rsplit(":", 1)[1])
    ledger = _connect_with_retry(lambda: LedgerClient(lhost, lport), retry_budget)
    peer_sock = _open_peer_socket(listen, connect, retry_budget)

    authority = authority_for(cfg.seed)
    enclave = Enclave(authority, seed=cfg.seed, seed_label=_ROLE_LABEL[role])
    enclave.provision(setup_data_for(cfg, role, genesis_outputs(cfg, role)),
                      params_for(cfg, role))
    node = PartyNode(enclave, role, ledger, lambda b: peer_sock.sendall(b),
                     maul_rng=random.Random(cfg.seed))

    inbox: list[bytes] = []
    stop = threading.Event()
    reader = threading.Thread(target=_frame_reader, args=(peer_sock, inbox, stop), daemon=True)
    reader.start()

    deadline = time.monotonic() + deadline_s
    schedule = payment_schedule(cfg, n_payments, target_broadcast_final)
    my_payments = [amt for r, amt in schedule if r is role]
    expected_in = len(schedule) - len(my_payments)

    def pump() -> None:
        while inbox:
            node.on_wire(inbox.pop(0))
        node.tick()
        time.sleep(0.002)

    try:
        node.start_handshake()
        while not node.channel_open:
            if node.error:
                raise NodeError(node.error)
            if time.monotonic() > deadline:
                raise NodeError("timeout during establishment")
            pump()

        sent = 0
        while sent < len(my_payments):
            try:
                node.send_payment(my_payments[sent])
                sent += 1
            except InsufficientBalance:
                pump()  # waiting on incoming funds
            if time.monotonic() > deadline:
                raise NodeError("timeout while sending payments")
            pump()

        while (enclave.status().recv_counter < expected_in
               or node._unacked):
            if time.monotonic() > deadline:
                raise NodeError("timeout waiting for payment exchange to drain")
            pump()

        if role is Role.BROADCAST_SIDE:
            tx, verdict = node.terminate()
            summary_verdict = str(verdict)
        else:
            while ledger.channel_tx_count() < 2:
                if time.monotonic() > deadline:
                    raise NodeError("timeout waiting for settlement on chain")
                pump()
            summary_verdict = "SettlementObserved"
        st = enclave.status()
        return {"role": role.value, "verdict": summary_verdict,
                "balance_mine": st.balance_mine, "balance_theirs": st.balance_theirs,
                "channel_txs": ledger.channel_tx_count()}
    finally:
        stop.set()
        reader.join(timeout=1.0)
        peer_sock.close()
        ledger.close()


def _connect_with_retry(factory, budget: int):
    last: Exception | None = None
    for _ in range(budget):
        try:
            return factory()
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise NodeError(f"connection failed after {budget} attempts: {last}")


def _open_peer_socket(listen: str | None, connect: str | None, budget: int) -> socket.socket:
    if (listen is None) == (connect is None):
        raise NodeError("exactly one of listen/connect must be given")
    if listen is not None:
        host, port = listen.rsplit(":", 1)[0], int(listen.rsplit(":", 1)[1])
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(30.0)
        conn, _ = srv.accept()
        srv.close()
        return conn
    host, port = connect.rsplit(":", 1)[0], int(connect.rsplit(":", 1)[1])
    return _connect_with_retry(lambda: socket.create_connection((host, port), timeout=30.0),
                               budget)
