"""Framed text protocol between tiers, plus TCP server and client.

A frame is a 4-byte big-endian payload length followed by UTF-8 text: the
first line is the verb (QUERY, RESULT, ERROR, PING, PONG), the remaining lines
are ``key<TAB>value`` pairs. Keys may repeat (one ``hit`` line per result).
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from typing import Callable

import numpy as np

from .core import ProductAttributes, SearchHit
from .search import PartialResult, QueryRequest, RankWeights

logger = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
Pairs = list[tuple[str, str]]


class ProtocolError(ValueError):
    pass


class RemoteError(RuntimeError):
    """The peer answered with an ERROR frame."""


def encode_frame(verb: str, pairs: Pairs = ()) -> bytes:
    lines = [verb]
    for key, value in pairs:
        if "\t" in key or "\n" in key or "\n" in value:
            raise ProtocolError(f"field {key!r} contains a separator")
        lines.append(f"{key}\t{value}")
    payload = "\n".join(lines).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def decode_payload(payload: bytes) -> tuple[str, Pairs]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError("payload is not UTF-8") from exc
    lines = text.split("\n")
    verb, pairs = lines[0], []
    for line in lines[1:]:
        if not line:
            continue
        key, sep, value = line.partition("\t")
        if not sep:
            raise ProtocolError(f"expected key<TAB>value, got {line!r}")
        pairs.append((key, value))
    return verb, pairs


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[str, Pairs] | None:
    """Next frame, or ``None`` on a clean end of stream."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    payload = _recv_exact(sock, n) if n else b""
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return decode_payload(payload)


# ---- message bodies ---------------------------------------------------------

def format_vector(v) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(v, dtype=np.float32))


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")], dtype=np.float32)
    except ValueError as exc:
        raise ProtocolError(f"bad vector: {exc}") from None


def query_pairs(request: QueryRequest) -> Pairs:
    pairs = [("k", str(request.k)), ("nprobe", str(request.nprobe))]
    if request.vector is not None:
        pairs.append(("vector", format_vector(request.vector)))
    else:
        pairs.append(("url", request.url))
    w = request.weights
    pairs.append(("weights", ",".join(repr(float(x)) for x in
                                      (w.w_sim, w.w_sales, w.w_praise, w.w_price))))
    return pairs


def parse_query(pairs: Pairs) -> QueryRequest:
    fields = dict(pairs)
    try:
        k = int(fields.get("k", "10"))
        nprobe = int(fields.get("nprobe", "1"))
        weights = RankWeights()
        if "weights" in fields:
            weights = RankWeights(*(float(x) for x in fields["weights"].split(",")))
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"bad query field: {exc}") from None
    vector = parse_vector(fields["vector"]) if "vector" in fields else None
    try:
        return QueryRequest(vector=vector, url=fields.get("url"), k=k, nprobe=nprobe,
                            weights=weights)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None


def result_pairs(result: PartialResult) -> Pairs:
    pairs = [("count", str(len(result.hits)))]
    for h in result.hits:
        a = h.attributes
        # url last: it is the only field that may contain commas
        pairs.append(("hit", f"{h.partition_id},{h.image_index},{h.distance!r},{h.score!r},"
                             f"{a.product_id},{a.sales},{a.praise},{a.price},{a.url}"))
    if result.missing:
        pairs.append(("degraded", ",".join(map(str, result.missing))))
    return pairs


def parse_result(pairs: Pairs) -> PartialResult:
    hits, missing = [], ()
    try:
        for key, value in pairs:
            if key == "hit":
                p, i, d, s, pid, sales, praise, price, url = value.split(",", 8)
                hits.append(SearchHit(int(i), int(p), float(d), float(s),
                                      ProductAttributes(int(pid), int(sales), int(praise),
                                                        int(price), url)))
            elif key == "degraded" and value:
                missing = tuple(int(x) for x in value.split(","))
    except ValueError as exc:
        raise ProtocolError(f"bad result line: {exc}") from None
    return PartialResult(hits, missing)


# ---- server -------------------------------------------------------------------

Handler = Callable[[QueryRequest], PartialResult]


class _RequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = read_frame(sock)
            except (ProtocolError, OSError) as exc:
                logger.debug("dropping connection: %s", exc)
                return
            if frame is None:
                return
            try:
                reply = self.server.dispatch(*frame)
            except Exception as exc:  # every failure becomes an ERROR frame
                reply = encode_frame("ERROR", [("message", str(exc).replace("\n", " "))])
            try:
                sock.sendall(reply)
            except OSError:
                return


class NodeServer(socketserver.ThreadingTCPServer):
    """Serves PING and QUERY frames for one node of any tier."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: Handler, role: str = "node"):
        self.handler = handler
        self.role = role
        super().__init__(address, _RequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def dispatch(self, verb: str, pairs: Pairs) -> bytes:
        if verb == "PING":
            return encode_frame("PONG", [("role", self.role)])
        if verb == "QUERY":
            return encode_frame("RESULT", result_pairs(self.handler(parse_query(pairs))))
        return encode_frame("ERROR", [("message", f"unknown verb {verb!r}")])

    def start(self) -> "NodeServer":
        self._thread = threading.Thread(target=self.serve_forever, name=f"{self.role}-server",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# ---- client ---------------------------------------------------------------------

class RemoteNode:
    """Client for a node; one persistent connection per calling thread."""

    def __init__(self, address: str, timeout: float | None = 2.0):
        self.address = address
        self._addr = parse_address(address)
        self.timeout = timeout
        self._local = threading.local()

    def _sock(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            sock = socket.create_connection(self._addr, timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
        return sock

    def _drop(self) -> None:
        sock = getattr(self._local, "sock", None)
        if sock is not None:
            try:
                sock.close()
            finally:
                self._local.sock = None

    def exchange(self, verb: str, pairs: Pairs = ()) -> tuple[str, Pairs]:
        frame = encode_frame(verb, pairs)
        for attempt in (0, 1):
            sock = self._sock()
            try:
                sock.sendall(frame)
                reply = read_frame(sock)
            except (OSError, ProtocolError):
                self._drop()
                if attempt:
                    raise
                continue
            if reply is None:
                # server closed an idle connection; reconnect once
                self._drop()
                if attempt:
                    raise ConnectionError(f"{self.address} closed the connection")
                continue
            return reply
        raise ConnectionError(f"no reply from {self.address}")

    def ping(self) -> str:
        verb, pairs = self.exchange("PING")
        if verb != "PONG":
            raise ProtocolError(f"expected PONG, got {verb}")
        return dict(pairs).get("role", "")

    def query(self, request: QueryRequest) -> PartialResult:
        verb, pairs = self.exchange("QUERY", query_pairs(request))
        if verb == "ERROR":
            raise RemoteError(dict(pairs).get("message", "remote error"))
        if verb != "RESULT":
            raise ProtocolError(f"expected RESULT, got {verb}")
        return parse_result(pairs)

    def search(self, query, k: int, nprobe: int = 1) -> PartialResult:
        return self.query(QueryRequest(vector=np.asarray(query), k=k, nprobe=nprobe))

    def close(self) -> None:
        self._drop()
