import socket
import struct

import numpy as np
import pytest

from rtvsearch.core import ProductAttributes, SearchHit
from rtvsearch.search import PartialResult, QueryRequest, RankWeights
from rtvsearch.wire import (
    NodeServer, ProtocolError, RemoteError, RemoteNode, decode_payload, encode_frame, parse_query,
    parse_result, query_pairs, read_frame, result_pairs,
)


def test_frame_layout():
    frame = encode_frame("PING")
    assert frame == struct.pack(">I", 4) + b"PING"
    frame = encode_frame("QUERY", [("k", "3"), ("url", "http://é")])
    payload = "QUERY\nk\t3\nurl\thttp://é".encode()
    assert frame == struct.pack(">I", len(payload)) + payload
    assert decode_payload(payload) == ("QUERY", [("k", "3"), ("url", "http://é")])


def test_decode_rejects_garbage():
    with pytest.raises(ProtocolError):
        decode_payload(b"QUERY\nno-tab-here")
    with pytest.raises(ProtocolError):
        decode_payload(b"\xff\xfe")


def test_query_round_trip():
    v = np.random.default_rng(0).normal(size=16).astype(np.float32)
    req = QueryRequest(vector=v, k=7, nprobe=3, weights=RankWeights(1, 0.5, 0.25, 0.125))
    back = parse_query(query_pairs(req))
    assert back.vector.tobytes() == v.tobytes()
    assert (back.k, back.nprobe, back.weights) == (7, 3, req.weights)
    assert parse_query(query_pairs(QueryRequest(url="http://x/y.jpg"))).url == "http://x/y.jpg"
    with pytest.raises(ProtocolError):
        parse_query([("k", "2")])


def test_result_round_trip():
    hits = [SearchHit(3, 1, 0.1 + 0.2, 1 / 1.3, ProductAttributes(5, 1, 2, 3, "http://a,b/c.jpg"))]
    back = parse_result(result_pairs(PartialResult(hits, (2, 4))))
    assert back.hits == hits and back.hits[0].url == "http://a,b/c.jpg" and back.missing == (2, 4)
    assert parse_result(result_pairs(PartialResult([]))).hits == []


def _server(handler):
    return NodeServer(("127.0.0.1", 0), handler, role="searcher").start()


def test_ping_pong_and_query():
    hits = [SearchHit(0, 0, 0.0, 1.0, ProductAttributes(1, 0, 0, 0, "u"))]
    srv = _server(lambda req: PartialResult(hits[:req.k]))
    node = RemoteNode(srv.address, timeout=2)
    try:
        assert node.ping() == "searcher"
        assert node.query(QueryRequest(vector=np.zeros(2), k=1)).hits == hits
        assert node.search(np.zeros(2), 1, 1).hits == hits
    finally:
        node.close()
        srv.stop()


def test_handler_error_becomes_error_frame():
    def boom(req):
        raise ValueError("bad dimension")

    srv = _server(boom)
    node = RemoteNode(srv.address, timeout=2)
    try:
        with pytest.raises(RemoteError, match="bad dimension"):
            node.query(QueryRequest(vector=np.zeros(2)))
        assert node.ping() == "searcher"
    finally:
        node.close()
        srv.stop()


def test_raw_socket_exchange():
    srv = _server(lambda req: PartialResult([]))
    host, port = srv.address.rsplit(":", 1)
    try:
        with socket.create_connection((host, int(port)), timeout=2) as s:
            s.sendall(encode_frame("PING"))
            assert read_frame(s)[0] == "PONG"
            s.sendall(encode_frame("QUERY", [("k", "1"), ("vector", "0.0,1.0")]))
            verb, pairs = read_frame(s)
            assert verb == "RESULT" and pairs == [("count", "0")]
            s.sendall(encode_frame("HELLO"))
            assert read_frame(s)[0] == "ERROR"
    finally:
        srv.stop()


def test_unreachable_node():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    addr = "127.0.0.1:%d" % s.getsockname()[1]
    s.close()
    with pytest.raises(OSError):
        RemoteNode(addr, timeout=0.5).ping()
