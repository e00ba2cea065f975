import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_log
from rtvsearch.core import MessageKind, UpdateMessage
from rtvsearch.errors import MessageFormatError
from rtvsearch.messages import (
    MessageQueue, format_message, parse_message, read_message_log, tail_message_log,
    write_message_log,
)
from rtvsearch.stats import UpdateStats, aggregate_stats, parse_counter_log, percentiles_ms


def test_parse_each_kind():
    m = parse_message("ADD\t7\t1\t2\t3\thttp://a/1.jpg;http://a/2.jpg\n")
    assert m == UpdateMessage.add(7, ["http://a/1.jpg", "http://a/2.jpg"], 1, 2, 3)
    m = parse_message("UPDATE\t7\tprice=9,available=0")
    assert m.kind is MessageKind.ATTRIBUTE_UPDATE and m.changes == (("price", 9), ("available", 0))
    assert parse_message("REMOVE\t7") == UpdateMessage.remove(7)
    assert parse_message("# comment") is None
    assert parse_message("   \n") is None


@pytest.mark.parametrize("line", [
    "ADD\t7\t1\t2\thttp://a", "ADD\tx\t1\t2\t3\tu", "ADD\t7\t1\t2\t3\t", "UPDATE\t7\tprice",
    "UPDATE\t7\tcolour=1", "UPDATE\t7\tavailable=5", "REMOVE", "REMOVE\t0", "DROP\t1",
    "ADD\t7\t-1\t2\t3\tu",
])
def test_parse_rejects(line):
    with pytest.raises(MessageFormatError) as e:
        parse_message(line, 12)
    assert e.value.line_no == 12 and str(e.value).startswith("line 12:")


def test_format_round_trip():
    for m in random_log(500, seed=3):
        assert parse_message(format_message(m)) == m


@given(st.integers(1, 10**12), st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9),
       st.lists(st.text("abc/.:-_0123456789", min_size=1, max_size=12), min_size=1, max_size=4))
def test_add_round_trip_property(pid, s, p, c, urls):
    m = UpdateMessage.add(pid, urls, s, p, c)
    assert parse_message(format_message(m)) == m


def test_read_log_counts_malformed(tmp_path):
    path = tmp_path / "log"
    path.write_text("# header\nADD\t1\t0\t0\t0\tu1\nBAD\nREMOVE\t1\n\nUPDATE\t1\tnope\n")
    res = read_message_log(path)
    assert len(res.messages) == 2 and res.malformed == 2
    with pytest.raises(MessageFormatError) as e:
        read_message_log(path, strict=True)
    assert e.value.line_no == 3


def test_write_then_tail(tmp_path):
    path = tmp_path / "log"
    msgs = random_log(50, seed=1)
    write_message_log(path, msgs)
    assert list(tail_message_log(path)) == msgs


def test_tail_follow_sees_appends(tmp_path):
    path = tmp_path / "log"
    path.write_text("")
    stop = threading.Event()
    got = []

    def consume():
        for m in tail_message_log(path, follow=True, poll_interval=0.01, stop=stop):
            got.append(m)
            if len(got) == 2:
                stop.set()

    t = threading.Thread(target=consume)
    t.start()
    with open(path, "a") as fh:
        fh.write("REMOVE\t1\n")
        fh.flush()
        fh.write("REM")
        fh.flush()
        fh.write("OVE\t2\n")
    t.join(5)
    assert not t.is_alive()
    assert got == [UpdateMessage.remove(1), UpdateMessage.remove(2)]


def test_queue_fifo_and_tickets():
    q = MessageQueue()
    tickets = [q.put(UpdateMessage.remove(i)) for i in range(1, 4)]
    q.close()
    envs = list(q)
    assert [e.message.product_id for e in envs] == [1, 2, 3]
    envs[0].ticket.set("ok")
    assert tickets[0].wait(0) == "ok"
    with pytest.raises(TimeoutError):
        tickets[1].wait(0.01)


def test_stats_table_total():
    s = aggregate_stats([(0, "attribute_update", 315), (0, "image_addition", 521), (0, "image_deletion", 141)])
    assert s.total == 977
    assert s.report_lines()[0] == "total\t977"


def test_stats_zero():
    assert aggregate_stats([]).total == 0


@given(st.lists(st.tuples(st.integers(0, 23), st.sampled_from(
    ["attribute_update", "image_addition", "image_deletion", "reused_addition"]), st.integers(0, 1000))))
def test_stats_match_naive_accumulator(events):
    s = aggregate_stats(events)
    acc = {}
    for _, k, c in events:
        acc[k] = acc.get(k, 0) + c
    assert s.attribute_updates == acc.get("attribute_update", 0)
    assert s.reused_additions == acc.get("reused_addition", 0)
    assert s.total == sum(c for _, k, c in events if k != "reused_addition")
    for h in range(24):
        assert sum(s.hourly[h].values()) == sum(c for hh, _, c in events if hh == h)


def test_counter_log_parse():
    ev = parse_counter_log(["# h\tk\tc", "3\timage_addition\t5", "", "4\timage_deletion\t1"])
    assert ev == [(3, "image_addition", 5), (4, "image_deletion", 1)]
    with pytest.raises(ValueError):
        parse_counter_log(["3\tbogus\t1"])
    with pytest.raises(ValueError):
        UpdateStats().record("image_addition", -1)


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=200))
def test_percentiles_ordered(lat):
    p = percentiles_ms(lat)
    assert p["p50"] <= p["p90"] <= p["p99"] <= p["max"]


def test_percentiles_empty():
    assert percentiles_ms([])["p99"] == 0.0
