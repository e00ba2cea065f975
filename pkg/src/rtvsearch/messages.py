"""Message-log text format and message sources (file log, in-process queue)."""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .core import MessageKind, UpdateMessage
from .errors import MessageFormatError

_CLOSED = object()


def _int(text: str, what: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise MessageFormatError(f"{what} is not an integer: {text!r}") from None
    if value < 0:
        raise MessageFormatError(f"{what} must be non-negative")
    return value


def parse_message(line: str, line_no: int | None = None) -> UpdateMessage | None:
    """Parse one log line; ``None`` for blank lines and ``#`` comments."""
    line = line.rstrip("\r\n")
    if not line.strip() or line.startswith("#"):
        return None
    parts = line.split("\t")
    try:
        verb = parts[0]
        if verb == "ADD":
            if len(parts) != 6:
                raise MessageFormatError("ADD needs 6 tab-separated fields")
            urls = tuple(parts[5].split(";"))
            msg = UpdateMessage.add(_int(parts[1], "product_id"), urls,
                                    sales=_int(parts[2], "sales"),
                                    praise=_int(parts[3], "praise"),
                                    price=_int(parts[4], "price"))
        elif verb == "UPDATE":
            if len(parts) != 3:
                raise MessageFormatError("UPDATE needs 3 tab-separated fields")
            changes = []
            for item in parts[2].split(","):
                name, sep, value = item.partition("=")
                if not sep:
                    raise MessageFormatError(f"expected field=value, got {item!r}")
                changes.append((name, _int(value, name)))
            msg = UpdateMessage(MessageKind.ATTRIBUTE_UPDATE, _int(parts[1], "product_id"),
                                changes=tuple(changes))
        elif verb == "REMOVE":
            if len(parts) != 2:
                raise MessageFormatError("REMOVE needs 2 tab-separated fields")
            msg = UpdateMessage.remove(_int(parts[1], "product_id"))
        else:
            raise MessageFormatError(f"unknown message verb {verb!r}")
        msg.validate()
    except MessageFormatError as exc:
        raise MessageFormatError(str(exc), line_no) from None
    except ValueError as exc:
        raise MessageFormatError(str(exc), line_no) from None
    return msg


def format_message(msg: UpdateMessage) -> str:
    if msg.kind is MessageKind.PRODUCT_ADD:
        return "\t".join(["ADD", str(msg.product_id), str(msg.sales), str(msg.praise),
                          str(msg.price), ";".join(msg.urls)])
    if msg.kind is MessageKind.ATTRIBUTE_UPDATE:
        changes = ",".join(f"{k}={v}" for k, v in msg.changes)
        return f"UPDATE\t{msg.product_id}\t{changes}"
    return f"REMOVE\t{msg.product_id}"


def write_message_log(path, messages: Iterable[UpdateMessage]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in messages:
            fh.write(format_message(m) + "\n")


@dataclass
class LogReadResult:
    messages: list[UpdateMessage] = field(default_factory=list)
    malformed: int = 0
    errors: list[str] = field(default_factory=list)


def read_message_log(path, strict: bool = False) -> LogReadResult:
    """Read a whole log; malformed lines are counted (or raised when ``strict``)."""
    out = LogReadResult()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            try:
                msg = parse_message(line, line_no)
            except MessageFormatError as exc:
                if strict:
                    raise
                out.malformed += 1
                out.errors.append(str(exc))
                continue
            if msg is not None:
                out.messages.append(msg)
    return out


def tail_message_log(path, follow: bool = False, poll_interval: float = 0.05,
                     stop: threading.Event | None = None) -> Iterator[UpdateMessage | MessageFormatError]:
    """Yield messages from a log file; with ``follow`` keep waiting for appends.

    Malformed lines are yielded as :class:`MessageFormatError` instances so the
    consumer can count them.
    """
    stop = stop or threading.Event()
    while follow and not os.path.exists(path) and not stop.is_set():
        time.sleep(poll_interval)
    with open(path, encoding="utf-8") as fh:
        line_no = 0
        partial = ""
        while not stop.is_set():
            chunk = fh.readline()
            if not chunk:
                if not follow:
                    break
                time.sleep(poll_interval)
                continue
            partial += chunk
            if not partial.endswith("\n") and follow:
                continue
            line, partial = partial, ""
            line_no += 1
            try:
                msg = parse_message(line, line_no)
            except MessageFormatError as exc:
                yield exc
                continue
            if msg is not None:
                yield msg


class Ticket:
    """Acknowledgment handle for a message put on a :class:`MessageQueue`.

    A held lock serves as a one-shot latch; it is much cheaper to create
    than an Event, and one is created per message.
    """

    __slots__ = ("_latch", "ack")

    def __init__(self):
        self._latch = threading.Lock()
        self._latch.acquire()
        self.ack = None

    def set(self, ack) -> None:
        self.ack = ack
        self._latch.release()

    def wait(self, timeout: float | None = None):
        if not self._latch.acquire(timeout=-1 if timeout is None else timeout):
            raise TimeoutError("message not acknowledged in time")
        self._latch.release()
        return self.ack


@dataclass
class Envelope:
    message: UpdateMessage
    received_at: float
    ticket: Ticket | None = None


class MessageQueue:
    """In-process FIFO channel feeding an indexer's ``replay``."""

    def __init__(self):
        self._q: queue.SimpleQueue = queue.SimpleQueue()

    def put(self, msg: UpdateMessage) -> Ticket:
        ticket = Ticket()
        self._q.put(Envelope(msg, time.perf_counter(), ticket))
        return ticket

    def close(self) -> None:
        self._q.put(_CLOSED)

    def __iter__(self) -> Iterator[Envelope]:
        while True:
            item = self._q.get()
            if item is _CLOSED:
                return
            yield item
