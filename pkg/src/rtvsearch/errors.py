"""Exception types shared across modules."""


class SnapshotFormatError(ValueError):
    """A snapshot or store file is malformed; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MessageFormatError(ValueError):
    """A message-log line could not be parsed."""

    def __init__(self, message: str, line_no: int | None = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(where + message)
        self.line_no = line_no
