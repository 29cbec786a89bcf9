"""Exceptions raised across the pipeline. Bad-input errors are ValueErrors so
callers can keep catching the builtin."""

from typing import Optional


class MidiParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class AudioFormatError(ValueError):
    def __init__(self, format_tag: str):
        super().__init__(
            f"Unsupported WAV encoding '{format_tag}'. Only PCM_16 and FLOAT are supported."
        )
        self.format_tag = format_tag


class TokenStructureError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class CodebookError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    def __init__(self, length: int, limit: int):
        super().__init__(
            f"Input of length {length} exceeds max_seq_len={limit}. "
            "Segment the performance into shorter clips."
        )
        self.length = length
        self.limit = limit


class NonFiniteLossError(RuntimeError):
    def __init__(self, sample_index: int, ar_loss: float, nar_loss: float):
        super().__init__(
            f"Non-finite loss for batch sample {sample_index}: "
            f"ar_loss={ar_loss}, nar_loss={nar_loss}"
        )
        self.sample_index = sample_index


class ConfigDigestError(ValueError):
    pass
