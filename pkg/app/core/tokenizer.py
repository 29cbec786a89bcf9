"""Octuple-style multi-stream MIDI tokens with inter-onset intervals.

Each note becomes one row of six tokens (pitch, velocity, duration, IOI,
position, bar); the sequence is framed by a BOS row and an EOS row, giving a
6 x N integer array. The four special tokens sit at the top of every stream.
"""

import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.errors import TokenStructureError
from app.ingestion.records import PITCH_MIN, Note, NoteSequence

STREAMS = ("pitch", "velocity", "duration", "ioi", "position", "bar")
MAGIC = b"OCT1"


class TokenizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pitch_bins: int = 88
    velocity_bins: int = 64
    duration_bins: int = 1152
    ioi_bins: int = 768
    positions_per_bar: int = 384
    bar_bins: int = 16
    duration_tick: float = 0.01
    ioi_tick: float = 0.01
    pseudo_bar_length: float = 4.0
    n_special: int = 4

    @property
    def payload_sizes(self) -> Tuple[int, ...]:
        return (self.pitch_bins, self.velocity_bins, self.duration_bins,
                self.ioi_bins, self.positions_per_bar, self.bar_bins)

    @property
    def stream_sizes(self) -> Tuple[int, ...]:
        return tuple(size + self.n_special for size in self.payload_sizes)

    # special tokens, per stream: PAD, BOS, EOS, MASK directly above the payload
    def pad(self) -> np.ndarray:
        return np.array(self.payload_sizes, dtype=np.int64)

    def bos(self) -> np.ndarray:
        return self.pad() + 1

    def eos(self) -> np.ndarray:
        return self.pad() + 2

    def mask(self) -> np.ndarray:
        return self.pad() + 3


class PromptMode(str, Enum):
    HARD_CUT = "hard-cut"
    NOTE_BOUNDARY = "note-boundary"


@dataclass
class OctupleSequence:
    tokens: np.ndarray  # (6, N)
    vocab_sizes: Tuple[int, ...]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(STREAMS):
            raise TokenStructureError(f"expected a 6 x N token array, got {self.tokens.shape}")
        if len(self.vocab_sizes) != len(STREAMS):
            raise TokenStructureError("expected six vocab sizes")
        limits = np.array(self.vocab_sizes)[:, None]
        bad = np.argwhere((self.tokens < 0) | (self.tokens >= limits))
        if len(bad):
            stream, row = bad[0]
            raise TokenStructureError(
                f"{STREAMS[stream]} token {self.tokens[stream, row]} outside "
                f"[0, {self.vocab_sizes[stream]})", int(row))

    def __len__(self) -> int:
        return int(self.tokens.shape[1])

    def stream(self, name: str) -> np.ndarray:
        return self.tokens[STREAMS.index(name)]

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack("<7I", len(self), *self.vocab_sizes)
        return header + self.tokens.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OctupleSequence":
        if data[:4] != MAGIC:
            raise TokenStructureError("not an OCT1 token file")
        n, *sizes = struct.unpack("<7I", data[4:32])
        body = np.frombuffer(data[32:32 + 24 * n], dtype="<i4")
        if body.size != 6 * n:
            raise TokenStructureError(f"token file truncated: expected {6 * n} values")
        return cls(body.reshape(6, n).astype(np.int64), tuple(sizes))

    def to_json(self) -> Dict:
        return {
            "length": len(self),
            "vocab_sizes": dict(zip(STREAMS, self.vocab_sizes)),
            "streams": {name: self.tokens[i].tolist() for i, name in enumerate(STREAMS)},
        }


def tokenize(ns: NoteSequence, cfg: TokenizerConfig = TokenizerConfig()) -> OctupleSequence:
    """One token row per note, plus BOS and EOS rows."""
    n = len(ns)
    rows = np.empty((6, n + 2), dtype=np.int64)
    rows[:, 0] = cfg.bos()
    rows[:, -1] = cfg.eos()
    if n:
        pitch = np.array([note.pitch for note in ns], dtype=np.int64)
        velocity = np.array([note.velocity for note in ns], dtype=np.int64)
        onset = np.array([note.onset for note in ns])
        duration = np.array([note.duration for note in ns])

        # IOI as differences of quantized onsets keeps cumulative decoding exact
        onset_ticks = np.rint(onset / cfg.ioi_tick).astype(np.int64)
        ioi = np.diff(onset_ticks, prepend=0)

        bar_len = cfg.pseudo_bar_length
        bar = np.floor(onset / bar_len).astype(np.int64)
        position = np.rint((onset - bar * bar_len) / bar_len * cfg.positions_per_bar)
        position = position.astype(np.int64)
        wrapped = position >= cfg.positions_per_bar
        position[wrapped] = 0
        bar[wrapped] += 1

        rows[0, 1:-1] = pitch - PITCH_MIN
        rows[1, 1:-1] = (velocity - 1) // 2
        rows[2, 1:-1] = np.clip(np.rint(duration / cfg.duration_tick), 0, cfg.duration_bins - 1)
        rows[3, 1:-1] = np.clip(ioi, 0, cfg.ioi_bins - 1)
        rows[4, 1:-1] = position
        rows[5, 1:-1] = np.clip(bar, 0, cfg.bar_bins - 1)
    return OctupleSequence(rows, cfg.stream_sizes)


def detokenize(seq: OctupleSequence, cfg: TokenizerConfig = TokenizerConfig(),
               source_id: str = "") -> NoteSequence:
    tokens = seq.tokens
    if len(seq) < 2 or not np.array_equal(tokens[:, 0], cfg.bos()):
        raise TokenStructureError("sequence does not start with a BOS row", 0)
    if not np.array_equal(tokens[:, -1], cfg.eos()):
        raise TokenStructureError("sequence does not end with an EOS row", len(seq) - 1)
    body = tokens[:, 1:-1]
    special = np.argwhere(body >= cfg.pad()[:, None])
    if len(special):
        stream, row = special[0]
        raise TokenStructureError(
            f"special token in {STREAMS[stream]} stream of an interior row", int(row) + 1)

    onsets = np.cumsum(body[3]) * cfg.ioi_tick
    durations = body[2] * cfg.duration_tick
    durations[body[2] == 0] = cfg.duration_tick / 2
    durations[body[2] == cfg.duration_bins - 1] = cfg.duration_bins * cfg.duration_tick
    notes = [
        Note(int(p) + PITCH_MIN, min(int(v) * 2 + 1, 127), float(o), float(d))
        for p, v, o, d in zip(body[0], body[1], onsets, durations)
    ]
    return NoteSequence(notes, source_id)


def prompt_cut(prompt: NoteSequence, prompt_seconds: float,
               mode: PromptMode = PromptMode.HARD_CUT) -> Tuple[NoteSequence, float]:
    """Restrict a prompt to its first prompt_seconds.

    Returns the truncated notes and the effective prompt length. In
    note-boundary mode the cut moves back to the last note offset that fits.
    """
    if prompt_seconds <= 0:
        raise ValueError("prompt_seconds must be positive")
    if len(prompt) == 0:
        return NoteSequence((), prompt.source_id), 0.0
    cut = prompt_seconds
    if PromptMode(mode) is PromptMode.NOTE_BOUNDARY:
        cut = max((n.offset for n in prompt if n.offset <= prompt_seconds), default=0.0)
    notes = [Note(n.pitch, n.velocity, n.onset, min(n.duration, cut - n.onset))
             for n in prompt if n.onset < cut]
    return NoteSequence(notes, prompt.source_id), cut


def concat_prompt(prompt_midi: NoteSequence, target_midi: NoteSequence,
                  prompt_seconds: float = 3.0, mode: PromptMode = PromptMode.HARD_CUT,
                  cfg: TokenizerConfig = TokenizerConfig()) -> OctupleSequence:
    """Tokenize the cut prompt followed by the target, shifted past the prompt."""
    if len(target_midi) == 0:
        raise ValueError("Target MIDI is empty: nothing to synthesize.")
    head, effective = prompt_cut(prompt_midi, prompt_seconds, mode)
    merged: List[Note] = list(head) + list(target_midi.shifted(effective))
    return tokenize(NoteSequence(merged, target_midi.source_id), cfg)


def save_tokens(seq: OctupleSequence, file_path: str, debug_json: bool = False):
    with open(file_path, "wb") as f:
        f.write(seq.to_bytes())
    if debug_json:
        with open(file_path + ".json", "w") as f:
            json.dump(seq.to_json(), f)


def load_tokens(file_path: str) -> OctupleSequence:
    with open(file_path, "rb") as f:
        return OctupleSequence.from_bytes(f.read())
