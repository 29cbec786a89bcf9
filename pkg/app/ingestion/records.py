from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

SAMPLE_RATE = 32000
PITCH_MIN = 21
PITCH_MAX = 108
VELOCITY_MIN = 1
VELOCITY_MAX = 127


@dataclass(frozen=True)
class Note:
    pitch: int
    velocity: int
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class ParseReport:
    """Counts of events the SMF reader had to drop or repair."""

    out_of_range: int = 0
    unclosed: int = 0
    zero_length: int = 0
    overlapped: int = 0


@dataclass
class NoteSequence:
    """Piano notes in absolute seconds, sorted by onset then pitch.

    Durations are raw key-down durations; sustain pedal never extends them.
    """

    notes: Sequence[Note] = ()
    source_id: str = ""
    report: Optional[ParseReport] = None

    def __post_init__(self):
        for note in self.notes:
            if not PITCH_MIN <= note.pitch <= PITCH_MAX:
                raise ValueError(f"Pitch {note.pitch} outside {PITCH_MIN}-{PITCH_MAX}")
            if not VELOCITY_MIN <= note.velocity <= VELOCITY_MAX:
                raise ValueError(f"Velocity {note.velocity} outside 1-127")
            if note.onset < 0:
                raise ValueError(f"Negative onset {note.onset}")
            if not note.duration > 0:
                raise ValueError(f"Non-positive duration {note.duration} for pitch {note.pitch}")
        self.notes = tuple(sorted(self.notes, key=lambda n: (n.onset, n.pitch)))

    def __len__(self) -> int:
        return len(self.notes)

    def __iter__(self) -> Iterator[Note]:
        return iter(self.notes)

    @property
    def end(self) -> float:
        """Latest note offset, 0.0 for an empty sequence."""
        return max((n.offset for n in self.notes), default=0.0)

    def shifted(self, seconds: float) -> "NoteSequence":
        moved = [Note(n.pitch, n.velocity, n.onset + seconds, n.duration) for n in self.notes]
        return NoteSequence(moved, self.source_id)

    def total_duration(self) -> float:
        return float(sum(n.duration for n in self.notes))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("Waveform samples must be mono (1-D)")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate

    def slice_seconds(self, start: float, stop: float) -> "Waveform":
        a = int(round(start * self.sample_rate))
        b = int(round(stop * self.sample_rate))
        return Waveform(self.samples[a:b].copy(), self.sample_rate)


@dataclass
class AlignedClip:
    midi: NoteSequence
    audio: Waveform
    clip_start: float
    clip_length: float
    clip_index: int = 0
    source_id: str = ""
    notes_dropped: int = 0

    @property
    def clip_id(self) -> str:
        return f"{self.source_id}_{self.clip_index:04d}"


@dataclass
class ClipRecord:
    """One line of the JSON-lines clip manifest."""

    source_id: str
    clip_index: int
    clip_start: float
    clip_length: float
    midi_path: str
    audio_path: str
    split: str = "train"
    digest: str = ""
    config_digest: str = ""
    token_path: Optional[str] = None
    codec_path: Optional[str] = None

    @property
    def clip_id(self) -> str:
        return f"{self.source_id}_{self.clip_index:04d}"
