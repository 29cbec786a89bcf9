"""Toy piano corpus: random performances rendered with decaying additive sines.

Used by the tests and smoke runs in place of a licensed recording dataset.
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.ingestion.load import save_wav
from app.ingestion.records import SAMPLE_RATE, Note, NoteSequence, Waveform
from app.ingestion.smf import write_smf

logger = logging.getLogger(__name__)

HARMONICS = (1.0, 0.5, 0.25, 0.125)
DECAY_PER_S = 3.0
RELEASE_S = 0.05


def random_performance(rng: np.random.Generator, seconds: float, notes_per_second: float = 4.0,
                       pitch_range: Tuple[int, int] = (48, 84), source_id: str = "") -> NoteSequence:
    count = max(1, int(seconds * notes_per_second))
    onsets = np.sort(rng.uniform(0.0, max(seconds - 0.5, 0.1), count))
    notes = []
    released: Dict[int, float] = {}
    for onset in np.round(onsets, 3):
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        velocity = int(rng.integers(40, 110))
        duration = float(np.round(rng.uniform(0.1, 0.8), 3))
        # one sounding note per key
        if onset < released.get(pitch, -1.0) + 0.01:
            continue
        notes.append(Note(pitch, velocity, float(onset), duration))
        released[pitch] = onset + duration
    return NoteSequence(notes, source_id)


def render(ns: NoteSequence, seconds: Optional[float] = None,
           sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Additive-sine rendering; the result has peak amplitude 0.5 unless silent."""
    total = max(seconds or 0.0, ns.end + RELEASE_S)
    y = np.zeros(int(round(total * sample_rate)))
    for note in ns:
        start = int(round(note.onset * sample_rate))
        length = int(round((note.duration + RELEASE_S) * sample_rate))
        t = np.arange(min(length, len(y) - start)) / sample_rate
        freq = 440.0 * 2 ** ((note.pitch - 69) / 12)
        envelope = np.exp(-DECAY_PER_S * t)
        envelope[t > note.duration] *= np.exp(-(t[t > note.duration] - note.duration) / RELEASE_S * 5)
        tone = sum(a * np.sin(2 * np.pi * freq * (h + 1) * t)
                   for h, a in enumerate(HARMONICS) if freq * (h + 1) < sample_rate / 2)
        y[start:start + len(t)] += note.velocity / 127 * envelope * tone
    peak = np.abs(y).max() if len(y) else 0.0
    if peak > 0:
        y *= 0.5 / peak
    return Waveform(y, sample_rate)


def write_corpus(midi_dir: str, audio_dir: str, count: int = 3, seconds: float = 20.0,
                 seed: int = 0) -> List[str]:
    """Write count aligned MIDI/WAV pairs named piece_000 ... and return their ids."""
    os.makedirs(midi_dir, exist_ok=True)
    os.makedirs(audio_dir, exist_ok=True)
    ids = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        source_id = f"piece_{i:03d}"
        perf = random_performance(rng, seconds, source_id=source_id)
        with open(os.path.join(midi_dir, source_id + ".mid"), "wb") as f:
            f.write(write_smf(perf))
        save_wav(render(perf, seconds), os.path.join(audio_dir, source_id + ".wav"))
        ids.append(source_id)
    logger.info("wrote %d toy performances of %.1f s to %s and %s", count, seconds, midi_dir, audio_dir)
    return ids
