import io
import os

import mido
import numpy as np
import pytest

from app.core.model import ModelConfig
from app.ingestion.records import SAMPLE_RATE, Note, NoteSequence, Waveform

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_PATH = os.path.join(ROOT, "config", "config.yaml")


def smf_bytes(messages, ticks_per_beat=480, midi_type=0, extra_tracks=()):
    """SMF bytes from (message, delta) lists, one list per track."""
    midi = mido.MidiFile(type=midi_type, ticks_per_beat=ticks_per_beat)
    for track_messages in (messages, *extra_tracks):
        track = mido.MidiTrack()
        track.extend(track_messages)
        midi.tracks.append(track)
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def sine(freq, seconds, amplitude=0.5):
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), SAMPLE_RATE)


def random_notes(rng, n, max_onset=20.0, max_duration=11.0):
    notes = [
        Note(int(rng.integers(21, 109)), int(rng.integers(1, 128)),
             float(rng.uniform(0, max_onset)), float(rng.uniform(0.006, max_duration)))
        for _ in range(n)
    ]
    return NoteSequence(notes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scale():
    """C major scale, quarter notes at 120 BPM."""
    pitches = [60, 62, 64, 65, 67, 69, 71, 72]
    return NoteSequence([Note(p, 64 + i, i * 0.5, 0.45) for i, p in enumerate(pitches)], "scale")


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(layers=2, heads=2, hidden_dim=16, ff_dim=32, stream_dims=(4, 4, 4, 4, 4, 4),
                       codebook_size=16, levels=3, max_seq_len=512, seed=0)
