import io
import os
from math import gcd
from typing import Union

import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from app.core.errors import AudioFormatError
from app.ingestion.records import SAMPLE_RATE, NoteSequence, Waveform
from app.ingestion.smf import parse_smf

SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")


def load_content(file_path: str) -> Union[NoteSequence, Waveform]:
    source_id = os.path.splitext(os.path.basename(file_path))[0]
    if file_path.endswith((".mid", ".midi")):
        return load_midi(file_path, source_id)
    elif file_path.endswith(".wav"):
        return load_audio(file_path)
    else:
        raise ValueError("Unsupported file type. Only .mid/.midi and .wav are supported.")


def load_midi(file_path: str, source_id: str = "") -> NoteSequence:
    with open(file_path, "rb") as f:
        return parse_smf(f.read(), source_id)


def load_audio(file_path: str) -> Waveform:
    with open(file_path, "rb") as f:
        return ingest_audio(f.read())


def ingest_audio(data: bytes) -> Waveform:
    """Decode WAV bytes to 32 kHz mono in [-1, 1]."""
    try:
        with sf.SoundFile(io.BytesIO(data)) as f:
            if f.format not in ("WAV", "WAVEX"):
                raise AudioFormatError(f.format)
            if f.subtype not in SUPPORTED_SUBTYPES:
                raise AudioFormatError(f.subtype)
            rate = f.samplerate
            frames = f.read(dtype="float64", always_2d=True)
    except sf.LibsndfileError as e:
        raise ValueError(f"Could not decode WAV data: {e}") from e

    mono = frames.mean(axis=1)
    if rate != SAMPLE_RATE:
        g = gcd(SAMPLE_RATE, rate)
        mono = resample_poly(mono, SAMPLE_RATE // g, rate // g)
    return Waveform(np.clip(mono, -1.0, 1.0), SAMPLE_RATE)


def write_wav(w: Waveform) -> bytes:
    """32-bit float WAV, so ingest_audio(write_wav(w)) is lossless."""
    buffer = io.BytesIO()
    sf.write(buffer, w.samples.astype(np.float32), w.sample_rate, format="WAV", subtype="FLOAT")
    return buffer.getvalue()


def save_wav(w: Waveform, file_path: str):
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    with open(file_path, "wb") as f:
        f.write(write_wav(w))
