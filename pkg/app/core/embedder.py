"""Spectral codec frontend: log-mel frames at 50 Hz and their inversion.

These frames are what the residual quantizer encodes and also the embeddings
used for Frechet audio distance.
"""

from dataclasses import dataclass
from functools import lru_cache

import librosa
import numpy as np

from app.ingestion.records import SAMPLE_RATE, Waveform

HOP_LENGTH = 640  # 32000 / 640 = 50 frames per second
N_FFT = 2048
N_MELS = 64
FRAME_RATE = SAMPLE_RATE // HOP_LENGTH
LOG_FLOOR = -10.0


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    frame_rate: int = FRAME_RATE
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("FeatureMatrix frames must be a T x D matrix")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def seconds(self) -> float:
        return len(self) / self.frame_rate


@lru_cache(maxsize=8)
def mel_basis(n_mels: int = N_MELS) -> np.ndarray:
    return librosa.filters.mel(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=n_mels,
                               fmin=0.0, fmax=SAMPLE_RATE / 2)


@lru_cache(maxsize=8)
def mel_inverse(n_mels: int = N_MELS) -> np.ndarray:
    return np.linalg.pinv(mel_basis(n_mels))


def frame_count(n_samples: int) -> int:
    return max(1, int(np.floor(n_samples / HOP_LENGTH + 0.5)))


def magnitude_spectrogram(w: Waveform) -> np.ndarray:
    """|STFT| with 50 Hz hop, trimmed to frame_count(len(w)) frames: (1 + N_FFT/2, T)."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"Expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
    y = w.samples
    if len(y) < N_FFT:
        y = np.pad(y, (0, N_FFT - len(y)))
    spec = librosa.stft(y, n_fft=N_FFT, hop_length=HOP_LENGTH, win_length=N_FFT,
                        window="hann", center=True, pad_mode="constant")
    return np.abs(spec[:, :frame_count(len(w))])


def frame_features(w: Waveform, n_mels: int = N_MELS) -> FeatureMatrix:
    mel = mel_basis(n_mels) @ magnitude_spectrogram(w)
    logmel = np.maximum(np.log10(np.maximum(mel, 1e-30)), LOG_FLOOR)
    return FeatureMatrix(logmel.T)


def synthesize_waveform(f: FeatureMatrix, iterations: int = 32) -> Waveform:
    """Mel pseudo-inverse to linear magnitude, then Griffin-Lim from zero phase."""
    logmel = f.frames.T
    mel = np.where(logmel <= LOG_FLOOR, 0.0, np.power(10.0, logmel))
    magnitude = np.maximum(mel_inverse(f.dim) @ mel, 0.0)
    if magnitude.shape[1] < 2:
        magnitude = np.pad(magnitude, ((0, 0), (0, 2 - magnitude.shape[1])))
    # let griffinlim keep its natural (T - 1) * hop length so its internal STFT
    # frame count matches; the last hop is padded afterwards
    y = librosa.griffinlim(magnitude, n_iter=iterations, hop_length=HOP_LENGTH,
                           win_length=N_FFT, n_fft=N_FFT, window="hann", center=True,
                           pad_mode="constant", init=None)
    y = librosa.util.fix_length(y, size=len(f) * HOP_LENGTH)
    return Waveform(np.clip(y, -1.0, 1.0), SAMPLE_RATE)
