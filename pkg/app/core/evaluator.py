"""Objective evaluation: Frechet audio distance over codec frontend frames,
log-mel spectrogram NRMSE and chroma MAE, with 95% confidence intervals."""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache, partial
from typing import Dict, List, Optional, Sequence

import librosa
import numpy as np
import pandas as pd

from app.core.embedder import LOG_FLOOR, N_FFT, FeatureMatrix, frame_features, magnitude_spectrogram
from app.core.quantizer import RvqCodebooks, reconstruct
from app.ingestion.load import load_audio
from app.ingestion.records import PITCH_MAX, PITCH_MIN, SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

RANGE_GUARD = 1e-8
DEFAULT_WORKERS = 4
CI_Z = 1.96


class Reference(str, Enum):
    GROUND_TRUTH = "gt"
    RECONSTRUCTION = "rc"


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


@dataclass
class MetricReport:
    fad: float
    spec_nrmse: float
    spec_nrmse_ci95: float
    chroma_mae: float
    chroma_mae_ci95: float
    reference: str = Reference.GROUND_TRUTH.value
    per_clip: List[Dict] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.per_clip, columns=["clip_id", "spec_nrmse", "chroma_mae"])

    def summary(self) -> Dict:
        data = asdict(self)
        data.pop("per_clip")
        data["clips"] = len(self.per_clip)
        return data


def embedding_stats(features: Sequence[FeatureMatrix]) -> EmbeddingStats:
    """Mean and unbiased covariance over all frames pooled across clips."""
    if not features:
        raise ValueError("No feature matrices given")
    x = np.concatenate([f.frames for f in features], axis=0)
    if len(x) < 2:
        raise ValueError(f"Need at least 2 frames for embedding statistics, got {len(x)}")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return EmbeddingStats(x.mean(axis=0), (cov + cov.T) / 2, len(x))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"Embedding dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    for stats in (a, b):
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.covariance))):
            raise ValueError("Embedding statistics contain non-finite values")
    # Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), which is symmetric PSD
    root_a = _psd_sqrt(a.covariance)
    product = root_a @ b.covariance @ root_a
    eig = np.maximum(np.linalg.eigvalsh((product + product.T) / 2), 0.0)
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * np.sqrt(eig).sum()
    return float(max(value, 0.0))


def _match_frames(gen: np.ndarray, length: int, fill: float) -> np.ndarray:
    """Trim or pad (T, D) gen frames to length rows."""
    if len(gen) >= length:
        return gen[:length]
    pad = np.full((length - len(gen), gen.shape[1]), fill)
    return np.concatenate([gen, pad])


def spectrogram_nrmse(ref: Waveform, gen: Waveform) -> float:
    """RMSE between log-mel spectrograms over the reference's value range."""
    r = frame_features(ref).frames
    g = _match_frames(frame_features(gen).frames, len(r), LOG_FLOOR)
    rmse = float(np.sqrt(np.mean((r - g) ** 2)))
    span = float(r.max() - r.min())
    if span < RANGE_GUARD:
        return 0.0 if rmse < RANGE_GUARD else rmse / RANGE_GUARD
    return rmse / span


@lru_cache(maxsize=1)
def pitch_class_map() -> np.ndarray:
    """Pitch class (0 = C) of every STFT bin, -1 outside the piano range."""
    freqs = librosa.fft_frequencies(sr=SAMPLE_RATE, n_fft=N_FFT)
    classes = np.full(len(freqs), -1, dtype=np.int64)
    with np.errstate(divide="ignore"):
        midi = np.rint(librosa.hz_to_midi(np.maximum(freqs[1:], 1e-6))).astype(np.int64)
    piano = (midi >= PITCH_MIN) & (midi <= PITCH_MAX)
    classes[1:][piano] = midi[piano] % 12
    return classes


def chroma(w: Waveform) -> np.ndarray:
    """(T, 12) pitch-class energy per frame, each row L1-normalized."""
    power = magnitude_spectrogram(w) ** 2
    classes = pitch_class_map()
    energy = np.zeros((12, power.shape[1]))
    keep = classes >= 0
    np.add.at(energy, classes[keep], power[keep])
    total = energy.sum(axis=0)
    out = np.full_like(energy, 1.0 / 12)
    nonzero = total > 0
    out[:, nonzero] = energy[:, nonzero] / total[nonzero]
    return out.T


def chroma_mae(ref: Waveform, gen: Waveform) -> float:
    r = chroma(ref)
    g = _match_frames(chroma(gen), len(r), 1.0 / 12)
    return float(np.mean(np.abs(r - g)))


def confidence_half_width(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(CI_Z * values.std(ddof=1) / np.sqrt(len(values)))


def paired_files(ref_dir: str, gen_dir: str) -> List[str]:
    """WAV file names present in both directories, sorted."""
    listing = {}
    for d in (ref_dir, gen_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"Audio directory not found: {d}")
        listing[d] = {n for n in os.listdir(d) if n.lower().endswith(".wav")}
    ref_names, gen_names = listing[ref_dir], listing[gen_dir]
    unmatched = sorted(ref_names ^ gen_names)
    if unmatched:
        logger.warning("%d files have no counterpart and are skipped: %s",
                       len(unmatched), ", ".join(unmatched[:5]))
    common = sorted(ref_names & gen_names)
    if not common:
        raise ValueError(f"No WAV files with matching names in {ref_dir} and {gen_dir}")
    return common


def _clip_row(clip_id: str, ref: Waveform, gen: Waveform) -> Dict:
    return {"clip_id": clip_id, "spec_nrmse": spectrogram_nrmse(ref, gen), "chroma_mae": chroma_mae(ref, gen)}


def evaluate_pairs(refs: Sequence[Waveform], gens: Sequence[Waveform], clip_ids: Sequence[str],
                   reference: Reference = Reference.GROUND_TRUTH,
                   workers: int = DEFAULT_WORKERS) -> MetricReport:
    """Per-clip scores are computed on a thread pool; rows keep the input order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(_clip_row, clip_ids, refs, gens))
    fad = frechet_distance(embedding_stats([frame_features(r) for r in refs]),
                           embedding_stats([frame_features(g) for g in gens]))
    nrmse = [row["spec_nrmse"] for row in rows]
    mae = [row["chroma_mae"] for row in rows]
    return MetricReport(
        fad=fad,
        spec_nrmse=float(np.mean(nrmse)),
        spec_nrmse_ci95=confidence_half_width(nrmse),
        chroma_mae=float(np.mean(mae)),
        chroma_mae_ci95=confidence_half_width(mae),
        reference=Reference(reference).value,
        per_clip=rows,
    )


def evaluate_corpus(ref_dir: str, gen_dir: str, reference: Reference = Reference.GROUND_TRUTH,
                    codebooks: Optional[RvqCodebooks] = None, workers: int = DEFAULT_WORKERS) -> MetricReport:
    """Compare generated WAVs against references paired by file name.

    With reference="rc" every reference clip is first passed through the codec,
    so the scores measure distance to what the codec itself can express.
    """
    reference = Reference(reference)
    if reference is Reference.RECONSTRUCTION and codebooks is None:
        raise ValueError("reference 'rc' needs trained codebooks")
    names = paired_files(ref_dir, gen_dir)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        refs = list(pool.map(load_audio, [os.path.join(ref_dir, n) for n in names]))
        if reference is Reference.RECONSTRUCTION:
            refs = list(pool.map(partial(reconstruct, cb=codebooks), refs))
        gens = list(pool.map(load_audio, [os.path.join(gen_dir, n) for n in names]))
    report = evaluate_pairs(refs, gens, [os.path.splitext(n)[0] for n in names], reference, workers)
    logger.info("evaluated %d clips: fad %.4f, nrmse %.4f, chroma mae %.4f",
                len(names), report.fad, report.spec_nrmse, report.chroma_mae)
    return report


def save_report(report: MetricReport, out_dir: str, config_digest: str = "") -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": os.path.join(out_dir, "metrics.json"),
             "csv": os.path.join(out_dir, "metrics.csv")}
    with open(paths["json"], "w") as f:
        json.dump({**report.summary(), "config_digest": config_digest,
                   "per_clip": report.per_clip}, f, indent=2)
    report.frame().to_csv(paths["csv"], index=False)
    return paths
