"""Residual vector quantization over codec frontend frames.

Level 1 quantizes the frames themselves; every further level quantizes what
the previous levels left over. Nearest-centroid search is an exact argmin over
squared Euclidean distances, ties going to the lowest index.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from app.core.embedder import LOG_FLOOR, FeatureMatrix, frame_features, synthesize_waveform
from app.core.errors import CodebookError
from app.ingestion.records import Waveform

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"RVQ1"
CODEC_MAGIC = b"CODX"
SEARCH_CHUNK = 4096


@dataclass
class RvqCodebooks:
    centroids: np.ndarray  # (L, K, D)
    iterations: List[int] = field(default_factory=list)
    distortion: List[float] = field(default_factory=list)
    digest: str = ""

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 3 or self.centroids.shape[0] < 1:
            raise CodebookError("centroids must be an L x K x D array with L >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise CodebookError("codebook contains non-finite centroids")

    @property
    def levels(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def size(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[2])


@dataclass
class CodecMatrix:
    tokens: np.ndarray  # (T, L)
    codebook_size: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise CodebookError("codec tokens must be a T x L matrix")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def levels(self) -> int:
        return int(self.tokens.shape[1])

    def frames(self, start: int, stop: int) -> "CodecMatrix":
        return CodecMatrix(self.tokens[start:stop], self.codebook_size)


def nearest(x: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid for every row of x."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for start in range(0, len(x), SEARCH_CHUNK):
        d = cdist(x[start:start + SEARCH_CHUNK], centroids, "sqeuclidean")
        idx = np.argmin(d, axis=1)
        labels[start:start + SEARCH_CHUNK] = idx
        dist[start:start + SEARCH_CHUNK] = d[np.arange(len(idx)), idx]
    return labels, dist


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(len(x))]
    d2 = cdist(x, centroids[:1], "sqeuclidean")[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(len(x), p=d2 / total)
        else:
            pick = rng.integers(len(x))
        centroids[j] = x[pick]
        d2 = np.minimum(d2, cdist(x, centroids[j:j + 1], "sqeuclidean")[:, 0])
    return centroids


def _update(x: np.ndarray, labels: np.ndarray, dist: np.ndarray,
            centroids: np.ndarray) -> np.ndarray:
    k = len(centroids)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    updated = centroids.copy()
    filled = counts > 0
    updated[filled] = sums[filled] / counts[filled, None]
    # empty clusters take the point currently farthest from its centroid
    dist = dist.copy()
    for j in np.flatnonzero(~filled):
        far = int(np.argmax(dist))
        if dist[far] <= 0:
            break
        updated[j] = x[far]
        dist[far] = 0.0
    return updated


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = 100,
          tol: float = 1e-5) -> Tuple[np.ndarray, int]:
    """Lloyd iterations until the relative distortion improvement drops below tol."""
    previous = None
    iteration = 0
    for iteration in range(1, max_iter + 1):
        labels, dist = nearest(x, centroids)
        distortion = float(dist.mean())
        if previous is not None and previous - distortion <= tol * previous:
            break
        previous = distortion
        centroids = _update(x, labels, dist, centroids)
    return centroids, iteration


def _stack(corpus: Sequence[FeatureMatrix]) -> np.ndarray:
    if not corpus:
        raise CodebookError("empty feature corpus")
    dims = {f.dim for f in corpus}
    if len(dims) != 1:
        raise CodebookError(f"feature matrices disagree on dimension: {sorted(dims)}")
    return np.concatenate([f.frames for f in corpus], axis=0)


def _as_stored(centroids: np.ndarray) -> np.ndarray:
    """Centroids at the float32 precision the codebook file keeps."""
    return centroids.astype(np.float32).astype(np.float64)


def train_rvq(corpus: Sequence[FeatureMatrix], levels: int = 4, codebook_size: int = 256,
              seed: int = 0, max_iter: int = 100, tol: float = 1e-5) -> RvqCodebooks:
    """Fit one k-means codebook per level on the residuals of the levels before it."""
    if levels < 1:
        raise CodebookError("levels must be at least 1")
    x = _stack(corpus)
    if len(x) < codebook_size:
        raise CodebookError(
            f"corpus has {len(x)} frames but codebook_size={codebook_size}; "
            "use a smaller codebook size or more audio")
    distinct = len(np.unique(x, axis=0))
    if distinct < codebook_size:
        logger.warning("only %d distinct frames for %d centroids; codebook will hold duplicates",
                       distinct, codebook_size)

    residual = x.copy()
    centroids, iterations, distortion = [], [], []
    for level in range(levels):
        rng = np.random.default_rng([seed, level])
        init = _kmeans_plus_plus(residual, codebook_size, rng)
        fitted, n_iter = lloyd(residual, init, max_iter, tol)
        fitted = _as_stored(fitted)
        labels, _ = nearest(residual, fitted)
        residual = residual - fitted[labels]
        centroids.append(fitted)
        iterations.append(n_iter)
        distortion.append(float(np.mean(np.sum(residual ** 2, axis=1))))
        logger.info("rvq level %d: %d iterations, distortion %.6f",
                    level + 1, n_iter, distortion[-1])
    return RvqCodebooks(np.stack(centroids), iterations, distortion)


def refine_rvq(cb: RvqCodebooks, crops: Sequence[FeatureMatrix], iterations: int = 5) -> RvqCodebooks:
    """Continue Lloyd iterations from the current codebooks on a set of crops."""
    residual = _stack(crops).copy()
    centroids, n_iters, distortion = [], [], []
    for level in range(cb.levels):
        fitted, n_iter = lloyd(residual, cb.centroids[level], iterations, tol=0.0)
        fitted = _as_stored(fitted)
        labels, _ = nearest(residual, fitted)
        residual = residual - fitted[labels]
        centroids.append(fitted)
        n_iters.append(cb.iterations[level] + n_iter if level < len(cb.iterations) else n_iter)
        distortion.append(float(np.mean(np.sum(residual ** 2, axis=1))))
    return RvqCodebooks(np.stack(centroids), n_iters, distortion, cb.digest)


def random_crops(corpus: Sequence[FeatureMatrix], crop_frames: int,
                 rng: np.random.Generator) -> List[FeatureMatrix]:
    """One random crop of crop_frames frames per matrix (whole matrix if shorter)."""
    crops = []
    for f in corpus:
        if len(f) <= crop_frames:
            crops.append(f)
            continue
        start = int(rng.integers(0, len(f) - crop_frames + 1))
        crops.append(FeatureMatrix(f.frames[start:start + crop_frames]))
    return crops


def rvq_encode(f: FeatureMatrix, cb: RvqCodebooks) -> CodecMatrix:
    if f.dim != cb.dim:
        raise CodebookError(f"feature dimension {f.dim} does not match codebook dimension {cb.dim}")
    residual = f.frames.copy()
    tokens = np.empty((len(f), cb.levels), dtype=np.int64)
    for level in range(cb.levels):
        labels, _ = nearest(residual, cb.centroids[level])
        tokens[:, level] = labels
        residual = residual - cb.centroids[level][labels]
    return CodecMatrix(tokens, cb.size)


def silence_codes(cb: RvqCodebooks) -> np.ndarray:
    """Codes of one frame sitting on the log floor, one per level."""
    return rvq_encode(FeatureMatrix(np.full((1, cb.dim), LOG_FLOOR)), cb).tokens[0]


def rvq_decode(c: CodecMatrix, cb: RvqCodebooks) -> FeatureMatrix:
    if c.levels > cb.levels:
        raise CodebookError(f"codec matrix has {c.levels} levels, codebooks only {cb.levels}")
    bad = np.argwhere((c.tokens < 0) | (c.tokens >= cb.size))
    if len(bad):
        frame, level = bad[0]
        raise CodebookError(
            f"token {c.tokens[frame, level]} out of range [0, {cb.size}) "
            f"at frame {frame}, level {level + 1}")
    frames = np.zeros((len(c), cb.dim))
    for level in range(c.levels):
        frames += cb.centroids[level][c.tokens[:, level]]
    return FeatureMatrix(frames)


def reconstruct(w: Waveform, cb: RvqCodebooks, iterations: int = 32) -> Waveform:
    """Audio through the full codec: features, tokens, features, Griffin-Lim."""
    codes = rvq_encode(frame_features(w, cb.dim), cb)
    return synthesize_waveform(rvq_decode(codes, cb), iterations)


def save_codebooks(cb: RvqCodebooks, file_path: str):
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    with open(file_path, "wb") as f:
        f.write(CODEBOOK_MAGIC + struct.pack("<3I", cb.levels, cb.size, cb.dim))
        f.write(cb.centroids.astype("<f4").tobytes())
    with open(file_path + ".json", "w") as f:
        json.dump({"digest": cb.digest, "iterations": cb.iterations,
                   "distortion": cb.distortion}, f, indent=2)


def load_codebooks(file_path: str) -> RvqCodebooks:
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Codebook file not found: {file_path}")
    with open(file_path, "rb") as f:
        data = f.read()
    if data[:4] != CODEBOOK_MAGIC:
        raise CodebookError(f"{file_path} is not an RVQ1 codebook file")
    levels, size, dim = struct.unpack("<3I", data[4:16])
    centroids = np.frombuffer(data[16:], dtype="<f4")
    if centroids.size != levels * size * dim:
        raise CodebookError(f"{file_path} is truncated")
    meta = {}
    if os.path.exists(file_path + ".json"):
        with open(file_path + ".json") as f:
            meta = json.load(f)
    return RvqCodebooks(centroids.reshape(levels, size, dim).astype(np.float64),
                        meta.get("iterations", []), meta.get("distortion", []),
                        meta.get("digest", ""))


def codec_to_bytes(c: CodecMatrix) -> bytes:
    header = CODEC_MAGIC + struct.pack("<3I", len(c), c.levels, c.codebook_size)
    return header + c.tokens.astype("<i4").tobytes()


def codec_from_bytes(data: bytes) -> CodecMatrix:
    if data[:4] != CODEC_MAGIC:
        raise CodebookError("not a CODX codec token file")
    t, levels, size = struct.unpack("<3I", data[4:16])
    tokens = np.frombuffer(data[16:16 + 4 * t * levels], dtype="<i4")
    if tokens.size != t * levels:
        raise CodebookError("codec token file truncated")
    return CodecMatrix(tokens.reshape(t, levels).astype(np.int64), size)


def save_codec(c: CodecMatrix, file_path: str):
    with open(file_path, "wb") as f:
        f.write(codec_to_bytes(c))


def load_codec(file_path: str) -> CodecMatrix:
    with open(file_path, "rb") as f:
        return codec_from_bytes(f.read())
