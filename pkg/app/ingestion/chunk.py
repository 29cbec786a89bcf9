import json
import logging
import os
from dataclasses import asdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.ingestion.records import AlignedClip, ClipRecord, Note, NoteSequence, Waveform

logger = logging.getLogger(__name__)

REMAINDER_MIN_S = 5.0
MIN_NOTE_S = 0.01


def clip_bounds(total: float, min_s: float, max_s: float, seed: int,
                remainder_min_s: float = REMAINDER_MIN_S) -> List[Tuple[float, float]]:
    """Cut [0, total] into clips with lengths drawn uniformly from [min_s, max_s].

    A final remainder shorter than min_s stays a clip of its own when it is at least
    remainder_min_s long and is merged into the previous clip otherwise.
    """
    if min_s > max_s:
        raise ValueError(f"min_s={min_s} must not exceed max_s={max_s}")
    rng = np.random.default_rng(seed)
    bounds: List[Tuple[float, float]] = []
    start = 0.0
    while total - start > 1e-9:
        length = float(rng.uniform(min_s, max_s))
        remaining = total - start
        if remaining <= length:
            if bounds and remaining < min_s and remaining < remainder_min_s:
                bounds[-1] = (bounds[-1][0], total)
            else:
                bounds.append((start, total))
            break
        bounds.append((start, start + length))
        start += length
    return bounds


def cut_notes(perf: NoteSequence, start: float, stop: float,
              min_note_s: float = MIN_NOTE_S) -> Tuple[NoteSequence, int]:
    """Notes sounding inside [start, stop), truncated there and rebased to start.

    Returns the clip notes and the number of fragments dropped for being
    shorter than min_note_s.
    """
    kept = []
    dropped = 0
    for note in perf:
        if note.onset >= stop or note.offset <= start:
            continue
        onset = max(note.onset, start) - start
        duration = min(note.offset, stop) - start - onset
        if duration < min_note_s or duration <= 0:
            dropped += 1
            continue
        kept.append(Note(note.pitch, note.velocity, onset, duration))
    return NoteSequence(kept, perf.source_id), dropped


def segment(perf: NoteSequence, audio: Waveform, min_s: float = 15.0, max_s: float = 20.0,
            seed: int = 0, min_note_s: float = MIN_NOTE_S,
            remainder_min_s: float = REMAINDER_MIN_S) -> List[AlignedClip]:
    """Cut an aligned performance into training clips.

    A note interrupted at a boundary is truncated there and its remainder
    continues at onset 0 of the next clip.
    """
    if len(perf) == 0:
        return []
    total = max(audio.seconds, perf.end)
    clips = []
    for index, (start, stop) in enumerate(clip_bounds(total, min_s, max_s, seed, remainder_min_s)):
        notes, dropped = cut_notes(perf, start, stop, min_note_s)
        clips.append(AlignedClip(
            midi=notes,
            audio=audio.slice_seconds(start, stop),
            clip_start=start,
            clip_length=stop - start,
            clip_index=index,
            source_id=perf.source_id,
            notes_dropped=dropped,
        ))
    n_dropped = sum(c.notes_dropped for c in clips)
    if n_dropped:
        logger.info("%s: dropped %d note fragments shorter than %.0f ms",
                    perf.source_id, n_dropped, min_note_s * 1000)
    return clips


def split_dataset(source_ids: Sequence[str], seed: int,
                  ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dict[str, str]:
    """Assign whole performances to train/validation/test."""
    ids = sorted(set(source_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(len(ids) * ratios[1])
    n_test = int(len(ids) * ratios[2])
    splits = {}
    for rank, i in enumerate(order):
        if rank < n_test:
            splits[ids[i]] = "test"
        elif rank < n_test + n_val:
            splits[ids[i]] = "validation"
        else:
            splits[ids[i]] = "train"
    return splits


def write_manifest(records: List[ClipRecord], file_path: str):
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    with open(file_path, "w") as f:
        for record in records:
            f.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def read_manifest(file_path: str) -> List[ClipRecord]:
    if not os.path.exists(file_path):
        return []
    with open(file_path) as f:
        return [ClipRecord(**json.loads(line)) for line in f if line.strip()]
