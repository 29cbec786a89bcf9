"""Standard MIDI File reading and writing.

The reader is a small chunk/event walker (format 0 and 1) so that malformed input
can be reported with the byte offset where decoding failed. Writing goes through
mido.
"""

import bisect
import io
import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Tuple

import mido

from app.core.errors import MidiParseError
from app.ingestion.records import PITCH_MAX, PITCH_MIN, Note, NoteSequence, ParseReport

logger = logging.getLogger(__name__)

DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 BPM)
DEFAULT_PPQ = 480

META_END_OF_TRACK = 0x2F
META_SET_TEMPO = 0x51


@dataclass
class _NoteEvent:
    tick: int
    is_on: bool
    pitch: int
    velocity: int
    track: int


def _read_vlq(data: bytes, pos: int, end: int) -> Tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("variable-length quantity runs past end of track", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 4)


def _parse_track(data: bytes, start: int, end: int, track: int,
                 notes: List[_NoteEvent], tempos: List[Tuple[int, int]]) -> int:
    """Walk one MTrk body. Returns the end-of-track tick."""
    pos = start
    tick = 0
    running = None
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        status = data[pos]

        if status == 0xFF:
            if pos + 2 > end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos + 1]
            length, body = _read_vlq(data, pos + 2, end)
            if body + length > end:
                raise MidiParseError("meta event overruns track", pos)
            if meta_type == META_SET_TEMPO:
                if length != 3:
                    raise MidiParseError("set_tempo meta event must carry 3 bytes", pos)
                tempos.append((tick, int.from_bytes(data[body:body + 3], "big")))
            pos = body + length
            if meta_type == META_END_OF_TRACK:
                return tick
            continue

        if status in (0xF0, 0xF7):
            length, body = _read_vlq(data, pos + 1, end)
            if body + length > end:
                raise MidiParseError("sysex event overruns track", pos)
            pos = body + length
            running = None
            continue

        if status >= 0xF0:
            raise MidiParseError(f"unexpected status byte 0x{status:02X}", pos)

        if status & 0x80:
            running = status
            pos += 1
        elif running is None:
            raise MidiParseError("data byte without running status", pos)
        kind = running & 0xF0
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if pos + n_data > end:
            raise MidiParseError("truncated channel message", pos)
        payload = data[pos:pos + n_data]
        if any(b & 0x80 for b in payload):
            raise MidiParseError("status byte inside channel message data", pos)
        pos += n_data

        if kind == 0x90 and payload[1] > 0:
            notes.append(_NoteEvent(tick, True, payload[0], payload[1], track))
        elif kind == 0x80 or kind == 0x90:
            notes.append(_NoteEvent(tick, False, payload[0], 0, track))
        # control changes (sustain pedal included), program changes, bends: dropped
    return tick


class TempoMap:
    """Piecewise-linear tick to seconds conversion."""

    def __init__(self, ppq: int, tempos: List[Tuple[int, int]], smpte_rate: float = 0.0):
        self.ppq = ppq
        self.smpte_rate = smpte_rate
        changes: Dict[int, int] = {0: DEFAULT_TEMPO}
        for tick, tempo in sorted(tempos, key=lambda t: t[0]):
            changes[tick] = tempo
        self.ticks = sorted(changes)
        self.tempos = [changes[t] for t in self.ticks]
        self.seconds = [0.0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.seconds.append(self.seconds[-1] + span * self.tempos[i - 1] / 1e6 / ppq)

    def to_seconds(self, tick: int) -> float:
        if self.smpte_rate:
            return tick / self.smpte_rate
        i = bisect.bisect_right(self.ticks, tick) - 1
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempos[i] / 1e6 / self.ppq


def parse_smf(data: bytes, source_id: str = "") -> NoteSequence:
    """Decode SMF bytes into a NoteSequence in absolute seconds."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or 8 + header_len > len(data):
        raise MidiParseError(f"bad header length {header_len}", 4)
    fmt, n_tracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)

    smpte_rate = 0.0
    ppq = division
    if division & 0x8000:
        fps = 256 - (division >> 8)
        smpte_rate = float(fps * (division & 0xFF))
        ppq = 1
    elif division == 0:
        raise MidiParseError("division of zero ticks per quarter note", 12)

    notes: List[_NoteEvent] = []
    tempos: List[Tuple[int, int]] = []
    track_ends: List[int] = []
    pos = 8 + header_len
    while len(track_ends) < n_tracks:
        if pos + 8 > len(data):
            raise MidiParseError(
                f"expected {n_tracks} tracks, found {len(track_ends)} before end of file", pos)
        chunk_id = data[pos:pos + 4]
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + length > len(data):
            raise MidiParseError(f"chunk {chunk_id!r} overruns file", pos)
        if chunk_id == b"MTrk":
            track_ends.append(
                _parse_track(data, body, body + length, len(track_ends), notes, tempos))
        pos = body + length

    return _pair_notes(notes, track_ends, TempoMap(ppq, tempos, smpte_rate), source_id)


def _pair_notes(events: List[_NoteEvent], track_ends: List[int], tempo_map: TempoMap,
                source_id: str) -> NoteSequence:
    report = ParseReport()
    # offs before ons at the same tick, so re-struck keys close before reopening;
    # an off that follows its own on at the same tick sorts last and closes it
    opened = set()
    ranks = {}
    for event in events:
        key = (event.track, event.pitch, event.tick)
        if event.is_on:
            opened.add(key)
            ranks[id(event)] = 1
        else:
            ranks[id(event)] = 2 if key in opened else 0
    events = sorted(events, key=lambda e: (e.tick, ranks[id(e)], e.pitch, e.velocity, e.track))
    active: Dict[int, _NoteEvent] = {}
    paired: List[Tuple[_NoteEvent, int]] = []

    for event in events:
        if not PITCH_MIN <= event.pitch <= PITCH_MAX:
            if event.is_on:
                report.out_of_range += 1
            continue
        if event.is_on:
            if event.pitch in active:
                report.overlapped += 1
                paired.append((active.pop(event.pitch), event.tick))
            active[event.pitch] = event
        elif event.pitch in active:
            paired.append((active.pop(event.pitch), event.tick))

    for _, start in sorted(active.items()):
        report.unclosed += 1
        paired.append((start, max(track_ends[start.track], start.tick)))

    result = []
    for start, end_tick in paired:
        onset = tempo_map.to_seconds(start.tick)
        duration = tempo_map.to_seconds(end_tick) - onset
        if duration <= 0:
            report.zero_length += 1
            continue
        result.append(Note(start.pitch, start.velocity, onset, duration))

    if report.out_of_range:
        logger.warning("%s: dropped %d notes outside pitch range %d-%d",
                       source_id or "<smf>", report.out_of_range, PITCH_MIN, PITCH_MAX)
    if report.unclosed:
        logger.warning("%s: %d notes had no note-off and were closed at end of track",
                       source_id or "<smf>", report.unclosed)
    return NoteSequence(result, source_id, report)


def write_smf(ns: NoteSequence, ppq: int = DEFAULT_PPQ, tempo: int = DEFAULT_TEMPO) -> bytes:
    """Format-0 SMF holding one note-on/note-off pair per note."""
    ticks_per_second = ppq * 1e6 / tempo
    events = []
    for note in ns:
        on = int(round(note.onset * ticks_per_second))
        off = max(on + 1, int(round(note.offset * ticks_per_second)))
        events.append((on, 1, note.pitch, note.velocity))
        events.append((off, 0, note.pitch, 0))
    events.sort()

    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=tempo, time=0))
    last = 0
    for tick, is_on, pitch, velocity in events:
        kind = "note_on" if is_on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=velocity, time=tick - last))
        last = tick
    track.append(mido.MetaMessage("end_of_track", time=0))

    midi = mido.MidiFile(type=0, ticks_per_beat=ppq)
    midi.tracks.append(track)
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()
