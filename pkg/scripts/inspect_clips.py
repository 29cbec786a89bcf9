import os

from app.core.tokenizer import detokenize, tokenize
from app.ingestion.chunk import segment
from app.ingestion.load import load_audio, load_midi

midi_path = os.path.join("data", "midi", "piece_000.mid")
audio_path = os.path.join("data", "audio", "piece_000.wav")

clips = segment(load_midi(midi_path, "piece_000"), load_audio(audio_path))

print(f"Cut {len(clips)} clips:")
for clip in clips[:3]:
    seq = tokenize(clip.midi)
    print(f"\n--- {clip.clip_id}: {clip.clip_start:.2f}s + {clip.clip_length:.2f}s, {len(clip.midi)} notes ---")
    print(seq.tokens[:, :6].T)
    print(detokenize(seq).notes[:3])
