from app.core.config import load_config
from app.ingestion.synthetic import write_corpus

cfg = load_config()
ids = write_corpus(cfg.paths.midi_dir, cfg.paths.audio_dir, count=20, seconds=40.0)
print(f"Wrote {len(ids)} toy performances to {cfg.paths.midi_dir} and {cfg.paths.audio_dir}")
