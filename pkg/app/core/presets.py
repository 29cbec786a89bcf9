"""
Size presets for the codec and the language model.
Applied on top of config/config.yaml before any --set override.
"""

from typing import Dict
from enum import Enum


class Preset(Enum):
    DESK = "desk"
    FULL = "full"
    TINY = "tiny"


# Laptop scale: trains in minutes on a CPU
PRESET_SECTIONS: Dict[Preset, Dict[str, Dict]] = {
    Preset.DESK: {
        "codec": {"levels": 4, "codebook_size": 256, "n_mels": 64},
        "model": {"layers": 4, "heads": 4, "hidden_dim": 128, "ff_dim": 512,
                  "codebook_size": 256, "levels": 4, "max_seq_len": 2048},
        "training": {"steps": 2000, "batch_size": 4, "learning_rate": 0.05},
    },

    # Full-size widths and depths, GPU only
    Preset.FULL: {
        "codec": {"levels": 4, "codebook_size": 2048, "n_mels": 128},
        "model": {"layers": 12, "heads": 16, "hidden_dim": 1024, "ff_dim": 4096,
                  "stream_dims": [256, 128, 256, 256, 128, 64],
                  "codebook_size": 2048, "levels": 4, "max_seq_len": 4096},
        "training": {"steps": 300000, "batch_size": 8, "learning_rate": 0.05},
    },

    # Gradient checks and smoke runs
    Preset.TINY: {
        "codec": {"levels": 2, "codebook_size": 16, "n_mels": 16},
        "model": {"layers": 2, "heads": 2, "hidden_dim": 16, "ff_dim": 32,
                  "stream_dims": [4, 4, 4, 4, 4, 4],
                  "codebook_size": 16, "levels": 2, "max_seq_len": 4096},
        "training": {"steps": 50, "batch_size": 2, "learning_rate": 0.05},
    },
}


def get_preset_sections(preset: str) -> Dict[str, Dict]:
    """Section overrides for a preset name; unknown names raise ValueError."""
    try:
        return PRESET_SECTIONS[Preset(preset)]
    except ValueError:
        names = ", ".join(p.value for p in Preset)
        raise ValueError(f"Unknown preset '{preset}'. Choose one of: {names}") from None
