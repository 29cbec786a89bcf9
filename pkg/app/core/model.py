"""Codec language model: an autoregressive decoder for the first codec level and
a non-autoregressive decoder for the remaining levels, both conditioned on
pooled MIDI token embeddings."""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn
from torch.nn import functional as F

from app.core.errors import SequenceTooLongError, TokenStructureError
from app.core.embedder import FRAME_RATE
from app.core.quantizer import CodecMatrix
from app.core.tokenizer import STREAMS, OctupleSequence, PromptMode, prompt_cut
from app.ingestion.records import NoteSequence


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    ff_dim: int = 512
    stream_dims: Tuple[int, int, int, int, int, int] = (64, 32, 64, 64, 32, 16)
    codebook_size: int = 256
    levels: int = 4
    max_seq_len: int = 2048
    dropout: float = 0.0
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim={self.hidden_dim} is not divisible by heads={self.heads}")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        return self


@dataclass
class PromptSpec:
    """Acoustic prompt: the first prompt_seconds of codec frames and their MIDI."""

    codec: CodecMatrix
    midi: NoteSequence
    seconds: float = 3.0
    mode: PromptMode = PromptMode.HARD_CUT

    @classmethod
    def from_clip(cls, codec: CodecMatrix, midi: NoteSequence, seconds: float = 3.0,
                  mode: PromptMode = PromptMode.HARD_CUT) -> "PromptSpec":
        head, effective = prompt_cut(midi, seconds, mode)
        frames = int(round(effective * FRAME_RATE))
        return cls(codec.frames(0, frames), head, seconds, mode)


def sinusoidal_positions(n: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    position = torch.arange(n, dtype=dtype)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(n, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq[: dim // 2])
    return table


class PooledMidiEmbedding(nn.Module):
    """Embed each token stream separately, concatenate, project to the model width."""

    def __init__(self, vocab_sizes: Sequence[int], stream_dims: Sequence[int], hidden_dim: int):
        super().__init__()
        self.vocab_sizes = tuple(vocab_sizes)
        self.tables = nn.ModuleList(nn.Embedding(v, d) for v, d in zip(vocab_sizes, stream_dims))
        self.project = nn.Linear(sum(stream_dims), hidden_dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([table(tokens[i]) for i, table in enumerate(self.tables)], dim=-1)
        return self.project(pooled)


class SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor]) -> torch.Tensor:
        s, h = x.shape
        q, k, v = self.qkv(x).view(s, 3, self.heads, h // self.heads).permute(1, 2, 0, 3)
        scores = q @ k.transpose(-2, -1) / math.sqrt(h // self.heads)
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        weights = self.dropout(F.softmax(scores, dim=-1))
        return self.out((weights @ v).transpose(0, 1).reshape(s, h))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.attn = SelfAttention(cfg.hidden_dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.ff_dim),
            nn.GELU(),
            nn.Linear(cfg.ff_dim, cfg.hidden_dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.mlp(self.norm2(x))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, allowed)
        return self.norm(x)


def ar_attention_mask(n_midi: int, n_codes: int) -> torch.Tensor:
    """MIDI rows see only MIDI; codec rows see all MIDI and earlier codec rows."""
    size = n_midi + n_codes
    allowed = torch.zeros(size, size, dtype=torch.bool)
    allowed[:, :n_midi] = True
    allowed[n_midi:, n_midi:] = torch.tril(torch.ones(n_codes, n_codes, dtype=torch.bool))
    return allowed


class CodecLanguageModel(nn.Module):
    def __init__(self, cfg: ModelConfig, midi_vocab_sizes: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        self.midi_vocab_sizes = tuple(midi_vocab_sizes)
        k, h = cfg.codebook_size, cfg.hidden_dim
        self.eos = k
        self.pad = k + 1

        self.ar_midi = PooledMidiEmbedding(midi_vocab_sizes, cfg.stream_dims, h)
        self.ar_codes = nn.Embedding(k + 2, h)
        self.ar_decoder = Decoder(cfg)
        self.ar_head = nn.Linear(h, k + 1)

        if cfg.levels > 1:
            self.nar_midi = PooledMidiEmbedding(midi_vocab_sizes, cfg.stream_dims, h)
            self.nar_codes = nn.ModuleList(nn.Embedding(k, h) for _ in range(cfg.levels))
            self.nar_levels = nn.Embedding(cfg.levels - 1, h)
            self.nar_decoder = Decoder(cfg)
            self.nar_heads = nn.ModuleList(nn.Linear(h, k) for _ in range(cfg.levels - 1))

    @property
    def dtype(self) -> torch.dtype:
        return self.ar_head.weight.dtype

    def midi_tensor(self, seq: OctupleSequence) -> torch.Tensor:
        limits = np.array(self.midi_vocab_sizes)[:, None]
        bad = np.argwhere((seq.tokens < 0) | (seq.tokens >= limits))
        if len(bad):
            stream, row = bad[0]
            raise TokenStructureError(
                f"{STREAMS[stream]} token {seq.tokens[stream, row]} outside the model "
                f"vocabulary of {self.midi_vocab_sizes[stream]}", int(row))
        return torch.from_numpy(seq.tokens)

    def _check_length(self, length: int):
        if length > self.cfg.max_seq_len:
            raise SequenceTooLongError(length, self.cfg.max_seq_len)

    def ar_logits(self, midi: OctupleSequence, codes: torch.Tensor) -> torch.Tensor:
        """Logits for the codec token following every prefix: (len(codes) + 1, K + 1)."""
        n, t = len(midi), int(codes.shape[0])
        self._check_length(n + t)
        x = torch.cat([
            self.ar_midi(self.midi_tensor(midi)) + sinusoidal_positions(n, self.cfg.hidden_dim, self.dtype),
            self.ar_codes(codes) + sinusoidal_positions(t, self.cfg.hidden_dim, self.dtype),
        ])
        hidden = self.ar_decoder(x, ar_attention_mask(n, t))
        return self.ar_head(hidden[n - 1:])

    def nar_logits(self, midi: OctupleSequence, codes: torch.Tensor,
                   prompt: Optional[torch.Tensor], level: int) -> torch.Tensor:
        """Logits for codec level `level` (1-based, >= 2) at every target frame: (T, K)."""
        if self.cfg.levels < 2 or not 2 <= level <= self.cfg.levels:
            raise ValueError(f"NAR level must be in 2..{self.cfg.levels}, got {level}")
        n, t = len(midi), int(codes.shape[0])
        p = 0 if prompt is None else int(prompt.shape[0])
        self._check_length(n + p + t)

        target = self.nar_levels.weight[level - 2].expand(t, -1)
        for lower in range(level - 1):
            target = target + self.nar_codes[lower](codes[:, lower])
        spans = [target]
        if p:
            acoustic = sum(self.nar_codes[l](prompt[:, l]) for l in range(self.cfg.levels))
            spans.insert(0, acoustic)
        codec_span = torch.cat(spans) + sinusoidal_positions(p + t, self.cfg.hidden_dim, self.dtype)
        midi_span = (self.nar_midi(self.midi_tensor(midi))
                     + sinusoidal_positions(n, self.cfg.hidden_dim, self.dtype))
        hidden = self.nar_decoder(torch.cat([midi_span, codec_span]))
        return self.nar_heads[level - 2](hidden[n + p:])


def build_model(cfg: ModelConfig, midi_vocab_sizes: Sequence[int]) -> CodecLanguageModel:
    torch.manual_seed(cfg.seed)
    return CodecLanguageModel(cfg, midi_vocab_sizes)


def embed_pooled(seq: OctupleSequence, model: CodecLanguageModel, decoder: str = "ar") -> torch.Tensor:
    """Pooled MIDI embeddings (N, hidden_dim), before positional encoding."""
    table = model.ar_midi if decoder == "ar" else model.nar_midi
    return table(model.midi_tensor(seq))


def with_eos(level1: Sequence[int], model: CodecLanguageModel) -> torch.Tensor:
    return torch.tensor(list(level1) + [model.eos], dtype=torch.long)


def ar_loss(model: CodecLanguageModel, midi: OctupleSequence,
            level1: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Next-token cross-entropy over level-1 tokens; level1 must end with EOS."""
    level1 = torch.as_tensor(level1, dtype=torch.long)
    if int(level1[-1]) != model.eos:
        raise ValueError("level-1 target sequence must end with the EOS token")
    logits = model.ar_logits(midi, level1[:-1])
    return F.cross_entropy(logits, level1), logits


def nar_loss(model: CodecLanguageModel, midi: OctupleSequence, codec: CodecMatrix,
             prompt: Optional[CodecMatrix], level: int) -> torch.Tensor:
    """Cross-entropy for one NAR level over the target frames only."""
    codes = torch.from_numpy(codec.tokens)
    prompt_codes = None
    if prompt is not None and len(prompt):
        prompt_codes = torch.from_numpy(prompt.tokens)
    logits = model.nar_logits(midi, codes, prompt_codes, level)
    return F.cross_entropy(logits, codes[:, level - 1])
