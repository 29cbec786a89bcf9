import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.embedder import FRAME_RATE
from app.core.errors import NonFiniteLossError, SequenceTooLongError
from app.core.model import (
    CodecLanguageModel,
    ModelConfig,
    PromptSpec,
    ar_loss,
    build_model,
    nar_loss,
    with_eos,
)
from app.core.quantizer import CodecMatrix
from app.core.tokenizer import (
    OctupleSequence,
    TokenizerConfig,
    concat_prompt,
    prompt_cut,
    tokenize,
)
from app.ingestion.chunk import clip_bounds, cut_notes
from app.ingestion.records import NoteSequence

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MVLM"
FRAME_CAP = 1.25


@dataclass
class TrainingPair:
    midi: OctupleSequence
    codec: CodecMatrix


@dataclass
class TrainState:
    model: CodecLanguageModel
    optimizer: torch.optim.SGD
    step: int = 0
    seed: int = 0
    prompt_frames: int = 150
    nar_all_levels: bool = False


@dataclass
class Sampling:
    greedy: bool = False
    top_k: int = 16
    temperature: float = 1.0


def make_state(model: CodecLanguageModel, learning_rate: float, momentum: float = 0.9,
               seed: int = 0, prompt_frames: int = 150, nar_all_levels: bool = False) -> TrainState:
    optimizer = torch.optim.SGD(model.parameters(), lr=learning_rate, momentum=momentum)
    return TrainState(model, optimizer, 0, seed, prompt_frames, nar_all_levels)


def split_prompt(codec: CodecMatrix, prompt_frames: int) -> Tuple[CodecMatrix, CodecMatrix]:
    """Training-time acoustic prompt: the clip's opening frames, at most half the clip."""
    p = min(prompt_frames, len(codec) // 2)
    return codec.frames(0, p), codec.frames(p, len(codec))


def pair_losses(model: CodecLanguageModel, pair: TrainingPair, levels: Sequence[int],
                prompt_frames: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """AR loss on the full clip (no prompt) and the summed NAR loss over `levels`."""
    ar, _ = ar_loss(model, pair.midi, with_eos(pair.codec.tokens[:, 0].tolist(), model))
    nar = torch.zeros((), dtype=model.dtype)
    if levels:
        prompt, target = split_prompt(pair.codec, prompt_frames)
        for level in levels:
            nar = nar + nar_loss(model, pair.midi, target, prompt, level)
    return ar, nar


def nar_levels_for_step(state: TrainState) -> List[int]:
    levels = state.model.cfg.levels
    if levels < 2:
        return []
    if state.nar_all_levels:
        return list(range(2, levels + 1))
    rng = np.random.default_rng([state.seed, state.step])
    return [int(rng.integers(2, levels + 1))]


def train_step(state: TrainState, batch: Sequence[TrainingPair]) -> Dict[str, float]:
    """One joint AR + NAR update; deterministic given the state's seed and step."""
    model = state.model
    model.train()
    torch.manual_seed(state.seed * 1000003 + state.step)
    levels = nar_levels_for_step(state)

    state.optimizer.zero_grad()
    ar_total, nar_total = 0.0, 0.0
    for index, pair in enumerate(batch):
        ar, nar = pair_losses(model, pair, levels, state.prompt_frames)
        if not (torch.isfinite(ar) and torch.isfinite(nar)):
            raise NonFiniteLossError(index, float(ar), float(nar))
        ((ar + nar) / len(batch)).backward()
        ar_total += float(ar)
        nar_total += float(nar)
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "ar_loss": ar_total / len(batch),
        "nar_loss": nar_total / len(batch),
        "nar_level": levels[0] if len(levels) == 1 else 0,
    }


@torch.no_grad()
def accuracy(model: CodecLanguageModel, batch: Sequence[TrainingPair],
             prompt_frames: int = 150) -> Dict[str, float]:
    """Teacher-forced next-token accuracy for AR and mean NAR accuracy over levels."""
    model.eval()
    ar_hits, ar_count, nar_hits, nar_count = 0, 0, 0, 0
    for pair in batch:
        targets = with_eos(pair.codec.tokens[:, 0].tolist(), model)
        logits = model.ar_logits(pair.midi, targets[:-1])
        ar_hits += int((logits.argmax(-1) == targets).sum())
        ar_count += len(targets)
        prompt, target = split_prompt(pair.codec, prompt_frames)
        prompt_codes = torch.from_numpy(prompt.tokens) if len(prompt) else None
        codes = torch.from_numpy(target.tokens)
        for level in range(2, model.cfg.levels + 1):
            predicted = model.nar_logits(pair.midi, codes, prompt_codes, level).argmax(-1)
            nar_hits += int((predicted == codes[:, level - 1]).sum())
            nar_count += len(target)
    return {
        "ar_accuracy": ar_hits / max(ar_count, 1),
        "nar_accuracy": nar_hits / nar_count if nar_count else 1.0,
    }


def _sample(logits: torch.Tensor, sampling: Sampling, generator: torch.Generator) -> int:
    if sampling.greedy:
        return int(torch.argmax(logits))
    logits = logits / sampling.temperature
    k = min(sampling.top_k, logits.shape[-1]) if sampling.top_k else logits.shape[-1]
    values, indices = torch.topk(logits, k)
    probs = torch.softmax(values, dim=-1)
    return int(indices[torch.multinomial(probs, 1, generator=generator)])


@torch.no_grad()
def generate(model: CodecLanguageModel, target_midi: NoteSequence, prompt: Optional[PromptSpec] = None,
             sampling: Sampling = Sampling(), seed: int = 0,
             tokenizer_cfg: TokenizerConfig = TokenizerConfig()) -> CodecMatrix:
    """Codec tokens for target_midi. Prompt frames are never part of the result."""
    if len(target_midi) == 0:
        raise ValueError("Target MIDI is empty: nothing to synthesize.")
    model.eval()
    cfg = model.cfg

    prompt_codes = torch.zeros((0, cfg.levels), dtype=torch.long)
    if prompt is not None:
        _, effective = prompt_cut(prompt.midi, prompt.seconds, prompt.mode)
        span = min(prompt.midi.end, prompt.seconds)
        if abs(len(prompt.codec) / FRAME_RATE - span) > 0.5:
            logger.warning("Prompt audio (%.2f s) and prompt MIDI (%.2f s) disagree; "
                           "expect artifacts at the start of the generation",
                           len(prompt.codec) / FRAME_RATE, span)
        midi = concat_prompt(prompt.midi, target_midi, prompt.seconds, prompt.mode, tokenizer_cfg)
        frames = min(int(round(effective * FRAME_RATE)), len(prompt.codec))
        prompt_codes = torch.from_numpy(prompt.codec.tokens[:frames, :cfg.levels])
    else:
        midi = tokenize(target_midi, tokenizer_cfg)

    max_frames = max(1, math.ceil(target_midi.end * FRAME_RATE * FRAME_CAP))
    if len(midi) + len(prompt_codes) + max_frames > cfg.max_seq_len:
        raise SequenceTooLongError(len(midi) + len(prompt_codes) + max_frames, cfg.max_seq_len)

    generator = torch.Generator().manual_seed(seed)
    codes = prompt_codes[:, 0].tolist()
    generated: List[int] = []
    for step in range(max_frames):
        logits = model.ar_logits(midi, torch.tensor(codes, dtype=torch.long))[-1]
        if step == 0:
            logits[model.eos] = float("-inf")
        token = _sample(logits, sampling, generator)
        if token == model.eos:
            break
        codes.append(token)
        generated.append(token)

    tokens = torch.zeros((len(generated), cfg.levels), dtype=torch.long)
    tokens[:, 0] = torch.tensor(generated, dtype=torch.long)
    prompt_arg = prompt_codes if len(prompt_codes) else None
    for level in range(2, cfg.levels + 1):
        tokens[:, level - 1] = model.nar_logits(midi, tokens, prompt_arg, level).argmax(-1)
    logger.info("generated %d frames (cap %d) after %d prompt frames",
                len(generated), max_frames, len(prompt_codes))
    return CodecMatrix(tokens.numpy(), cfg.codebook_size)


def synthesize_long(model: CodecLanguageModel, target_midi: NoteSequence,
                    prompt: Optional[PromptSpec] = None, segment_seconds: float = 20.0,
                    sampling: Sampling = Sampling(), seed: int = 0,
                    tokenizer_cfg: TokenizerConfig = TokenizerConfig(),
                    silence: Optional[Sequence[int]] = None) -> CodecMatrix:
    """Generate a long performance piece by piece with a shared prompt and join the codes.

    Every segment but the last is padded or trimmed to its own frame span so the
    joined codes stay on the MIDI timeline. Segments without notes become
    ``silence`` frames (one code per level, default all zeros). The last piece
    keeps its release tail.
    """
    levels = model.cfg.levels
    filler = np.zeros(levels, dtype=np.int64) if silence is None else np.asarray(silence, dtype=np.int64)
    if filler.shape != (levels,):
        raise ValueError(f"Silence codes need one entry per level ({levels}), got shape {filler.shape}.")
    if len(target_midi) == 0:
        raise ValueError("Target MIDI is empty: nothing to synthesize.")

    bounds = clip_bounds(target_midi.end, segment_seconds, segment_seconds, seed, remainder_min_s=0.0)
    pieces = []
    for index, (start, stop) in enumerate(bounds):
        span = int(round(stop * FRAME_RATE)) - int(round(start * FRAME_RATE))
        notes, _ = cut_notes(target_midi, start, stop)
        if len(notes) == 0:
            logger.info("segment %d (%.1f-%.1f s) has no notes, filled with silence", index, start, stop)
            pieces.append(np.tile(filler, (span, 1)))
            continue
        tokens = generate(model, notes, prompt, sampling, seed + index, tokenizer_cfg).tokens
        if len(tokens) < span:
            tokens = np.concatenate([tokens, np.tile(filler, (span - len(tokens), 1))])
        elif len(tokens) > span and index < len(bounds) - 1:
            tokens = tokens[:span]
        pieces.append(tokens)
    return CodecMatrix(np.concatenate(pieces), model.cfg.codebook_size)


def save_checkpoint(state: TrainState, file_path: str, config_digest: str,
                    codec_digest: str = "", tokenizer_cfg: TokenizerConfig = TokenizerConfig()):
    """MVLM file: digest, JSON metadata, then named float32 tensors with shapes."""
    group = state.optimizer.param_groups[0]
    meta = {
        "model": state.model.cfg.model_dump(),
        "tokenizer": tokenizer_cfg.model_dump(),
        "codec_digest": codec_digest,
        "step": state.step,
        "seed": state.seed,
        "prompt_frames": state.prompt_frames,
        "nar_all_levels": state.nar_all_levels,
        "learning_rate": group["lr"],
        "momentum": group["momentum"],
    }
    tensors = {name: t.detach() for name, t in state.model.state_dict().items()}
    for name, param in state.model.named_parameters():
        buffer = state.optimizer.state.get(param, {}).get("momentum_buffer")
        if buffer is not None:
            tensors[f"optim/{name}"] = buffer

    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    digest = config_digest.encode()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(file_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(digest)) + digest)
        f.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            encoded = name.encode()
            shape = tuple(tensor.shape)
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
            f.write(tensor.cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(file_path: str) -> Tuple[TrainState, Dict]:
    """Rebuild model, optimizer (with momentum buffers) and step from an MVLM file."""
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Checkpoint not found: {file_path}")
    with open(file_path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{file_path} is not an MVLM checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        chunk = data[pos:pos + n]
        if len(chunk) != n:
            raise ValueError(f"{file_path} is truncated at byte {pos}")
        pos += n
        return chunk

    digest = take(struct.unpack("<I", take(4))[0]).decode()
    meta = json.loads(take(struct.unpack("<I", take(4))[0]))
    tensors = {}
    for _ in range(struct.unpack("<I", take(4))[0]):
        name = take(struct.unpack("<H", take(2))[0]).decode()
        ndim = take(1)[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        tensors[name] = torch.from_numpy(values.reshape(shape))

    tokenizer_cfg = TokenizerConfig(**meta["tokenizer"])
    model = build_model(ModelConfig(**meta["model"]), tokenizer_cfg.stream_sizes)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim/")})
    state = make_state(model, meta["learning_rate"], meta["momentum"], meta["seed"],
                       meta["prompt_frames"], meta["nar_all_levels"])
    state.step = meta["step"]
    for name, param in model.named_parameters():
        if f"optim/{name}" in tensors:
            state.optimizer.state[param]["momentum_buffer"] = tensors[f"optim/{name}"].clone()
    meta["config_digest"] = digest
    return state, meta


def central_difference(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor, index: int,
                       epsilon: float) -> Tuple[float, float]:
    """Loss with one scalar parameter nudged by +epsilon and -epsilon."""
    flat = param.data.view(-1)
    original = flat[index].item()
    flat[index] = original + epsilon
    plus = float(loss_fn())
    flat[index] = original - epsilon
    minus = float(loss_fn())
    flat[index] = original
    return plus, minus


def grad_check(cfg: ModelConfig, batch: Sequence[TrainingPair], epsilon: float = 1e-5,
               n_params: int = 200, seed: int = 0,
               tokenizer_cfg: TokenizerConfig = TokenizerConfig(), floor: float = 1e-4) -> float:
    """Largest relative error between autograd and central-difference gradients.

    Runs in double precision on a tiny model; the relative error of each
    parameter is |a - n| / max(|a| + |n|, floor).
    """
    if cfg.layers > 2 or cfg.hidden_dim > 16:
        raise ValueError("grad_check needs a tiny model: at most 2 layers and hidden_dim 16")
    model = build_model(cfg, tokenizer_cfg.stream_sizes).double()
    model.eval()
    levels = [2] if cfg.levels > 1 else []

    def loss_fn() -> torch.Tensor:
        total = torch.zeros((), dtype=torch.float64)
        for pair in batch:
            ar, nar = pair_losses(model, pair, levels, prompt_frames=150)
            total = total + ar + nar
        return total / len(batch)

    params = [p for p in model.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat_grads = np.concatenate([
        np.zeros(p.numel()) if g is None else g.detach().reshape(-1).numpy()
        for p, g in zip(params, analytic)
    ])
    # entries the batch actually reaches first; most embedding rows get no gradient
    rng = np.random.default_rng(seed)
    touched = rng.permutation(np.flatnonzero(flat_grads))
    rest = rng.permutation(np.flatnonzero(flat_grads == 0))
    picks = np.concatenate([touched, rest])[:min(n_params, int(offsets[-1]))]

    worst = 0.0
    with torch.no_grad():
        for flat_index in sorted(picks):
            i = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            j = int(flat_index - offsets[i])
            grad = analytic[i]
            a = 0.0 if grad is None else float(grad.reshape(-1)[j])
            plus, minus = central_difference(loss_fn, params[i], j, epsilon)
            numeric = (plus - minus) / (2 * epsilon)
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
    logger.info("grad_check over %d parameters: max relative error %.3e", len(picks), worst)
    return worst
