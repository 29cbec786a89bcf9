"""Pipeline stages behind the command line: prepare, train-codec, train-lm,
synth, eval, reconstruct and gradcheck. Every stage reads and writes inside one
run directory, work_dir/runs/<timestamp>_<digest prefix>."""

import hashlib
import json
import logging
import os
from dataclasses import replace
from datetime import datetime
from typing import List, Optional

import numpy as np

from app.core.config import PipelineConfig
from app.core.embedder import FRAME_RATE, frame_features, synthesize_waveform
from app.core.engine import (
    Sampling,
    TrainState,
    TrainingPair,
    accuracy,
    grad_check,
    load_checkpoint,
    make_state,
    save_checkpoint,
    synthesize_long,
    train_step,
)
from app.core.errors import ConfigDigestError
from app.core.evaluator import MetricReport, Reference, evaluate_corpus, evaluate_pairs, save_report
from app.core.model import ModelConfig, PromptSpec, build_model
from app.core.presets import get_preset_sections
from app.core.quantizer import (
    CodecMatrix,
    RvqCodebooks,
    load_codebooks,
    load_codec,
    random_crops,
    reconstruct,
    refine_rvq,
    rvq_decode,
    rvq_encode,
    save_codebooks,
    save_codec,
    silence_codes,
    train_rvq,
)
from app.core.tokenizer import TokenizerConfig, load_tokens, save_tokens, tokenize
from app.ingestion.chunk import read_manifest, segment, split_dataset, write_manifest
from app.ingestion.load import load_audio, load_midi, save_wav
from app.ingestion.records import ClipRecord
from app.ingestion.smf import write_smf
from app.ingestion.synthetic import random_performance

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
CODEBOOKS = os.path.join("codec", "codebooks.rvq")
CHECKPOINT = os.path.join("lm", "model.mvlm")
LOSS_LOG = os.path.join("lm", "loss.jsonl")


def runs_root(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.paths.work_dir, "runs")


def new_run_dir(cfg: PipelineConfig) -> str:
    name = f"{datetime.now().strftime('%Y%m%d_%H%M%S')}_{cfg.digest()[:8]}"
    path = os.path.join(runs_root(cfg), name)
    os.makedirs(path, exist_ok=True)
    return path


def latest_run_dir(cfg: PipelineConfig, same_digest: bool = False) -> Optional[str]:
    root = runs_root(cfg)
    if not os.path.isdir(root):
        return None
    names = sorted(n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n)))
    if same_digest:
        names = [n for n in names if n.endswith("_" + cfg.digest()[:8])]
    return os.path.join(root, names[-1]) if names else None


def resolve_run_dir(cfg: PipelineConfig, run_dir: Optional[str] = None, create: bool = False) -> str:
    """Explicit run dir, else the latest one; prepare reuses the latest run of the same config."""
    if run_dir:
        if create:
            os.makedirs(run_dir, exist_ok=True)
        if not os.path.isdir(run_dir):
            raise FileNotFoundError(f"Run directory not found: {run_dir}")
        return run_dir
    found = latest_run_dir(cfg, same_digest=create)
    if found:
        return found
    if create:
        return new_run_dir(cfg)
    raise FileNotFoundError(f"No run directory under {runs_root(cfg)}; run 'prepare' first")


def _file_digest(*paths: str) -> str:
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def _source_pairs(cfg: PipelineConfig) -> List[tuple]:
    midi_dir, audio_dir = cfg.paths.midi_dir, cfg.paths.audio_dir
    for d in (midi_dir, audio_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"Input directory not found: {d}")
    pairs = []
    for name in sorted(os.listdir(midi_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".mid", ".midi"):
            continue
        audio = os.path.join(audio_dir, stem + ".wav")
        if not os.path.exists(audio):
            logger.warning("no audio for %s, skipped", name)
            continue
        pairs.append((stem, os.path.join(midi_dir, name), audio))
    if not pairs:
        raise FileNotFoundError(f"No MIDI/WAV pairs with matching names in {midi_dir} and {audio_dir}")
    return pairs


def prepare(cfg: PipelineConfig, run_dir: str) -> List[ClipRecord]:
    """Segment every aligned performance into clips and tokenize their MIDI.

    Clips whose digest is already in the manifest, with files on disk, are kept
    as they are. Codec tokens are written too when codebooks exist.
    """
    seg = cfg.segment
    sources = _source_pairs(cfg)
    splits = split_dataset([s[0] for s in sources], seg.seed, seg.split_ratios)
    existing = {r.clip_id: r for r in read_manifest(os.path.join(run_dir, MANIFEST))}
    codebooks_path = os.path.join(run_dir, CODEBOOKS)
    cb = load_codebooks(codebooks_path) if os.path.exists(codebooks_path) else None
    segment_digest = cfg.codec_digest() + cfg.tokenizer.model_dump_json()

    records, reused = [], 0
    for source_id, midi_path, audio_path in sources:
        source_digest = _file_digest(midi_path, audio_path)
        perf = load_midi(midi_path, source_id)
        audio = load_audio(audio_path)
        clips = segment(perf, audio, seg.min_seconds, seg.max_seconds,
                        seed=seg.seed + int(source_digest[:8], 16), min_note_s=seg.min_note_seconds,
                        remainder_min_s=seg.remainder_min_seconds)
        for clip in clips:
            digest = hashlib.sha256(
                f"{source_digest}:{segment_digest}:{clip.clip_index}".encode()).hexdigest()
            old = existing.get(clip.clip_id)
            if old and old.digest == digest and all(
                    p and os.path.exists(p) for p in (old.midi_path, old.audio_path, old.token_path)):
                records.append(replace(old, split=splits[source_id], config_digest=cfg.digest()))
                reused += 1
                continue
            base = os.path.join(run_dir, "clips", clip.clip_id)
            os.makedirs(os.path.dirname(base), exist_ok=True)
            with open(base + ".mid", "wb") as f:
                f.write(write_smf(clip.midi))
            save_wav(clip.audio, base + ".wav")
            save_tokens(tokenize(clip.midi, cfg.tokenizer), base + ".oct")
            codec_path = None
            if cb is not None:
                codec_path = base + ".codx"
                save_codec(rvq_encode(frame_features(clip.audio, cb.dim), cb), codec_path)
            records.append(ClipRecord(
                source_id=source_id,
                clip_index=clip.clip_index,
                clip_start=clip.clip_start,
                clip_length=clip.clip_length,
                midi_path=base + ".mid",
                audio_path=base + ".wav",
                split=splits[source_id],
                digest=digest,
                config_digest=cfg.digest(),
                token_path=base + ".oct",
                codec_path=codec_path,
            ))
    write_manifest(records, os.path.join(run_dir, MANIFEST))
    logger.info("prepared %d clips from %d performances (%d unchanged)",
                len(records), len(sources), reused)
    return records


def _manifest(run_dir: str) -> List[ClipRecord]:
    records = read_manifest(os.path.join(run_dir, MANIFEST))
    if not records:
        raise FileNotFoundError(f"No clip manifest in {run_dir}; run 'prepare' first")
    return records


def _split(records: List[ClipRecord], split: str) -> List[ClipRecord]:
    chosen = [r for r in records if r.split == split]
    if not chosen:
        logger.warning("no clips in the %s split, using all %d clips", split, len(records))
        return records
    return chosen


def train_codec(cfg: PipelineConfig, run_dir: str, finetune_epochs: int = 0) -> RvqCodebooks:
    """Fit RVQ codebooks on the training clips and encode every clip."""
    records = _manifest(run_dir)
    codec = cfg.codec
    features = [frame_features(load_audio(r.audio_path), codec.n_mels)
                for r in _split(records, "train")]
    cb = train_rvq(features, codec.levels, codec.codebook_size, codec.seed, codec.max_iter, codec.tol)
    if finetune_epochs:
        rng = np.random.default_rng(codec.seed)
        crop_frames = max(1, int(round(codec.crop_seconds * FRAME_RATE)))
        for epoch in range(finetune_epochs):
            cb = refine_rvq(cb, random_crops(features, crop_frames, rng), codec.refine_iterations)
            logger.info("fine-tune epoch %d: distortion %s", epoch + 1,
                        ", ".join(f"{d:.5f}" for d in cb.distortion))
    cb = replace(cb, digest=cfg.codec_digest())
    save_codebooks(cb, os.path.join(run_dir, CODEBOOKS))

    updated = []
    for r in records:
        codec_path = os.path.splitext(r.audio_path)[0] + ".codx"
        save_codec(rvq_encode(frame_features(load_audio(r.audio_path), cb.dim), cb), codec_path)
        updated.append(replace(r, codec_path=codec_path))
    write_manifest(updated, os.path.join(run_dir, MANIFEST))
    logger.info("codebooks %d x %d x %d saved, %d clips encoded", cb.levels, cb.size, cb.dim, len(updated))
    return cb


def _check_codec(cb: RvqCodebooks, expected: str, what: str):
    if cb.digest != expected:
        raise ConfigDigestError(
            f"{what} was built for codec config {expected[:12]}, but the codebooks are "
            f"{cb.digest[:12] or 'unversioned'}; retrain the codec or the language model")


def training_pairs(records: List[ClipRecord]) -> List[TrainingPair]:
    missing = [r.clip_id for r in records if not r.codec_path or not r.token_path]
    if missing:
        raise FileNotFoundError(f"{len(missing)} clips have no codec tokens; run 'train-codec' first")
    return [TrainingPair(load_tokens(r.token_path), load_codec(r.codec_path)) for r in records]


def train_lm(cfg: PipelineConfig, run_dir: str, resume: bool = False) -> TrainState:
    """Joint AR/NAR training on the training clips; writes a checkpoint and a loss log."""
    cb = load_codebooks(os.path.join(run_dir, CODEBOOKS))
    _check_codec(cb, cfg.codec_digest(), "The current config")
    pairs = training_pairs(_split(_manifest(run_dir), "train"))
    train = cfg.training
    checkpoint = os.path.join(run_dir, CHECKPOINT)
    if resume and os.path.exists(checkpoint):
        state, _ = load_checkpoint(checkpoint)
        logger.info("resuming from step %d", state.step)
    else:
        model = build_model(cfg.model, cfg.tokenizer.stream_sizes)
        state = make_state(model, train.learning_rate, train.momentum, train.seed,
                           train.prompt_frames, train.nar_levels == "all")

    os.makedirs(os.path.dirname(checkpoint), exist_ok=True)
    with open(os.path.join(run_dir, LOSS_LOG), "a" if resume else "w") as log:
        while state.step < train.steps:
            rng = np.random.default_rng([train.seed, state.step])
            batch = [pairs[i] for i in rng.choice(len(pairs), train.batch_size,
                                                   replace=len(pairs) < train.batch_size)]
            losses = train_step(state, batch)
            log.write(json.dumps(losses) + "\n")
            if state.step % train.log_every == 0 or state.step == train.steps:
                logger.info("step %d: ar %.4f nar %.4f", state.step,
                            losses["ar_loss"], losses["nar_loss"])
    logger.info("accuracy on training clips: %s", accuracy(state.model, pairs, train.prompt_frames))
    save_checkpoint(state, checkpoint, cfg.digest(), cb.digest, cfg.tokenizer)
    return state


def default_synth_path(run_dir: str, midi_path: str) -> str:
    return os.path.join(run_dir, "synth", os.path.splitext(os.path.basename(midi_path))[0] + ".wav")


def synth(cfg: PipelineConfig, run_dir: str, midi_path: str, out_path: str,
          prompt_audio: Optional[str] = None, prompt_midi: Optional[str] = None) -> str:
    if (prompt_audio is None) != (prompt_midi is None):
        raise ValueError("--prompt-audio and --prompt-midi must be given together")
    state, meta = load_checkpoint(os.path.join(run_dir, CHECKPOINT))
    cb = load_codebooks(os.path.join(run_dir, CODEBOOKS))
    _check_codec(cb, meta["codec_digest"], "The language model")
    tokenizer_cfg = TokenizerConfig(**meta["tokenizer"])

    target = load_midi(midi_path, os.path.splitext(os.path.basename(midi_path))[0])
    prompt = None
    if prompt_audio is not None:
        codes = rvq_encode(frame_features(load_audio(prompt_audio), cb.dim), cb)
        prompt = PromptSpec.from_clip(codes, load_midi(prompt_midi), cfg.prompt.seconds, cfg.prompt.mode)

    s = cfg.sampling
    codes = synthesize_long(state.model, target, prompt, s.segment_seconds,
                            Sampling(s.greedy, s.top_k, s.temperature), s.seed, tokenizer_cfg,
                            silence_codes(cb))
    wave = synthesize_waveform(rvq_decode(codes, cb), cfg.codec.griffin_lim_iterations)
    save_wav(wave, out_path)
    logger.info("wrote %s: %.2f s for %.2f s of MIDI", out_path, wave.seconds, target.end)
    return out_path


def evaluate(cfg: PipelineConfig, run_dir: str, ref_dir: str, gen_dir: str,
             reference: str = Reference.GROUND_TRUTH.value) -> MetricReport:
    cb = None
    if Reference(reference) is Reference.RECONSTRUCTION:
        cb = load_codebooks(os.path.join(run_dir, CODEBOOKS))
    report = evaluate_corpus(ref_dir, gen_dir, reference, cb)
    save_report(report, os.path.join(run_dir, "eval"), cfg.digest())
    return report


def reconstruct_clips(cfg: PipelineConfig, run_dir: str, split: str = "test") -> MetricReport:
    """Codec-only evaluation: each clip against its own reconstruction."""
    cb = load_codebooks(os.path.join(run_dir, CODEBOOKS))
    records = _split(_manifest(run_dir), split)
    refs = [load_audio(r.audio_path) for r in records]
    gens = [reconstruct(w, cb, cfg.codec.griffin_lim_iterations) for w in refs]
    report = evaluate_pairs(refs, gens, [r.clip_id for r in records], Reference.GROUND_TRUTH)
    save_report(report, os.path.join(run_dir, "reconstruct"), cfg.digest())
    return report


def toy_pairs(count: int, frames: int, model_cfg: ModelConfig, seed: int = 0,
              tokenizer_cfg: TokenizerConfig = TokenizerConfig()) -> List[TrainingPair]:
    """Random MIDI with random codec tokens, for gradient checks."""
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        midi = tokenize(random_performance(rng, frames / FRAME_RATE, notes_per_second=10.0), tokenizer_cfg)
        codes = rng.integers(0, model_cfg.codebook_size, (frames, model_cfg.levels))
        pairs.append(TrainingPair(midi, CodecMatrix(codes, model_cfg.codebook_size)))
    return pairs


def gradcheck(cfg: PipelineConfig) -> float:
    model_cfg = cfg.model
    if model_cfg.layers > 2 or model_cfg.hidden_dim > 16:
        model_cfg = ModelConfig(**get_preset_sections("tiny")["model"])
        logger.info("configured model is too large for a gradient check, using the tiny preset")
    batch = toy_pairs(2, 12, model_cfg, cfg.training.seed, cfg.tokenizer)
    return grad_check(model_cfg, batch, seed=cfg.training.seed, tokenizer_cfg=cfg.tokenizer)
