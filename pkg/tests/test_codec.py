import logging

import librosa
import numpy as np
import pytest

from app.core.embedder import (
    FRAME_RATE,
    HOP_LENGTH,
    LOG_FLOOR,
    FeatureMatrix,
    frame_count,
    frame_features,
    synthesize_waveform,
)
from app.core.errors import CodebookError
from app.core.model import PromptSpec
from app.core.quantizer import (
    CodecMatrix,
    load_codebooks,
    load_codec,
    nearest,
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
from app.core.tokenizer import PromptMode
from app.ingestion.records import SAMPLE_RATE, Note, NoteSequence, Waveform
from conftest import sine


def gaussian_corpus(seed, frames=300, dim=8, clips=3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, (5, dim))
    corpus = []
    for _ in range(clips):
        labels = rng.integers(0, 5, frames // clips)
        corpus.append(FeatureMatrix(centers[labels] + rng.normal(0, 1, (len(labels), dim))))
    return corpus


class TestFrontend:
    @pytest.mark.parametrize("seconds,frames", [(15.0, 750), (16.0, 800), (20.0, 1000)])
    def test_frame_arithmetic(self, seconds, frames):
        assert frame_count(int(seconds * SAMPLE_RATE)) == frames
        assert frame_features(sine(440.0, seconds)).frames.shape == (frames, 64)

    def test_prompt_is_150_frames(self, scale):
        codes = CodecMatrix(np.zeros((750, 4), dtype=np.int64), 256)
        assert len(PromptSpec.from_clip(codes, scale, 3.0).codec) == 150

    def test_note_boundary_prompt_keeps_only_whole_notes(self):
        midi = NoteSequence([Note(60, 80, 0.0, 1.0), Note(64, 80, 2.9, 1.0)])
        codes = CodecMatrix(np.zeros((150, 4), dtype=np.int64), 256)
        prompt = PromptSpec.from_clip(codes, midi, 3.0, PromptMode.NOTE_BOUNDARY)
        assert len(prompt.codec) == 50
        assert [n.pitch for n in prompt.midi] == [60]
        assert prompt.mode is PromptMode.NOTE_BOUNDARY

    def test_hard_cut_prompt_truncates_the_crossing_note(self):
        midi = NoteSequence([Note(60, 80, 0.0, 1.0), Note(64, 80, 2.9, 1.0)])
        codes = CodecMatrix(np.zeros((150, 4), dtype=np.int64), 256)
        prompt = PromptSpec.from_clip(codes, midi, 3.0, PromptMode.HARD_CUT)
        assert len(prompt.codec) == 150
        assert prompt.midi.notes[1].duration == pytest.approx(0.1)

    def test_a440_peaks_in_the_band_around_440_hz(self):
        centers = librosa.mel_frequencies(66, fmin=0.0, fmax=SAMPLE_RATE / 2)[1:-1]
        closest = set(np.argsort(np.abs(centers - 440.0))[:2])
        peaks = frame_features(sine(440.0, 1.0)).frames.argmax(axis=1)
        assert set(peaks[2:-2]) <= closest

    def test_shorter_than_one_window(self):
        f = frame_features(Waveform(np.ones(100) * 0.1))
        assert f.frames.shape == (1, 64)

    def test_silence_sits_on_the_floor(self):
        f = frame_features(Waveform(np.zeros(SAMPLE_RATE)))
        assert np.all(f.frames == LOG_FLOOR)

    def test_deterministic(self):
        w = sine(261.63, 1.0)
        assert np.array_equal(frame_features(w).frames, frame_features(w).frames)

    def test_resynthesis_keeps_length_and_pitch(self):
        f = frame_features(sine(440.0, 1.0))
        w = synthesize_waveform(f, iterations=32)
        assert len(w) == len(f) * HOP_LENGTH
        assert np.abs(w.samples).max() <= 1.0
        spectrum = np.abs(np.fft.rfft(w.samples))
        peak = np.fft.rfftfreq(len(w), 1 / SAMPLE_RATE)[np.argmax(spectrum)]
        assert abs(peak - 440.0) < 35.0

    def test_silent_features_resynthesize_to_silence(self):
        f = FeatureMatrix(np.full((10, 64), LOG_FLOOR))
        assert np.allclose(synthesize_waveform(f).samples, 0.0)


class TestKMeans:
    def test_two_clusters_recover_exact_means(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, 0.1, (9, 2))
        b = rng.normal(10.0, 0.1, (11, 2))
        cb = train_rvq([FeatureMatrix(np.concatenate([a, b]))], levels=1, codebook_size=2, seed=0)
        got = sorted(map(tuple, cb.centroids[0]))
        expected = sorted([tuple(a.mean(axis=0)), tuple(b.mean(axis=0))])
        assert np.allclose(got, expected, atol=1e-9, rtol=0)

    def test_nearest_breaks_ties_to_lowest_index(self):
        centroids = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        labels, _ = nearest(np.array([[0.0, 0.0], [2.0, 0.0]]), centroids)
        assert list(labels) == [0, 0]

    def test_fewer_frames_than_codebook_entries(self):
        with pytest.raises(CodebookError, match="codebook_size"):
            train_rvq([FeatureMatrix(np.zeros((10, 4)))], levels=1, codebook_size=16)

    def test_identical_frames_warn_and_collapse(self, caplog):
        frames = FeatureMatrix(np.tile([[1.0, 2.0, 3.0]], (20, 1)))
        with caplog.at_level(logging.WARNING):
            cb = train_rvq([frames], levels=2, codebook_size=4)
        assert "distinct" in caplog.text
        codes = rvq_encode(frames, cb)
        assert np.all(codes.tokens == 0)
        assert np.allclose(rvq_decode(codes, cb).frames, frames.frames)

    def test_mismatched_dimensions_rejected(self):
        with pytest.raises(CodebookError):
            train_rvq([FeatureMatrix(np.zeros((10, 4))), FeatureMatrix(np.zeros((10, 5)))],
                      levels=1, codebook_size=2)


class TestResidualQuantizer:
    @pytest.mark.parametrize("seed", range(20))
    def test_distortion_never_increases_with_levels(self, seed):
        corpus = gaussian_corpus(seed)
        cb = train_rvq(corpus, levels=4, codebook_size=8, seed=seed)
        x = np.concatenate([f.frames for f in corpus])
        errors = [np.mean(np.sum(x ** 2, axis=1))]
        for levels in range(1, 5):
            partial = cb.centroids[:levels]
            residual = x.copy()
            for level in range(levels):
                labels, _ = nearest(residual, partial[level])
                residual -= partial[level][labels]
            errors.append(np.mean(np.sum(residual ** 2, axis=1)))
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
        assert cb.distortion == pytest.approx(errors[1:])

    def test_training_is_deterministic(self):
        corpus = gaussian_corpus(3)
        a = train_rvq(corpus, levels=2, codebook_size=8, seed=11)
        b = train_rvq(corpus, levels=2, codebook_size=8, seed=11)
        assert np.array_equal(a.centroids, b.centroids)

    def test_decode_of_encode_is_sum_of_chosen_centroids(self):
        corpus = gaussian_corpus(1)
        cb = train_rvq(corpus, levels=3, codebook_size=8)
        codes = rvq_encode(corpus[0], cb)
        assert codes.tokens.shape == (len(corpus[0]), 3)
        expected = sum(cb.centroids[l][codes.tokens[:, l]] for l in range(3))
        assert np.allclose(rvq_decode(codes, cb).frames, expected)

    def test_out_of_range_token_names_frame_and_level(self):
        cb = train_rvq(gaussian_corpus(2), levels=2, codebook_size=8)
        tokens = np.zeros((5, 2), dtype=np.int64)
        tokens[3, 1] = 8
        with pytest.raises(CodebookError, match="frame 3, level 2"):
            rvq_decode(CodecMatrix(tokens, 8), cb)

    def test_dimension_mismatch_on_encode(self):
        cb = train_rvq(gaussian_corpus(2), levels=1, codebook_size=8)
        with pytest.raises(CodebookError):
            rvq_encode(FeatureMatrix(np.zeros((4, 3))), cb)

    def test_level_one_centroid_leaves_zero_residual(self):
        cb = train_rvq(gaussian_corpus(6), levels=2, codebook_size=8)
        codes = rvq_encode(FeatureMatrix(cb.centroids[0].copy()), cb)
        zero_label = nearest(np.zeros((1, cb.dim)), cb.centroids[1])[0][0]
        assert np.array_equal(codes.tokens[:, 0], np.arange(8))
        assert np.all(codes.tokens[:, 1] == zero_label)

    def test_silence_codes_match_encoded_silence(self):
        cb = train_rvq(gaussian_corpus(7), levels=3, codebook_size=8)
        silent = frame_features(Waveform(np.zeros(SAMPLE_RATE)), cb.dim)
        assert np.array_equal(silence_codes(cb), rvq_encode(silent, cb).tokens[0])

    def test_refinement_on_crops_does_not_hurt_first_level(self):
        corpus = gaussian_corpus(4)
        cb = train_rvq(corpus, levels=2, codebook_size=8)
        crops = random_crops(corpus, 20, np.random.default_rng(0))
        assert [len(c) for c in crops] == [20, 20, 20]
        x = np.concatenate([c.frames for c in crops])
        before = nearest(x, cb.centroids[0])[1].mean()
        refined = refine_rvq(cb, crops, iterations=5)
        after = nearest(x, refined.centroids[0])[1].mean()
        assert after <= before + 1e-12

    def test_reconstruct_keeps_length(self):
        w = sine(330.0, 1.0)
        cb = train_rvq([frame_features(w)], levels=2, codebook_size=8)
        assert len(reconstruct(w, cb, iterations=4)) == len(w)


class TestFiles:
    def test_codebook_file_and_sidecar(self, tmp_path):
        cb = train_rvq(gaussian_corpus(5), levels=2, codebook_size=8)
        cb.digest = "abc123"
        path = str(tmp_path / "codec" / "cb.rvq")
        save_codebooks(cb, path)
        loaded = load_codebooks(path)
        assert loaded.digest == "abc123"
        assert loaded.iterations == cb.iterations
        assert np.array_equal(loaded.centroids, cb.centroids)
        frames = gaussian_corpus(5)[0]
        assert np.array_equal(rvq_encode(frames, loaded).tokens, rvq_encode(frames, cb).tokens)

    def test_missing_codebook_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_codebooks(str(tmp_path / "nothing.rvq"))

    def test_codec_token_file(self, tmp_path):
        codes = CodecMatrix(np.arange(12).reshape(4, 3), 16)
        path = str(tmp_path / "clip.codx")
        save_codec(codes, path)
        loaded = load_codec(path)
        assert np.array_equal(loaded.tokens, codes.tokens)
        assert loaded.codebook_size == 16

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "clip.codx"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(CodebookError):
            load_codec(str(path))


def test_frame_rate_is_fifty_hertz():
    assert FRAME_RATE == 50
