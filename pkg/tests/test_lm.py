import logging
import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from app.core.engine import (
    Sampling,
    accuracy,
    generate,
    grad_check,
    load_checkpoint,
    make_state,
    nar_levels_for_step,
    pair_losses,
    save_checkpoint,
    synthesize_long,
    train_step,
)
from app.core.errors import NonFiniteLossError, SequenceTooLongError, TokenStructureError
from app.core.model import (
    ModelConfig,
    PromptSpec,
    ar_loss,
    build_model,
    embed_pooled,
    nar_loss,
    with_eos,
)
from app.core.pipeline import toy_pairs
from app.core.quantizer import CodecMatrix
from app.core.tokenizer import TokenizerConfig
from app.ingestion.records import Note, NoteSequence

VOCAB = TokenizerConfig().stream_sizes


@pytest.fixture
def model(tiny_model_cfg):
    m = build_model(tiny_model_cfg, VOCAB)
    m.eval()
    return m


@pytest.fixture
def pair(tiny_model_cfg):
    return toy_pairs(1, 12, tiny_model_cfg, seed=3)[0]


def codes_of(pair):
    return torch.from_numpy(pair.codec.tokens)


class TestArchitecture:
    def test_pooled_embedding_shape(self, model, pair):
        assert embed_pooled(pair.midi, model).shape == (len(pair.midi), 16)
        assert embed_pooled(pair.midi, model, decoder="nar").shape == (len(pair.midi), 16)

    def test_zero_tables_give_zero_embeddings(self, model, pair):
        with torch.no_grad():
            for table in model.ar_midi.tables:
                table.weight.zero_()
        assert torch.all(embed_pooled(pair.midi, model) == 0)

    def test_ar_is_causal(self, model, pair):
        level1 = codes_of(pair)[:, 0]
        before = model.ar_logits(pair.midi, level1)
        for t in range(len(level1) - 1):
            perturbed = level1.clone()
            perturbed[t + 1:] = (perturbed[t + 1:] + 5) % 16
            after = model.ar_logits(pair.midi, perturbed)
            # row j predicts token j from tokens < j
            assert torch.equal(before[: t + 2], after[: t + 2])

    def test_ar_output_rows(self, model, pair):
        level1 = codes_of(pair)[:, 0]
        assert model.ar_logits(pair.midi, level1).shape == (len(level1) + 1, 17)

    def test_nar_sees_future_frames(self, model, pair):
        codes = codes_of(pair)
        before = model.nar_logits(pair.midi, codes, None, 2)
        perturbed = codes.clone()
        perturbed[-1, 0] = (perturbed[-1, 0] + 1) % 16
        after = model.nar_logits(pair.midi, perturbed, None, 2)
        assert not torch.equal(before[0], after[0])

    def test_nar_level_range(self, model, pair):
        with pytest.raises(ValueError):
            model.nar_logits(pair.midi, codes_of(pair), None, 1)
        with pytest.raises(ValueError):
            model.nar_logits(pair.midi, codes_of(pair), None, 4)

    def test_ar_loss_needs_eos(self, model, pair):
        with pytest.raises(ValueError, match="EOS"):
            ar_loss(model, pair.midi, codes_of(pair)[:, 0])

    def test_losses_are_finite_scalars(self, model, pair):
        level1 = torch.cat([codes_of(pair)[:, 0], torch.tensor([model.eos])])
        ar, logits = ar_loss(model, pair.midi, level1)
        nar = nar_loss(model, pair.midi, pair.codec.frames(4, 12), pair.codec.frames(0, 4), 3)
        assert ar.ndim == 0 and torch.isfinite(ar)
        assert nar.ndim == 0 and torch.isfinite(nar)
        assert logits.shape == (13, 17)

    def test_sequence_too_long(self, tiny_model_cfg, pair):
        small = build_model(tiny_model_cfg.model_copy(update={"max_seq_len": 8}), VOCAB)
        with pytest.raises(SequenceTooLongError, match="Segment"):
            small.ar_logits(pair.midi, codes_of(pair)[:, 0])

    def test_midi_outside_model_vocabulary(self, tiny_model_cfg, pair):
        narrow = build_model(tiny_model_cfg, (30,) + VOCAB[1:])
        with pytest.raises(TokenStructureError):
            narrow.ar_logits(pair.midi, codes_of(pair)[:, 0])

    def test_config_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=10, heads=3)


class TestTraining:
    def test_nar_level_sampling(self, model):
        state = make_state(model, 0.05, seed=7)
        levels = set()
        for step in range(40):
            state.step = step
            chosen = nar_levels_for_step(state)
            assert len(chosen) == 1 and 2 <= chosen[0] <= 3
            assert nar_levels_for_step(state) == chosen
            levels.add(chosen[0])
        assert levels == {2, 3}
        state.nar_all_levels = True
        assert nar_levels_for_step(state) == [2, 3]

    def test_zero_learning_rate_leaves_weights_unchanged(self, model, pair):
        before = [p.detach().clone() for p in model.parameters()]
        state = make_state(model, 0.0)
        train_step(state, [pair])
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))

    def test_uniform_logits_give_log_vocabulary_loss(self, model, pair):
        with torch.no_grad():
            for head in [model.ar_head, *model.nar_heads]:
                head.weight.zero_()
                head.bias.zero_()
        ar, _ = ar_loss(model, pair.midi, with_eos(pair.codec.tokens[:, 0].tolist(), model))
        assert float(ar) == pytest.approx(math.log(17))
        for level in (2, 3):
            nar = nar_loss(model, pair.midi, pair.codec, None, level)
            assert float(nar) == pytest.approx(math.log(16))

    def test_output_gradient_is_softmax_minus_onehot(self, model, pair):
        targets = with_eos(pair.codec.tokens[:, 0].tolist(), model)
        loss, logits = ar_loss(model, pair.midi, targets)
        loss.backward()
        expected = (torch.softmax(logits.detach(), -1) - F.one_hot(targets, 17)).mean(0)
        assert torch.allclose(model.ar_head.bias.grad, expected.to(model.dtype), atol=1e-6)

    def test_total_loss_is_ar_plus_every_nar_level(self, model, pair):
        ar, nar = pair_losses(model, pair, [2, 3], prompt_frames=0)
        expected_ar, _ = ar_loss(model, pair.midi, with_eos(pair.codec.tokens[:, 0].tolist(), model))
        expected_nar = sum(nar_loss(model, pair.midi, pair.codec, None, level) for level in (2, 3))
        assert float(ar) == pytest.approx(float(expected_ar))
        assert float(ar + nar) == pytest.approx(float(expected_ar + expected_nar))

    def test_training_is_deterministic(self, tiny_model_cfg, pair):
        runs = []
        for _ in range(2):
            state = make_state(build_model(tiny_model_cfg, VOCAB), 0.05, seed=1)
            for _ in range(3):
                train_step(state, [pair])
            runs.append([p.detach().clone() for p in state.model.parameters()])
        assert all(torch.equal(a, b) for a, b in zip(*runs))

    def test_loss_goes_down(self, tiny_model_cfg, pair):
        state = make_state(build_model(tiny_model_cfg, VOCAB), 0.05, seed=0)
        first = train_step(state, [pair])
        for _ in range(150):
            last = train_step(state, [pair])
        assert last["ar_loss"] < first["ar_loss"]
        assert last["step"] == 151

    def test_non_finite_loss_names_the_sample(self, model, pair):
        with torch.no_grad():
            model.ar_head.bias.fill_(float("nan"))
        state = make_state(model, 0.05)
        with pytest.raises(NonFiniteLossError) as info:
            train_step(state, [pair, pair])
        assert info.value.sample_index == 0

    def test_checkpoint_resumes_bit_exactly(self, tiny_model_cfg, pair, tmp_path):
        state = make_state(build_model(tiny_model_cfg, VOCAB), 0.05, seed=2)
        for _ in range(2):
            train_step(state, [pair])
        path = str(tmp_path / "lm" / "model.mvlm")
        save_checkpoint(state, path, "cfg-digest", "codec-digest")
        restored, meta = load_checkpoint(path)
        assert meta["config_digest"] == "cfg-digest"
        assert meta["codec_digest"] == "codec-digest"
        assert restored.step == 2
        for a, b in zip(state.model.parameters(), restored.model.parameters()):
            assert torch.equal(a, b)
        train_step(state, [pair])
        train_step(restored, [pair])
        for a, b in zip(state.model.parameters(), restored.model.parameters()):
            assert torch.equal(a, b)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "none.mvlm"))

    def test_gradients_match_finite_differences(self, tiny_model_cfg):
        batch = toy_pairs(2, 10, tiny_model_cfg, seed=0)
        assert grad_check(tiny_model_cfg, batch, n_params=200) < 1e-4

    def test_grad_check_refuses_large_models(self, pair):
        with pytest.raises(ValueError):
            grad_check(ModelConfig(), [pair])


@pytest.mark.slow
def test_overfits_four_clips():
    cfg = ModelConfig(layers=4, heads=4, hidden_dim=128, ff_dim=512, codebook_size=64, levels=4)
    pairs = toy_pairs(4, 50, cfg, seed=0)
    state = make_state(build_model(cfg, VOCAB), 0.05, seed=0, nar_all_levels=True)
    for _ in range(2000):
        train_step(state, pairs)
    scores = accuracy(state.model, pairs)
    assert scores["ar_accuracy"] > 0.99
    assert scores["nar_accuracy"] > 0.95


class TestGeneration:
    target = NoteSequence([Note(60, 80, 0.0, 0.4), Note(64, 80, 0.3, 0.5)])

    def test_frame_cap_and_ranges(self, model):
        codes = generate(model, self.target, seed=0)
        cap = math.ceil(self.target.end * 50 * 1.25)
        assert 1 <= len(codes) <= cap
        assert codes.levels == 3
        assert codes.tokens.min() >= 0 and codes.tokens.max() < 16

    def test_same_seed_same_output(self, model):
        a = generate(model, self.target, seed=4)
        b = generate(model, self.target, seed=4)
        assert np.array_equal(a.tokens, b.tokens)

    def test_greedy_is_deterministic_without_seed(self, model):
        a = generate(model, self.target, sampling=Sampling(greedy=True), seed=1)
        b = generate(model, self.target, sampling=Sampling(greedy=True), seed=2)
        assert np.array_equal(a.tokens, b.tokens)

    def test_prompt_frames_are_not_returned(self, model, caplog):
        prompt_midi = NoteSequence([Note(67, 70, 0.0, 2.9)])
        prompt_codes = CodecMatrix(np.random.default_rng(0).integers(0, 16, (150, 3)), 16)
        prompt = PromptSpec.from_clip(prompt_codes, prompt_midi, 3.0)
        with caplog.at_level(logging.WARNING):
            codes = generate(model, self.target, prompt, seed=0)
        assert len(codes) <= math.ceil(self.target.end * 50 * 1.25)
        assert "disagree" not in caplog.text

    def test_misaligned_prompt_warns(self, model, caplog):
        prompt_midi = NoteSequence([Note(67, 70, 0.0, 1.0)])
        prompt_codes = CodecMatrix(np.zeros((150, 3), dtype=np.int64), 16)
        with caplog.at_level(logging.WARNING):
            generate(model, self.target, PromptSpec(prompt_codes, prompt_midi, 3.0), seed=0)
        assert "disagree" in caplog.text

    def test_empty_target(self, model):
        with pytest.raises(ValueError, match="empty"):
            generate(model, NoteSequence())

    def test_long_target_is_generated_piecewise(self, model, caplog):
        notes = NoteSequence([Note(60, 80, 0.1, 0.5), Note(62, 80, 2.2, 0.5)])
        with caplog.at_level(logging.INFO):
            codes = synthesize_long(model, notes, segment_seconds=1.0, seed=0, silence=(3, 5, 7))
        assert "no notes" in caplog.text
        assert 135 <= len(codes) <= 100 + math.ceil(0.7 * 50 * 1.25)
        assert np.all(codes.tokens[50:100] == [3, 5, 7])

    def test_segments_keep_their_place_on_the_timeline(self, model):
        notes = NoteSequence([Note(60, 80, 0.0, 0.4), Note(62, 80, 1.5, 0.2)])
        codes = synthesize_long(model, notes, segment_seconds=1.0, seed=0)
        assert 85 <= len(codes) <= 50 + math.ceil(0.7 * 50 * 1.25)

    def test_silence_needs_one_code_per_level(self, model):
        with pytest.raises(ValueError, match="per level"):
            synthesize_long(model, self.target, silence=(0, 0))
